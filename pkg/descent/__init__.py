import taichi as ti

# f64 everywhere: the solver tolerances sit far below f32 resolution
ti.init(arch=ti.cpu, default_fp=ti.f64, default_ip=ti.i32)

__version__ = "0.1.0"
