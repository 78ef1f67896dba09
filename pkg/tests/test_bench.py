import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from descent import bench
from descent.bench import (
    TRACE_HEADER,
    compare,
    demo_step_geometry,
    derive_seed,
    generate_dataset,
    read_trace_csv,
    run_experiment,
    summarize,
    write_dataset,
    write_trace_csv,
)
from descent.config import DatasetSpec, ExperimentConfig
from descent.errors import ConfigError, MalformedTrace, MetricFailure, NotPositiveDefinite, UnknownSpec
from descent.main import main
from descent.metrics import MetricKind
from descent.stepper import FixedRate, run_descent

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def linreg_config(tmp_path, **overrides) -> ExperimentConfig:
    data = {
        "model": {"kind": "linear_least_squares"},
        "dataset": {"name": "linreg", "size": 64, "noise": 0.0, "input_dim": 1, "seed": 3},
        "methods": ["identity"],
        "policy": {"type": "fixed_rate", "alpha": 1.0},
        "lam": 0.0,
        "iterations": 200,
        "out_dir": str(tmp_path),
    }
    data.update(overrides)
    return ExperimentConfig.model_validate(data)


class TestGenerateDataset:
    def test_noiseless_linreg(self):
        spec = DatasetSpec(name="linreg", size=4, noise=0.0, input_dim=2, output_dim=2, weights=[[1, 0], [0, 1]], bias=[0, 0])
        data = generate_dataset(spec, seed=5)
        np.testing.assert_array_equal(data.samples.ys, data.samples.xs)

    @pytest.mark.parametrize("name", ["linreg", "sine", "spiral3"])
    def test_deterministic(self, name):
        spec = DatasetSpec(name=name, size=30, input_dim=2 if name == "spiral3" else 1)
        a, b = generate_dataset(spec, seed=11), generate_dataset(spec, seed=11)
        np.testing.assert_array_equal(a.samples.xs, b.samples.xs)
        np.testing.assert_array_equal(a.samples.ys, b.samples.ys)
        assert a.metadata == b.metadata

    def test_seed_matters(self):
        spec = DatasetSpec(name="sine", size=10)
        assert not np.array_equal(generate_dataset(spec, 1).samples.xs, generate_dataset(spec, 2).samples.xs)

    def test_sine_variance(self):
        data = generate_dataset(DatasetSpec(name="sine", size=256, noise=0.1), seed=7)
        assert 0.3 <= data.samples.ys.var() <= 0.8
        assert np.all((0 <= data.samples.xs) & (data.samples.xs <= 1))

    def test_spiral3(self):
        data = generate_dataset(DatasetSpec(name="spiral3", size=100, input_dim=2, output_dim=3))
        assert data.samples.xs.shape == (100, 2)
        np.testing.assert_array_equal(data.samples.ys.sum(axis=1), 1.0)
        counts = data.samples.ys.sum(axis=0)
        assert sorted(counts) == [33, 33, 34]

    def test_fixed_shapes_recorded(self):
        data = generate_dataset(DatasetSpec(name="spiral3", size=30))
        assert data.samples.xs.shape == (30, 2) and data.samples.ys.shape == (30, 3)
        assert (data.metadata["spec"]["input_dim"], data.metadata["spec"]["output_dim"]) == (2, 3)

    @pytest.mark.parametrize("name, dims", [("sine", {"input_dim": 2}), ("spiral3", {"output_dim": 1}), ("spiral3", {"input_dim": 3})])
    def test_conflicting_shape(self, name, dims):
        with pytest.raises(ValidationError):
            DatasetSpec(name=name, **dims)

    def test_regenerates_from_metadata(self):
        data = generate_dataset(DatasetSpec(name="linreg", size=20, input_dim=3, output_dim=2), seed=4)
        again = generate_dataset(DatasetSpec(**data.metadata["spec"]), seed=data.metadata["seed"])
        np.testing.assert_array_equal(again.samples.xs, data.samples.xs)
        np.testing.assert_array_equal(again.samples.ys, data.samples.ys)

    def test_unknown(self):
        with pytest.raises(UnknownSpec):
            generate_dataset(DatasetSpec(name="mnist"))

    def test_linreg_weight_shape(self):
        with pytest.raises(UnknownSpec):
            generate_dataset(DatasetSpec(name="linreg", input_dim=2, weights=[[1.0]]))

    def test_write(self, tmp_path):
        data = generate_dataset(DatasetSpec(name="sine", size=5), seed=2)
        path = write_dataset(data, tmp_path)
        lines = path.read_text().split("\n")
        assert lines[0] == "x0,y0"
        assert len(lines) == 7 and lines[-1] == ""
        assert float(lines[1].split(",")[0]) == data.samples.xs[0, 0]
        meta = json.loads((tmp_path / "sine.json").read_text())
        assert meta["seed"] == 2


class TestSeeds:
    def test_derive_seed(self):
        assert derive_seed(1, "hessian") == derive_seed(1, "hessian")
        assert derive_seed(1, "hessian") != derive_seed(1, "identity")
        assert derive_seed(1, "hessian") != derive_seed(2, "hessian")
        assert 0 <= derive_seed(7, "ggn") < 2**63


class TestTraceCsv:
    def make_trace(self):
        data = generate_dataset(DatasetSpec(name="linreg", size=16, noise=0.1), seed=1)
        model = bench.build_model(ExperimentConfig(model={"kind": "linear_gaussian"}, dataset=data.spec).model, data)
        return run_descent(model, data.samples, MetricKind.CLASSICAL_GAUSS_NEWTON, FixedRate(0.5), iterations=4)

    def test_schema(self, tmp_path):
        path = write_trace_csv(self.make_trace(), tmp_path / "cgn.csv")
        raw = path.read_bytes()
        assert b"\r" not in raw
        lines = raw.decode().split("\n")
        assert lines[0] == ",".join(TRACE_HEADER)
        assert lines[0] == "iter,loss,grad_norm,alpha,step_norm,constraint,lambda_used,wall_ms"
        assert all(line.endswith(",0") for line in lines[1:-1])

    def test_read_back(self, tmp_path):
        trace = self.make_trace()
        records = read_trace_csv(write_trace_csv(trace, tmp_path / "cgn.csv"))
        assert records == trace.records

    def test_timing_column(self, tmp_path):
        trace = self.make_trace()
        records = read_trace_csv(write_trace_csv(trace, tmp_path / "cgn.csv", timing=True))
        assert [r.wall_ms for r in records] == [r.wall_ms for r in trace.records]

    @pytest.mark.parametrize(
        "content",
        [
            "",
            "iter,loss\n0,1\n",
            ",".join(TRACE_HEADER) + "\n",
            ",".join(TRACE_HEADER) + "\n0,1,2,3,4,5,6\n",
            ",".join(TRACE_HEADER) + "\n0,1,2,x,4,5,6,0\n",
            ",".join(TRACE_HEADER) + "\n1,1,2,3,4,5,6,0\n",
        ],
    )
    def test_malformed(self, tmp_path, content):
        path = tmp_path / "bad.csv"
        path.write_text(content)
        with pytest.raises(MalformedTrace):
            read_trace_csv(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MalformedTrace):
            read_trace_csv(tmp_path / "nope.csv")


class TestRunExperiment:
    def test_gradient_descent_converges(self, tmp_path):
        result = run_experiment(linreg_config(tmp_path))
        assert result.final_losses["identity"] <= 1e-6
        assert (tmp_path / "identity.csv").exists()

    def test_newton_one_step(self, tmp_path):
        result = run_experiment(linreg_config(tmp_path, methods=["hessian"], iterations=2))
        records = read_trace_csv(result.trace_paths["hessian"])
        assert records[1].loss <= 1e-20

    def test_manifest(self, tmp_path):
        config = linreg_config(tmp_path, methods=["identity", "cgn"], iterations=5)
        result = run_experiment(config)
        manifest = json.loads(result.manifest_path.read_text())
        assert manifest["config_hash"] == config.config_hash()
        assert set(manifest["final_loss"]) == {"identity", "cgn"}
        assert manifest["failures"] == {}
        assert "version" in manifest

    def test_byte_reproducible(self, tmp_path):
        overrides = dict(
            model={"kind": "mlp_gaussian", "width": 4},
            dataset={"name": "sine", "size": 40, "seed": 2},
            methods=["identity", "ggn", "cgn"],
            policy={"type": "trust_region", "eps": 0.05},
            lam=None,
            iterations=10,
            batch_size=16,
        )
        a = run_experiment(linreg_config(tmp_path / "a", **overrides))
        b = run_experiment(linreg_config(tmp_path / "b", **overrides))
        for method in ("identity", "ggn", "cgn"):
            assert a.trace_paths[method].read_bytes() == b.trace_paths[method].read_bytes()
        assert a.manifest_path.read_bytes() == b.manifest_path.read_bytes()

    def test_adding_a_method_keeps_others(self, tmp_path):
        one = run_experiment(linreg_config(tmp_path / "one", methods=["cgn"], iterations=5, batch_size=8, lam=None))
        two = run_experiment(linreg_config(tmp_path / "two", methods=["identity", "cgn"], iterations=5, batch_size=8, lam=None))
        assert one.trace_paths["cgn"].read_bytes() == two.trace_paths["cgn"].read_bytes()

    def test_failure_is_isolated(self, tmp_path, monkeypatch):
        real = bench.run_descent

        def flaky(model, data, kind, *args, **kwargs):
            if kind is MetricKind.HESSIAN:
                raise MetricFailure("hessian", 1e3)
            return real(model, data, kind, *args, **kwargs)

        monkeypatch.setattr(bench, "run_descent", flaky)
        result = run_experiment(linreg_config(tmp_path, methods=["hessian", "identity"], iterations=3))
        assert "hessian" in result.failures
        assert set(result.trace_paths) == {"identity"}
        assert not result.all_failed
        assert not (tmp_path / "hessian.csv").exists()

    def test_loss_non_increasing_with_small_radius(self, tmp_path):
        config = linreg_config(
            tmp_path,
            model={"kind": "linear_gaussian"},
            dataset={"name": "linreg", "size": 128, "noise": 0.1, "input_dim": 2, "seed": 3, "weights": [[2.0, -1.5]], "bias": [1.0]},
            methods=["identity", "cgn", "ggn"],
            policy={"type": "trust_region", "eps": 1e-2},
            lam=None,
            iterations=60,
        )
        for path in run_experiment(config).trace_paths.values():
            losses = [r.loss for r in read_trace_csv(path)]
            assert all(b <= a for a, b in zip(losses, losses[1:]))


class TestCompare:
    def traces(self, tmp_path, methods, **overrides):
        return run_experiment(linreg_config(tmp_path, methods=methods, **overrides)).trace_paths

    def test_single_trace(self, tmp_path):
        paths = self.traces(tmp_path, ["identity"], iterations=5)
        table = compare([paths["identity"]])
        lines = table.splitlines()
        assert len(lines) == 2
        assert lines[1].startswith("identity")

    def test_identical_runs_identical_rows(self, tmp_path):
        a = self.traces(tmp_path / "a", ["cgn"], iterations=5)["cgn"]
        b = self.traces(tmp_path / "b", ["cgn"], iterations=5)["cgn"]
        rows = summarize([a, b])
        assert rows[0] == rows[1]

    def test_newton_beats_vanilla(self, tmp_path):
        paths = self.traces(
            tmp_path,
            ["identity", "hessian"],
            dataset={"name": "linreg", "size": 64, "noise": 0.1, "input_dim": 3, "seed": 9},
            iterations=8,
        )
        rows = {r.method: r for r in summarize(paths.values())}
        assert rows["hessian"].iters_to_threshold is not None
        assert rows["identity"].iters_to_threshold is None or rows["hessian"].iters_to_threshold < rows["identity"].iters_to_threshold
        assert list(rows)[0] == "hessian"

    def test_sorted_by_final_loss(self, tmp_path):
        paths = self.traces(tmp_path, ["identity", "hessian", "cgn"], iterations=3, policy={"type": "fixed_rate", "alpha": 0.1})
        rows = summarize(paths.values())
        assert [r.final_loss for r in rows] == sorted(r.final_loss for r in rows)

    def test_explicit_threshold(self, tmp_path):
        path = self.traces(tmp_path, ["identity"], iterations=5)["identity"]
        assert summarize([path], threshold=1e9)[0].iters_to_threshold == 0

    def test_no_traces(self):
        with pytest.raises(MalformedTrace):
            compare([])


class TestStepGeometry:
    def test_identity_metric(self):
        demo = demo_step_geometry([0.3, -0.7], np.eye(2), 0.1)
        assert demo.angle_deg == pytest.approx(0.0, abs=1e-6)
        np.testing.assert_allclose(demo.metric, demo.vanilla)

    def test_axis_aligned(self):
        eps = 0.2
        demo = demo_step_geometry([1.0, 0.0], np.diag([4.0, 1.0]), eps)
        np.testing.assert_allclose(demo.vanilla, [-eps, 0.0])
        np.testing.assert_allclose(demo.metric, [-0.5 * eps, 0.0])
        assert demo.angle_deg == pytest.approx(0.0, abs=1e-6)

    def test_anisotropy_rotates(self):
        demo = demo_step_geometry([1.0, 1.0], np.diag([100.0, 1.0]), 0.1)
        assert demo.angle_deg > 30.0

    def test_csv(self):
        text = demo_step_geometry([1.0, 0.0], np.diag([4.0, 1.0]), 1.0).to_csv()
        lines = text.splitlines()
        assert lines[0] == "step,d0,d1,norm,angle_deg"
        assert lines[1].startswith("vanilla,-1,")
        assert lines[2].startswith("metric,-0.5,")

    def test_not_spd(self):
        with pytest.raises(NotPositiveDefinite):
            demo_step_geometry([1.0, 0.0], np.diag([1.0, -1.0]), 0.1)


class TestConfig:
    @pytest.mark.parametrize("name", ["linreg", "sine", "spiral3"])
    def test_committed_configs_load(self, name):
        config = ExperimentConfig.load(CONFIGS / f"{name}.json")
        assert config.dataset.name == name
        assert ExperimentConfig.model_validate_json(config.model_dump_json()) == config

    def test_hash_ignores_out_dir(self, tmp_path):
        a = linreg_config(tmp_path / "a")
        b = linreg_config(tmp_path / "b")
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != a.with_overrides(seed=2).config_hash()

    def test_overrides(self, tmp_path):
        config = linreg_config(tmp_path).with_overrides(methods=["hessian", "cgn"], seed=5, out_dir=None)
        assert config.methods == [MetricKind.HESSIAN, MetricKind.CLASSICAL_GAUSS_NEWTON]
        assert config.seed == 5
        assert config.out_dir == str(tmp_path)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"methods": ["adam"]},
            {"seed": 0},
            {"iterations": -1},
            {"batch_size": 1000},
            {"methods": []},
            {"methods": ["empirical_fisher"]},
        ],
    )
    def test_invalid_overrides(self, tmp_path, overrides):
        with pytest.raises(ConfigError):
            linreg_config(tmp_path).with_overrides(**overrides)

    def test_softmax_needs_spiral(self, tmp_path):
        with pytest.raises(ConfigError):
            linreg_config(tmp_path).with_overrides(model={"kind": "softmax"})

    def test_unknown_field(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"dataset": {"name": "sine"}, "colour": "red"}))
        with pytest.raises(ConfigError):
            ExperimentConfig.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "missing.json")


class TestCli:
    def write_config(self, tmp_path, **overrides):
        path = tmp_path / "config.json"
        path.write_text(linreg_config(tmp_path / "out", iterations=5, **overrides).model_dump_json())
        return path

    def test_demo(self, capsys):
        assert main(["demo", "--gradient", "1,1", "--metric", "100,0,0,1", "--eps", "0.1"]) == 0
        out = capsys.readouterr().out
        assert out.startswith("step,d0,d1,norm,angle_deg")

    def test_demo_not_spd(self):
        assert main(["demo", "--gradient", "1,0", "--metric", "1,0,0,-1"]) == 3

    def test_demo_bad_shape(self):
        assert main(["demo", "--gradient", "1,0", "--metric", "1,0,0"]) == 2

    def test_run_and_compare(self, tmp_path, capsys):
        config = self.write_config(tmp_path)
        out = tmp_path / "flag_out"
        assert main(["run", "--config", str(config), "--out", str(out), "--methods", "identity,cgn", "--seed", "4"]) == 0
        assert (out / "identity.csv").exists() and (out / "cgn.csv").exists()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 4
        capsys.readouterr()
        assert main(["compare", str(out / "identity.csv"), str(out / "cgn.csv")]) == 0
        assert len(capsys.readouterr().out.splitlines()) == 3

    def test_gen(self, tmp_path):
        config = self.write_config(tmp_path)
        assert main(["gen", "--config", str(config), "--out", str(tmp_path / "data")]) == 0
        assert (tmp_path / "data" / "linreg.csv").exists()

    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["run", "--config", str(bad)]) == 2

    def test_unknown_method(self, tmp_path):
        assert main(["run", "--config", str(self.write_config(tmp_path)), "--methods", "sgd"]) == 2

    def test_malformed_trace(self, tmp_path):
        bad = tmp_path / "x.csv"
        bad.write_text("nope\n")
        assert main(["compare", str(bad)]) == 2

    def test_all_methods_fail(self, tmp_path, monkeypatch):
        def failing(model, data, kind, *args, **kwargs):
            raise MetricFailure(kind.value, 1.0)

        monkeypatch.setattr(bench, "run_descent", failing)
        assert main(["run", "--config", str(self.write_config(tmp_path))]) == 3


@pytest.mark.slow
class TestSineDeskRun:
    """All six methods on the committed sine experiment."""

    def test_every_method_settles(self, tmp_path):
        config = ExperimentConfig.load(CONFIGS / "sine.json").with_overrides(out_dir=str(tmp_path))
        assert len(config.methods) == 6 and config.iterations == 200
        result = run_experiment(config)
        assert not result.failures
        for method, path in result.trace_paths.items():
            losses = [r.loss for r in read_trace_csv(path)]
            assert losses[-1] <= 1.05 * min(losses), method
            assert result.final_losses[method] <= losses[0], method
