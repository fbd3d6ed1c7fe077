import csv
import io
import json

import numpy as np
import pytest

from quantlock.analysis_defense import (
    DEFAULT_SIGMAS,
    DefenseConfig,
    defense_sweep,
    noise_defense,
    synthetic_checkpoint,
    vulnerability_profile,
    width_ratios,
    write_json,
)
from quantlock.nn_lab import ToyModel, TriggerSpec, evaluate, generate_dataset
from quantlock.tensor_store import QuantizablePolicy, TensorMap, save_checkpoint


@pytest.fixture
def weights():
    return ToyModel.init(seed=4).weights()


class TestNoiseDefense:
    def test_zero_sigma_is_identity(self, weights):
        assert noise_defense(weights, 0.0, seed=3).equals(weights)

    def test_deterministic_per_seed(self, weights):
        a = noise_defense(weights, 0.01, seed=1)
        assert a.equals(noise_defense(weights, 0.01, seed=1))
        assert not a.equals(noise_defense(weights, 0.01, seed=2))

    def test_biases_untouched(self, weights):
        out = noise_defense(weights, 0.5, seed=0)
        for k in weights:
            if k.endswith("bias") or k == "fc2.weight":
                np.testing.assert_array_equal(out[k], weights[k])
            else:
                assert not np.array_equal(out[k], weights[k])

    def test_independent_of_other_tensors(self, weights):
        full = noise_defense(weights, 0.1, seed=5)
        alone = noise_defense(TensorMap({"fc1.weight": weights["fc1.weight"]}), 0.1, seed=5)
        np.testing.assert_array_equal(full["fc1.weight"], alone["fc1.weight"])

    def test_noise_statistics(self):
        w = TensorMap({"w": np.zeros((512, 512), np.float32)})
        n = noise_defense(w, 0.02, seed=0)["w"]
        assert abs(n.mean()) < 1e-3 and n.std() == pytest.approx(0.02, rel=0.01)

    def test_negative_sigma(self, weights):
        with pytest.raises(ValueError):
            noise_defense(weights, -1.0)


@pytest.fixture(scope="module")
def setup():
    return ToyModel.init(seed=1), generate_dataset(5, 300, 100, TriggerSpec())


class TestDefenseSweep:
    def test_zero_row_equals_baseline(self, setup):
        model, ds = setup
        rep = defense_sweep(model, ds, DefenseConfig(sigmas=(0.0, 1e-3)))
        assert rep.rows[0].metrics == rep.baseline
        assert rep.baseline["full"] == evaluate(model, ds)
        assert [r.effective_sigma for r in rep.rows] == [0.0, 1e-3 * rep.config.sigma_scale]

    def test_default_grid(self):
        assert DefenseConfig().sigmas == DEFAULT_SIGMAS

    def test_serialization(self, setup):
        model, ds = setup
        rep = defense_sweep(model, ds, DefenseConfig(sigmas=(0.0,)))
        d = json.loads(json.dumps(rep.to_dict()))
        assert set(d["rows"][0]["metrics"]) == {"full", "int8", "fp4", "nf4"}
        rows = list(csv.reader(io.StringIO(rep.to_csv())))
        assert rows[0][0] == "sigma" and len(rows) == 1 + 4

    def test_invalid(self):
        with pytest.raises(ValueError):
            DefenseConfig(sigmas=(-0.1,))


class TestVulnerabilityProfile:
    def test_int8_mean_width_closed_form(self):
        # Absmax 1 per row; every other value maps to an interior symbol, so
        # each free interval is one grid step of width 1/127.
        row = np.concatenate([[1.0], np.linspace(-0.9, 0.9, 63)]).astype(np.float32)
        ckpt = TensorMap({"w": np.tile(row, (16, 1))})
        prof = vulnerability_profile(ckpt, ["int8"])
        s = prof.summary["int8"]
        assert s["count"] == 16 * 63 and s["frozen_fraction"] == pytest.approx(1 / 64)
        assert prof.mean_width("int8") == pytest.approx(1 / 127, rel=1e-4)

    def test_magnitude_only(self, rng):
        prof = vulnerability_profile(TensorMap({"w": rng.standard_normal((16, 16))}))
        assert prof.summary == {} and prof.tensors[0].widths == {}
        assert sum(prof.tensors[0].magnitude["density"]) == pytest.approx(1.0)

    def test_histograms_normalized(self, rng):
        prof = vulnerability_profile(TensorMap({"w": rng.standard_normal((32, 64))}), ["nf4", "fp4"])
        for m in ("nf4", "fp4"):
            assert sum(prof.tensors[0].widths[m]["density"]) == pytest.approx(1.0)

    def test_non_quantizable_skipped(self, rng):
        ckpt = TensorMap({"w": rng.standard_normal((16, 16)), "b": rng.standard_normal(16)})
        prof = vulnerability_profile(ckpt, ["int8"])
        by_name = {t.name: t for t in prof.tensors}
        assert not by_name["b"].quantizable and by_name["b"].widths == {}
        assert prof.summary["int8"]["count"] == vulnerability_profile(
            TensorMap({"w": ckpt["w"]}), ["int8"]).summary["int8"]["count"]

    def test_policy_respected(self, rng):
        ckpt = TensorMap({"w": rng.standard_normal((8, 8))})
        assert vulnerability_profile(ckpt, ["int8"]).tensors[0].quantizable is False
        assert vulnerability_profile(ckpt, ["int8"], QuantizablePolicy(min_dim=4)).tensors[0].quantizable

    def test_path_matches_map(self, tmp_path):
        ckpt = synthetic_checkpoint("student_t", 1 << 14, seed=2, cols=128)
        save_checkpoint(ckpt, tmp_path / "c.safetensors")
        a = vulnerability_profile(ckpt, ["int8", "nf4"]).to_dict()
        b = vulnerability_profile(tmp_path / "c.safetensors", ["int8", "nf4"]).to_dict()
        assert a == b

    def test_gaussian_tail_mass(self):
        prof = vulnerability_profile(synthetic_checkpoint("gaussian", 1 << 18, seed=0, cols=512))
        assert prof.tail_mass == pytest.approx(1e-3, abs=3e-4)

    def test_output_formats(self, tmp_path, rng):
        prof = vulnerability_profile(TensorMap({"w": rng.standard_normal((16, 16))}), ["int8"],
                                     QuantizablePolicy(min_dim=4))
        write_json(prof, tmp_path / "p.json")
        assert json.loads((tmp_path / "p.json").read_text())["methods"] == ["int8"]
        rows = list(csv.reader(io.StringIO(prof.to_csv())))
        assert rows[1][:2] == ["w", "int8"]


class TestSynthetic:
    @pytest.mark.parametrize("kind", ["gaussian", "student_t"])
    def test_size_and_variance(self, kind):
        ckpt = synthetic_checkpoint(kind, 1 << 18, seed=1, cols=512)
        flat = np.concatenate([v.ravel() for v in ckpt.values()])
        assert flat.size == 1 << 18
        assert flat.std() == pytest.approx(0.02, rel=0.1)

    def test_student_t_heavier(self):
        g = vulnerability_profile(synthetic_checkpoint("gaussian", 1 << 16, seed=0, cols=256))
        t = vulnerability_profile(synthetic_checkpoint("student_t", 1 << 16, seed=0, cols=256))
        assert t.tail_mass > 3 * g.tail_mass

    def test_ratios(self):
        g = vulnerability_profile(synthetic_checkpoint("gaussian", 1 << 16, seed=0, cols=256), ["int8"])
        t = vulnerability_profile(synthetic_checkpoint("student_t", 1 << 16, seed=0, cols=256), ["int8"])
        assert width_ratios(t, g)["int8"] == pytest.approx(t.mean_width("int8") / g.mean_width("int8"))

    @pytest.mark.parametrize("kw", [dict(kind="cauchy"), dict(kind="student_t", df=2)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            synthetic_checkpoint(n_params=1024, cols=32, **kw)
