import json

import numpy as np
import pytest

from quantlock.attack_pipeline import AttackConfig
from quantlock.cli import EXIT_IO, EXIT_NOT_PRESERVED, EXIT_OK, EXIT_USAGE, bundled, main
from quantlock.constraints import compute_intervals, read_qcon
from quantlock.nn_lab import ToyModel
from quantlock.tensor_store import TensorMap, load_checkpoint, save_checkpoint


@pytest.fixture
def ckpt(tmp_path, rng):
    path = tmp_path / "model.safetensors"
    save_checkpoint(TensorMap({"a.weight": rng.standard_normal((32, 48)) * 0.1,
                               "a.bias": rng.standard_normal(32)}), path)
    return path


def run_json(capsys, *argv):
    code = main(["--json", *map(str, argv)])
    return code, json.loads(capsys.readouterr().out)


class TestQuantize:
    @pytest.mark.parametrize("method", ["int8", "fp4", "nf4"])
    @pytest.mark.parametrize("dq", [[], ["--double-quant"]])
    def test_requantize_is_byte_identical(self, tmp_path, ckpt, method, dq, capsys):
        q1, d, q2 = tmp_path / "1.qten", tmp_path / "d.safetensors", tmp_path / "2.qten"
        assert main(["quantize", "--in", str(ckpt), "--method", method, "--out", str(q1), *dq]) == EXIT_OK
        assert main(["dequantize", "--in", str(q1), "--out", str(d)]) == EXIT_OK
        assert main(["quantize", "--in", str(d), "--method", method, "--out", str(q2), *dq]) == EXIT_OK
        assert q1.read_bytes() == q2.read_bytes()

    def test_int8_block_size_is_usage_error(self, tmp_path, ckpt):
        with pytest.raises(SystemExit) as e:
            main(["quantize", "--in", str(ckpt), "--method", "int8", "--block-size", "32", "--out", str(tmp_path / "x")])
        assert e.value.code == EXIT_USAGE

    def test_unknown_method(self, tmp_path, ckpt):
        with pytest.raises(SystemExit) as e:
            main(["quantize", "--in", str(ckpt), "--method", "int4", "--out", str(tmp_path / "x")])
        assert e.value.code == EXIT_USAGE

    def test_missing_input(self, tmp_path, capsys):
        assert main(["quantize", "--in", str(tmp_path / "nope"), "--method", "nf4",
                     "--out", str(tmp_path / "x")]) == EXIT_IO
        assert "error" in capsys.readouterr().err

    def test_json_is_single_document(self, tmp_path, ckpt, capsys):
        code, doc = run_json(capsys, "quantize", "--in", ckpt, "--method", "nf4", "--block-size", 32,
                             "--out", tmp_path / "q.qten")
        assert code == EXIT_OK and doc["command"] == "quantize"
        assert doc["config"]["block_size"] == 32 and doc["config"]["method"] == "nf4"
        assert doc["tensors"]["a.weight"]["blocks"] == 32 * 48 // 32
        assert "a.bias" not in doc["tensors"]

    def test_global_flags_after_subcommand(self, tmp_path, ckpt, capsys):
        code = main(["quantize", "--in", str(ckpt), "--method", "nf4", "--out", str(tmp_path / "q"), "--json"])
        assert code == EXIT_OK and json.loads(capsys.readouterr().out)["command"] == "quantize"

    def test_exclude_keeps_full_precision(self, tmp_path, ckpt, capsys):
        _, doc = run_json(capsys, "quantize", "--in", ckpt, "--method", "int8", "--exclude", "a.weight",
                          "--out", tmp_path / "q")
        assert doc["tensors"] == {}


class TestConstraintsVerify:
    def test_constraints_file(self, tmp_path, ckpt, capsys):
        out = tmp_path / "c.qcon"
        code, doc = run_json(capsys, "constraints", "--in", ckpt, "--methods", "int8,nf4", "--out", out)
        assert code == EXIT_OK and doc["parameters"] == 32 * 48 + 32
        sets = read_qcon(out)
        w = load_checkpoint(ckpt)["a.weight"]
        assert np.all(sets["a.weight"].contains(w)) and sets["a.bias"].frozen.all()
        assert doc["width_stats"]["count"] == int((~sets["a.weight"].frozen).sum())

    def test_verify_preserved_and_broken(self, tmp_path, ckpt, capsys):
        w = load_checkpoint(ckpt)
        s = compute_intervals(w["a.weight"], "int8")
        inside = tmp_path / "in.safetensors"
        save_checkpoint(w.replace({"a.weight": s.hi}), inside)
        assert main(["verify", "--reference", str(ckpt), "--candidate", str(inside), "--method", "int8"]) == EXIT_OK

        r, c = np.argwhere(~s.frozen)[0]
        bad = w["a.weight"].copy()
        bad[r, c] = np.nextafter(s.hi[r, c], np.float32(np.inf))
        outside = tmp_path / "out.safetensors"
        save_checkpoint(w.replace({"a.weight": bad}), outside)
        capsys.readouterr()
        code, doc = run_json(capsys, "verify", "--reference", ckpt, "--candidate", outside, "--method", "int8")
        assert code == EXIT_NOT_PRESERVED
        m = doc["report"]["first_mismatches"][0]
        assert (m["tensor"], m["block"], m["element"]) == ("a.weight", r, c)


SMALL = dict(n_clean=600, n_poison=150, n_test_clean=300, n_test_poison=150, inject_epochs=4, repair_epochs=4)


class TestAttackDefend:
    @pytest.fixture
    def config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(AttackConfig(**SMALL).to_dict()))
        return path

    def test_attack_then_defend(self, tmp_path, config, capsys):
        snaps = tmp_path / "snaps"
        code, doc = run_json(capsys, "attack-demo", "--config", config, "--snapshots", snaps,
                             "--report", tmp_path / "r.json")
        assert code == EXIT_OK and all(doc["report"]["preservation"].values())
        assert json.loads((tmp_path / "r.json").read_text())["metrics"] == doc["report"]["metrics"]

        code, dd = run_json(capsys, "defend", "--model", snaps / "repaired.safetensors", "--config", config,
                            "--sigma-list", "0", "--csv", tmp_path / "d.csv")
        assert code == EXIT_OK
        assert dd["report"]["rows"][0]["metrics"] == dd["report"]["baseline"]
        assert dd["report"]["baseline"]["full"] == doc["report"]["metrics"]["repaired"]["full"]
        assert (tmp_path / "d.csv").read_text().startswith("sigma,")

    def test_seed_override_echoed(self, config, capsys):
        code, doc = run_json(capsys, "--seed", 3, "attack-demo", "--config", config)
        assert code == EXIT_OK and doc["report"]["config"]["seed"] == 3 and doc["config"]["seed"] == 3

    def test_bad_sigma_list(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            main(["defend", "--model", str(tmp_path / "m"), "--sigma-list", "a,b"])
        assert e.value.code == EXIT_USAGE


class TestAnalyze:
    def test_bundled_fixtures(self, capsys):
        code, doc = run_json(capsys, "analyze", "--in", bundled("student_t_64k.safetensors"),
                             "--baseline", bundled("gaussian_64k.safetensors"), "--methods", "int8,fp4,nf4")
        assert code == EXIT_OK
        assert doc["width_ratio"]["int8"] > 1.5
        assert all(r > 1 for r in doc["width_ratio"].values())

    def test_synth_roundtrip(self, tmp_path, capsys):
        out = tmp_path / "s.safetensors"
        assert main(["--seed", "4", "synth", "--kind", "gaussian", "--params", "4096", "--cols", "64",
                     "--out", str(out)]) == EXIT_OK
        assert load_checkpoint(out).num_parameters() == 4096
        capsys.readouterr()
        code, doc = run_json(capsys, "analyze", "--in", out, "--full")
        assert code == EXIT_OK and doc["profile"]["tensors"][0]["name"] == "layers.0.weight"

    def test_threads_must_be_positive(self, ckpt):
        with pytest.raises(SystemExit) as e:
            main(["--threads", "0", "analyze", "--in", str(ckpt)])
        assert e.value.code == EXIT_USAGE
