import json

import numpy as np
import pytest

import acconv.numcore as nc
from acconv import cli
from acconv import convmodel as cm
from acconv import synthdata as sd


def run(*argv):
    return cli.main([str(a) for a in argv])


def micro_config_blob(system="s1", max_steps=6, **train_extra):
    micro = cm.SystemConfig.micro(system).to_dict()
    for k in ("encoder", "attention", "use_mel_ref", "use_phone_ref"):
        micro.pop(k)
    return {"version": 1, "system": system, "model": micro,
            "train": {"max_steps": max_steps, "batch_size": 3, "val_every": 3,
                      "seed": 1, **train_extra}}


@pytest.fixture()
def config_file(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(micro_config_blob()))
    return p


@pytest.fixture()
def corpus_dir(tmp_path):
    out = tmp_path / "corpus"
    assert run("gen", "--seed", 3, "--n", 10, "--min-phones", 2,
               "--max-phones", 4, "--out", out) == 0
    return out


class TestGen:
    def test_writes_corpus_and_manifest(self, tmp_path):
        out = tmp_path / "c"
        assert run("gen", "--seed", 1, "--n", 5, "--out", out) == 0
        lang, utts = sd.import_corpus(out)
        assert len(utts) == 5
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["seed"] == 1

    def test_rerun_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("gen", "--seed", 7, "--n", 4, "--out", out) == 0
        for f in sorted(p.name for p in a.iterdir()):
            if f == "manifest.json":  # timestamps differ by design
                continue
            assert (a / f).read_bytes() == (b / f).read_bytes(), f

    def test_zero_n_is_usage_error(self, tmp_path):
        assert run("gen", "--seed", 1, "--n", 0, "--out", tmp_path / "x") == 1

    def test_nonempty_out_refused_unless_force(self, tmp_path):
        out = tmp_path / "c"
        assert run("gen", "--seed", 1, "--n", 2, "--out", out) == 0
        assert run("gen", "--seed", 1, "--n", 2, "--out", out) == 1
        assert run("gen", "--seed", 1, "--n", 2, "--out", out, "--force") == 0

    def test_missing_required_arg(self):
        assert run("gen", "--seed", 1) == 1


class TestTrain:
    def test_train_and_exit_zero(self, tmp_path, config_file, corpus_dir):
        out = tmp_path / "run"
        assert run("train", "--config", config_file, "--corpus", corpus_dir,
                   "--out", out) == 0
        assert (out / "best" / "params.bundle").exists()
        assert (out / "curve.csv").exists()
        curve = (out / "curve.csv").read_text().splitlines()
        assert all(np.isfinite(float(x)) for row in curve[1:]
                   for x in row.split(",")[1:])

    def test_bad_config_schema(self, tmp_path, corpus_dir):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "system": "s1",
                                   "model": {"bogus_width": 3}}))
        assert run("train", "--config", bad, "--corpus", corpus_dir,
                   "--out", tmp_path / "o") == 2

    def test_missing_corpus(self, tmp_path, config_file):
        assert run("train", "--config", config_file,
                   "--corpus", tmp_path / "nope", "--out", tmp_path / "o") == 2


class TestFinetune:
    def test_finetune_flow_and_mismatch(self, tmp_path, config_file, corpus_dir):
        base = tmp_path / "base"
        assert run("train", "--config", config_file, "--corpus", corpus_dir,
                   "--out", base) == 0
        ft = tmp_path / "ft"
        assert run("finetune", "--config", config_file, "--corpus", corpus_dir,
                   "--from", base / "best", "--out", ft) == 0
        assert (ft / "best" / "params.bundle").exists()

        other = tmp_path / "other.json"
        other.write_text(json.dumps(micro_config_blob(system="s2")))
        assert run("finetune", "--config", other, "--corpus", corpus_dir,
                   "--from", base / "best", "--out", tmp_path / "x") == 2


class TestConvert:
    def make_ckpt(self, tmp_path, system):
        model = cm.ConversionModel(cm.SystemConfig.micro(system), seed=0)
        cm.save_checkpoint(tmp_path / f"ck_{system}", model)
        return tmp_path / f"ck_{system}"

    def ppg_file(self, tmp_path, t=6):
        lang = sd.gen_language(0)
        u = sd.gen_utterance_fixed_len(lang, 5, t * 3)
        p = tmp_path / "in.ppg.tnsr"
        nc.write_tensor(p, u.ppg)
        return p

    def test_convert_writes_outputs(self, tmp_path):
        ck = self.make_ckpt(tmp_path, "s1")
        ppg = self.ppg_file(tmp_path)
        out = tmp_path / "conv"
        assert run("convert", "--checkpoint", ck, "--ppg", ppg, "--out", out) == 0
        mel = nc.read_tensor(out / "mel_after.tnsr")
        assert mel.ndim == 2 and mel.shape[1] == 80
        alpha = nc.read_tensor(out / "alignment.tnsr")
        assert alpha.shape[1] == 6  # decoder steps x encoder steps
        raw = (out / "alignment.pgm").read_bytes()
        assert raw.startswith(b"P5\n6 ")  # width = encoder steps
        assert (out / "stop.tnsr").exists() and (out / "alignment.csv").exists()

    def test_missing_ref_is_usage_error(self, tmp_path):
        ck = self.make_ckpt(tmp_path, "s3")
        ppg = self.ppg_file(tmp_path)
        assert run("convert", "--checkpoint", ck, "--ppg", ppg,
                   "--out", tmp_path / "o") == 1

    def test_s3_with_refs(self, tmp_path):
        ck = self.make_ckpt(tmp_path, "s3")
        ppg = self.ppg_file(tmp_path)
        ref = tmp_path / "ref.tnsr"
        nc.write_tensor(ref, np.random.default_rng(0).standard_normal((18, 80)))
        out = tmp_path / "o"
        assert run("convert", "--checkpoint", ck, "--ppg", ppg, "--ref-mel", ref,
                   "--phones", "0,1,2", "--out", out) == 0
        assert (out / "mel_after.tnsr").exists()

    def test_bad_ppg_width(self, tmp_path):
        ck = self.make_ckpt(tmp_path, "s1")
        bad = tmp_path / "bad.tnsr"
        nc.write_tensor(bad, np.zeros((4, 5)))
        assert run("convert", "--checkpoint", ck, "--ppg", bad,
                   "--out", tmp_path / "o") == 2


class TestGradcheckCommand:
    def test_micro_scale_passes(self, tmp_path, capsys):
        out = tmp_path / "gc"
        assert run("gradcheck", "--scale", "micro", "--out", out) == 0
        text = capsys.readouterr().out
        assert "PASS" in text and "FAIL" not in text
        rows = json.loads((out / "gradcheck.json").read_text())
        assert all(r["passed"] for r in rows)
        comps = {r["component"] for r in rows}
        assert "model.s3.micro" in comps and "primitive.matmul" in comps

    def test_injected_bug_reported_and_exit_3(self, tmp_path, monkeypatch, capsys):
        real_suite = nc.primitive_suite

        def sabotaged(seed=0, threshold=1e-6):
            rows = real_suite(seed=seed, threshold=threshold)
            rows.append(nc.CheckResult("deliberate_bug", 0.5, threshold))
            return rows

        monkeypatch.setattr(cli.nc, "primitive_suite", sabotaged)
        assert run("gradcheck", "--scale", "micro", "--out", tmp_path / "o") == 3
        assert "FAIL" in capsys.readouterr().out


class TestAblateCommand:
    def test_two_arm_report(self, tmp_path, corpus_dir):
        cfgp = tmp_path / "cfg.json"
        cfgp.write_text(json.dumps(micro_config_blob(max_steps=4)))
        out = tmp_path / "ab"
        assert run("ablate", "--systems", "baseline,s1", "--config", cfgp,
                   "--corpus", corpus_dir, "--out", out, "--eval-utts", 1) == 0
        rep = json.loads((out / "report.json").read_text())
        assert set(rep["arms"]) == {"baseline", "s1"}
        for arm in rep["arms"].values():
            assert set(arm["alignment_error"]) == {"1.0", "1.5", "2.0"}
        assert (out / "s1" / "best" / "params.bundle").exists()

    def test_unknown_system_usage_error(self, tmp_path, corpus_dir, config_file):
        assert run("ablate", "--systems", "s1,nope", "--config", config_file,
                   "--corpus", corpus_dir, "--out", tmp_path / "o") == 1


def test_config_parse_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(cli.SchemaError):
        cli.parse_config(p)
    p.write_text(json.dumps({"version": 2, "system": "s1"}))
    with pytest.raises(cli.SchemaError, match="version"):
        cli.parse_config(p)
    p.write_text(json.dumps({"version": 1, "system": "s1",
                             "model": {"attention": "gmm"}}))
    with pytest.raises(cli.SchemaError, match="attention"):
        cli.parse_config(p)
    p.write_text(json.dumps({"version": 1, "system": "s1",
                             "train": {"lr": -1}}))
    with pytest.raises(cli.SchemaError):
        cli.parse_config(p)
