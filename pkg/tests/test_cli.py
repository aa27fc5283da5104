import csv
import json

import numpy as np
import pytest

from taac import __version__
from taac.cli import main
from taac.encryptor import SecretKey, write_key
from taac.nn_core import load_checkpoint
from taac.signal_prep import write_wav
from taac.synthdata import read_clip, write_clip

COMMON = ["--epochs", "1", "--batch-size", "8", "--lr", "1e-3"]
PAIRS = ["--n-pos", "6", "--n-neg", "6"]


def report(d):
    r = json.loads((d / "report.json").read_text())
    r.pop("timing", None)
    return r


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "corpus"), "--speakers", "10", "--clips", "4"]) == 0
    write_key(d / "key.txt", SecretKey((3, 2, 1)))
    assert main(["train", "--phase", "1", "--corpus", str(d / "corpus"), "--out", str(d / "p1"), *COMMON]) == 0
    assert main(["train", "--phase", "2", "--corpus", str(d / "corpus"), "--from", str(d / "p1/checkpoint.taac"),
                 "--out", str(d / "p2"), *COMMON]) == 0
    return d


def test_gen_data_outputs(work):
    man = json.loads((work / "corpus/manifest.json").read_text())
    assert len(man["clips"]) == 40
    run = json.loads((work / "corpus/run.json").read_text())
    assert run["command"] == "gen-data" and run["version"] == __version__ and "seed" in run


def test_every_run_records_config(work):
    for sub in ("p1", "p2"):
        run = json.loads((work / sub / "run.json").read_text())
        assert set(run) >= {"config", "seed", "version", "command"}
        assert run["config"]["phase"]["epochs"] == 1


def test_phase3_run(work):
    out = work / "p3"
    rc = main(["train", "--phase", "3", "--key", str(work / "key.txt"), "--strength", "10", "--corpus",
               str(work / "corpus"), "--from", str(work / "p2/checkpoint.taac"), "--out", str(out), *COMMON])
    assert rc == 0
    _, meta = load_checkpoint(out / "checkpoint.taac")
    assert meta["phase"] == 3 and meta["config"]["strength"] == 10
    assert json.loads((out / "run.json").read_text())["config"]["encryption"]["strength"] == 10


def test_phase3_without_key_is_usage_error(work):
    rc = main(["train", "--phase", "3", "--strength", "10", "--corpus", str(work / "corpus"),
               "--from", str(work / "p2/checkpoint.taac"), "--out", str(work / "bad"), *COMMON])
    assert rc == 2


def test_phase2_without_checkpoint(work):
    assert main(["train", "--phase", "2", "--corpus", str(work / "corpus"), "--out", str(work / "bad")]) == 2


def test_encrypt_strength_one_is_identity(work, rng):
    a = work / "a.f32"
    write_clip(a, rng.uniform(-1, 1, 2000))
    assert main(["encrypt", "--in", str(a), "--key", str(work / "key.txt"), "--strength", "1",
                 "--out", str(work / "b.f32")]) == 0
    assert (work / "b.f32").read_bytes() == a.read_bytes()
    side = json.loads((work / "b.f32.json").read_text())
    assert side["strength"] == 1 and side["key_fingerprint"] == 10 and side["version"] == __version__


def test_encrypt_decrypt_round_trip(work, rng):
    a = work / "c.f32"
    write_clip(a, rng.uniform(-1, 1, 2000))
    k = str(work / "key.txt")
    assert main(["encrypt", "--in", str(a), "--key", k, "--strength", "25", "--out", str(work / "c.enc")]) == 0
    assert main(["decrypt", "--in", str(work / "c.enc"), "--key", k, "--strength", "25",
                 "--out", str(work / "c.dec")]) == 0
    np.testing.assert_allclose(read_clip(work / "c.dec"), read_clip(a), atol=1e-5)


def test_classify(work):
    out = work / "cl"
    assert main(["classify", "--checkpoint", str(work / "p2/checkpoint.taac"), "--corpus", str(work / "corpus"),
                 "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "decisions.csv")))
    assert rows[0] == ["clip_id", "score", "label"] and len(rows) == 41
    for _, s, lab in rows[1:]:
        assert int(lab) == int(float(s) > 0.4)


def test_eval_detection(work):
    out = work / "det"
    assert main(["eval", "--task", "detection", "--checkpoint", str(work / "p2/checkpoint.taac"),
                 "--corpus", str(work / "corpus"), "--out", str(out)]) == 0
    r = report(out)
    assert set(r) >= {"accuracy", "precision", "recall", "f1", "sweep"}
    assert sorted(p.name for p in out.glob("confusion_*.csv")) == [
        "confusion_0.3.csv", "confusion_0.4.csv", "confusion_0.5.csv", "confusion_0.6.csv"]


def test_eval_linkage_schema(work):
    out = work / "link"
    assert main(["eval", "--task", "linkage", "--strength", "25", "--key", str(work / "key.txt"),
                 "--corpus", str(work / "corpus"), "--out", str(out), *PAIRS]) == 0
    r = report(out)
    assert set(r) >= {"ACC", "FAR", "FRR", "EER"} and r["strength"] == 25
    assert (out / "pair_scores.csv").exists()


def test_eval_reports_reproducible(work):
    args = ["eval", "--task", "linkage", "--checkpoint", str(work / "p2/checkpoint.taac"), "--strength", "10",
            "--corpus", str(work / "corpus"), *PAIRS]
    assert main(args + ["--out", str(work / "r1")]) == 0
    assert main(args + ["--out", str(work / "r2")]) == 0
    assert report(work / "r1") == report(work / "r2")


def test_eval_recon(work):
    out = work / "rec"
    assert main(["eval", "--task", "recon", "--strength", "25", "--key", str(work / "key.txt"),
                 "--checkpoint", str(work / "p1/checkpoint.taac"), "--corpus", str(work / "corpus"),
                 "--out", str(out)]) == 0
    r = report(out)
    assert r["encrypted"]["MSE"] > 1 and r["encrypted"]["PSNR"] < 0
    assert "relative_error" in r["autoencoder"]


def test_train_reproducible(work):
    for sub in ("q1", "q2"):
        assert main(["train", "--phase", "1", "--corpus", str(work / "corpus"), "--out", str(work / sub),
                     *COMMON]) == 0
    assert report(work / "q1")["final"] == report(work / "q2")["final"]
    assert (work / "q1/checkpoint.taac").read_bytes() == (work / "q2/checkpoint.taac").read_bytes()


def test_config_file_and_flag_override(work, monkeypatch):
    cfg = work / "run.cfg"
    cfg.write_text("[phase]\nepochs = 4\nbatch_size = 8\n[optimizer]\nlr = 0.002\n")
    monkeypatch.setenv("TAAC_SEED", "5")
    assert main(["train", "--phase", "1", "--config", str(cfg), "--epochs", "1", "--corpus", str(work / "corpus"),
                 "--out", str(work / "cf")]) == 0
    run = json.loads((work / "cf/run.json").read_text())
    assert run["config"]["phase"]["epochs"] == 1
    assert run["config"]["optimizer"]["lr"] == 0.002
    assert run["seed"] == 5


def test_preprocess(tmp_path, rng):
    wav = tmp_path / "rec.wav"
    write_wav(wav, rng.uniform(-0.5, 0.5, 16000 * 6), 16000)
    (tmp_path / "ann.csv").write_text("t0,t1,tag\n0,2.5,P\n2.5,3,E\n3,6,P\n")
    out = tmp_path / "clips"
    assert main(["preprocess", "--in", str(wav), "--annotations", str(tmp_path / "ann.csv"), "--tag", "P",
                 "--target", "2", "--out", str(out)]) == 0
    files = sorted(out.glob("clip_*.f32"))
    assert files and all(len(read_clip(f)) == 2000 for f in files)
    assert np.abs(read_clip(files[0])).max() <= 1


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--points", "1", "--out", str(tmp_path / "g")]) == 0
    r = report(tmp_path / "g")
    assert r["failed"] == [] and set(r["max_relative_error"]) >= {"fc", "classifier", "sdae"}


@pytest.mark.parametrize("argv", [["frobnicate"], ["eval", "--task", "linkage", "--out", "x", "--bogus"], []])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_runtime_error_exit_1(tmp_path):
    assert main(["classify", "--checkpoint", str(tmp_path / "missing.taac"), "--out", str(tmp_path / "o"),
                 "--in", str(tmp_path / "x.f32")]) == 1


def test_missing_config_exit_1(tmp_path, capsys):
    assert main(["gradcheck", "--config", str(tmp_path / "none.cfg")]) == 1
    assert "none.cfg" in capsys.readouterr().err
