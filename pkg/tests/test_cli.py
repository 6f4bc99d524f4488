import json

import pytest

from tatu import io
from tatu.cli import main

TINY = ["--set", "env.n_transitions=1500", "--set", "dynamics.epochs=2", "--set", "dynamics.hidden=[16,16]",
        "--set", "cvae.epochs=2", "--set", "cvae.hidden=[16]", "--set", "learner.steps=40",
        "--set", "learner.eval_episodes=10", "--set", "learner.log_every=20", "--set", "augment.n_epochs=1",
        "--set", "augment.n_start_states=100", "--set", "learner.td3bc.hidden=[16,16]"]


def run(*argv):
    return main(list(argv))


def test_defaults_prints_reference_settings(capsys):
    assert run("defaults") == 0
    first = capsys.readouterr().out.splitlines()[0]
    assert first == "lambda=1.0 alpha=2.0 h=5 n_total=7 n_elites=5"


def test_pipeline_chain(tmp_path, capsys):
    out = str(tmp_path)
    for cmd in ("gen-dataset", "train-dynamics", "train-cvae", "augment", "train-policy", "evaluate"):
        assert run(cmd, *TINY, "--out", out) == 0, cmd
    for name in ("dataset.jsonl", "dynamics.ckpt", "cvae.ckpt", "buffer.ckpt", "policy.ckpt", "metrics.jsonl",
                 "eval.json", "config.augment.json"):
        assert (tmp_path / name).exists(), name
    buf = io.buffer_from_checkpoint(*io.load_checkpoint(tmp_path / "buffer.ckpt"))
    assert buf.admission_ok()
    ev = io.read_json(tmp_path / "eval.json")
    assert ev["n_episodes"] == 10


def test_tabular_pipeline(tmp_path, capsys):
    out = str(tmp_path)
    base = ["--set", "env.kind=tabular", "--set", "env.n_transitions=2000", "--out", out]
    for cmd in ("gen-dataset", "train-policy", "evaluate"):
        assert run(cmd, *base) == 0
    ev = io.read_json(tmp_path / "eval.json")
    assert abs(ev["mean_discounted"] - ev["exact_return"]) < 0.5


def test_output_root_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("TATU_OUTPUT_ROOT", str(tmp_path / "root"))
    assert run("gen-dataset", "--set", "env.n_transitions=50") == 0
    assert (tmp_path / "root" / "dataset.jsonl").exists()


def test_missing_artifact_exit_code(tmp_path, capsys):
    assert run("train-dynamics", "--out", str(tmp_path)) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing_file"


def test_bad_override_exit_code(tmp_path, capsys):
    assert run("defaults", "--set", "truncation.alpha=0.5", "--out", str(tmp_path)) == 2
    assert run("defaults", "--set", "nonsense", "--out", str(tmp_path)) == 2


def test_corrupt_checkpoint_exit_code(tmp_path, capsys):
    out = str(tmp_path)
    assert run("gen-dataset", *TINY, "--out", out) == 0
    assert run("train-cvae", *TINY, "--out", out) == 0
    assert run("train-dynamics", *TINY, "--out", out) == 0
    blob = bytearray((tmp_path / "cvae.ckpt").read_bytes())
    blob[40] ^= 0xFF
    (tmp_path / "cvae.ckpt").write_bytes(bytes(blob))
    assert run("augment", *TINY, "--out", out) == 5


def test_verify_bounds_all_pass(tmp_path, capsys):
    assert run("verify-bounds", "--instances", "100", "--seed", "0", "--no-corollaries", "--out", str(tmp_path)) == 0
    rep = io.read_json(tmp_path / "bounds_report.json")
    assert rep["n_instances"] == 100 and all(v == 100 for v in rep["passing"].values())


def test_sweep_alpha_non_increasing(tmp_path, capsys):
    assert run("sweep", "--param", "alpha", "--grid", "1,2,3,4,5", "--no-train", *TINY, "--out", str(tmp_path)) == 0
    rows = io.read_json(tmp_path / "sweep_alpha.json")
    sizes = [r["buffer_size"] for r in rows]
    assert [r["value"] for r in rows] == [1, 2, 3, 4, 5]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))


def test_unknown_sweep_param(tmp_path, capsys):
    assert run("sweep", "--param", "lambda", "--out", str(tmp_path)) == 2


def test_defaults_creates_no_output_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("TATU_OUTPUT_ROOT", raising=False)
    assert run("defaults") == 0
    assert list(tmp_path.iterdir()) == []
