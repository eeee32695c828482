import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from refavs.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from refavs.grpo import TELEMETRY_COLUMNS
from refavs.model import load_checkpoint
from refavs.pipeline import DEFAULT_STEPS, RunConfig, UsageError, load_run_config, read_curves

TINY_INI = """\
[data]
n_train = 8
n_val = 2
n_test_seen = 3
n_test_unseen = 3

[run]
batch_size = 2
grad_accum = 1
save_every = 1

[grpo]
G = 2
max_len = 64

[model]
d = 8
n_heads = 2
n_layers = 1
n_enc_layers = 1
mlp_mult = 2
mask_hidden = 4
max_len = 64
"""


def _header(path):
    with open(path) as f:
        return next(csv.reader(f))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    ini = root / "tiny.ini"
    ini.write_text(TINY_INI)
    c = ["--config", str(ini), "--seed", "1"]
    data = str(root / "data")
    codes = {
        "gen": run(["gen-data", *c, "--out", data]),
        "teacher": run(["train-teacher", *c, "--data", data, "--steps", "3", "--out", str(root / "teacher")]),
        "sft": run(["train-sft", *c, "--data", data, "--steps", "3", "--teacher", str(root / "teacher/checkpoint"),
                    "--out", str(root / "sft")]),
        "nodis": run(["train-sft", *c, "--data", data, "--steps", "2", "--no-distill",
                      "--teacher", str(root / "teacher/checkpoint"), "--out", str(root / "nodis")]),
        "corpus": run(["build-reflective", *c, "--data", data, "--checkpoint", str(root / "sft/checkpoint"),
                       "--out", str(root / "corpus")]),
        "reflective": run(["train-reflective", *c, "--data", data, "--steps", "2",
                           "--checkpoint", str(root / "sft/checkpoint"), "--corpus", str(root / "corpus"),
                           "--out", str(root / "reflective")]),
        "grpo": run(["train-grpo", *c, "--data", data, "--steps", "2",
                     "--checkpoint", str(root / "reflective/checkpoint"), "--out", str(root / "grpo")]),
        "eval": run(["eval", "--checkpoint", str(root / "grpo/checkpoint"), "--data", data,
                     "--out", str(root / "eval")]),
        "report": run(["report", str(root / "grpo")]),
    }
    return root, codes


def test_all_verbs_succeed(tiny_run):
    _, codes = tiny_run
    assert codes == {k: EXIT_OK for k in codes}


def test_stage_curve_contracts(tiny_run):
    root, _ = tiny_run
    assert _header(root / "teacher/curves.csv") == ["step", "loss_total", "ce", "bce", "dice"]
    assert _header(root / "sft/curves.csv") == ["step", "loss_total", "ce", "bce", "dice", "dis"]
    assert "dis" not in _header(root / "nodis/curves.csv")
    assert _header(root / "reflective/curves.csv") == ["step", "loss_total", "ce", "bce", "dice"]
    assert tuple(_header(root / "grpo/curves.csv")) == TELEMETRY_COLUMNS
    c = read_curves(root / "grpo/curves.csv")
    np.testing.assert_allclose(c["reward_all"], c["reward_format"] + c["reward_iou"] + c["reward_class"],
                               atol=1e-12)
    s = read_curves(root / "sft/curves.csv")
    np.testing.assert_allclose(s["loss_total"], s["ce"] + s["bce"] + s["dice"] + s["dis"], rtol=1e-6)


def test_frozen_decoder_and_provenance(tiny_run):
    root, _ = tiny_run
    teacher, tman = load_checkpoint(root / "teacher/checkpoint")
    chain = [tman]
    for stage in ("sft", "reflective", "grpo"):
        policy, man = load_checkpoint(root / stage / "checkpoint")
        assert policy.role_tag == "student" and "mask_decoder" in policy.frozen
        for k, v in teacher.mask_decoder.state_dict().items():
            assert torch.equal(v, policy.mask_decoder.state_dict()[k])
        chain.append(man)
    for parent, child in zip(chain, chain[1:]):
        assert child["provenance"]["parent"] == parent["params_sha256"]
    cman = json.loads((root / "corpus/manifest.json").read_text())
    assert cman["provenance"]["stage1_params_sha256"] == chain[1]["params_sha256"]


def test_run_records_and_outputs(tiny_run):
    root, _ = tiny_run
    for stage in ("teacher", "sft", "reflective", "grpo"):
        rec = json.loads((root / stage / "run.json").read_text())
        for path in rec["checkpoints"] + [rec["curves"], rec["metrics"]]:
            assert Path(path).exists()
        assert load_run_config(root / stage / "config.ini").stage == stage
    assert len(json.loads((root / "grpo/run.json").read_text())["checkpoints"]) == 2
    for png in ("rewards.png", "reasoning_length.png", "intra_group_std.png", "losses.png"):
        assert (root / "grpo" / png).exists()
    assert (root / "eval/metrics_splits.csv").exists()
    with open(root / "eval/metrics_splits.csv") as f:
        splits = {r["split"]: r for r in csv.DictReader(f)}
    assert float(splits["mix"]["J"]) == pytest.approx((float(splits["test_seen"]["J"])
                                                       + float(splits["test_unseen"]["J"])) / 2)


def test_teacher_report_has_losses_only(tiny_run):
    root, _ = tiny_run
    assert run(["report", str(root / "teacher")]) == EXIT_OK
    assert (root / "teacher/losses.png").exists()
    assert not (root / "teacher/rewards.png").exists()


def test_eval_deterministic(tiny_run):
    root, _ = tiny_run
    args = ["eval", "--checkpoint", str(root / "sft/checkpoint"), "--data", str(root / "data")]
    assert run(args + ["--out", str(root / "e1")]) == EXIT_OK
    assert run(args + ["--out", str(root / "e2")]) == EXIT_OK
    for name in ("metrics_splits.csv", "metrics_samples.csv"):
        assert (root / "e1" / name).read_bytes() == (root / "e2" / name).read_bytes()


def test_usage_errors_exit_2(tiny_run, tmp_path):
    root, _ = tiny_run
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["gen-data", "--out", str(blocker / "sub")]) == EXIT_USAGE
    assert run(["train-teacher", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "t")]) == EXIT_USAGE
    assert run(["report", str(tmp_path)]) == EXIT_USAGE
    assert run(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(root / "data")]) == EXIT_USAGE
    assert run(["train-sft", "--data", str(root / "data"), "--teacher", str(root / "sft/checkpoint"),
                "--out", str(tmp_path / "s")]) == EXIT_USAGE
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nnot_a_key = 1\n")
    assert run(["train-teacher", "--config", str(bad), "--data", str(root / "data")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as e:
        run(["no-such-verb"])
    assert e.value.code == 2


def test_runtime_failure_exit_3(tiny_run, tmp_path):
    root, _ = tiny_run
    ck = tmp_path / "ck"
    ck.mkdir()
    (ck / "manifest.json").write_text(json.dumps({"format_version": 99}))
    (ck / "params.txt").write_text("")
    assert run(["eval", "--checkpoint", str(ck), "--data", str(root / "data"),
                "--out", str(tmp_path / "e")]) == EXIT_RUNTIME


def test_module_entry_point_help():
    out = subprocess.run([sys.executable, "-m", "refavs", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for verb in ("gen-data", "train-teacher", "train-sft", "build-reflective", "train-reflective",
                 "train-grpo", "eval", "report"):
        assert verb in out.stdout


def test_run_config_defaults_and_ini_round_trip(tmp_path):
    assert RunConfig(stage="teacher").steps == 2 * DEFAULT_STEPS["sft"]
    assert DEFAULT_STEPS == {"teacher": 1440, "sft": 720, "reflective": 300, "grpo": 500}
    cfg = RunConfig(stage="grpo", batch_size=3)
    assert (cfg.batch_size, cfg.grad_accum, cfg.grpo.G) == (3, 4, 3)
    path = tmp_path / "c.ini"
    path.write_text(cfg.to_ini())
    assert load_run_config(path) == cfg
    for bad in ({"stage": "nope"}, {"steps": 0}, {"batch_size": 0}):
        with pytest.raises(UsageError):
            RunConfig(**bad)
