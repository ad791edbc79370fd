import json

import numpy as np
import pytest

from hlstm import checkpoint
from hlstm.cli import main

TINY = ["--n-layers", "2", "--cell-dim", "6", "--proj-dim", "4", "--n-streams", "3", "--segment-len", "7",
        "--n-c", "5", "--n-r", "3", "--n-l", "4", "--init-scale", "0.5", "--lr", "0.3"]
DATA = ["--n-train", "6", "--n-valid", "2", "--n-test", "3", "--min-len", "8", "--max-len", "14", "--alphabet", "3",
        "--feature-dim", "4"]


def records(path):
    return [json.loads(line) for line in open(path)]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(out), "--seed", "5", *DATA, "--metrics", str(out / "m.jsonl")]) == 0
    return out


def run(tmp_path, name, *argv):
    metrics = tmp_path / f"{name}.jsonl"
    code = main([*argv, "--metrics", str(metrics)])
    return code, records(metrics)


def test_synth_is_byte_identical(tmp_path, data_dir):
    assert main(["synth", "--out", str(tmp_path), "--seed", "5", *DATA, "--metrics", str(tmp_path / "m.jsonl")]) == 0
    for name in ("train.bin", "valid.bin", "test.bin", "graph.txt"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


@pytest.mark.parametrize("mode", ["uni", "lc-blstm", "csc", "blstm-full"])
def test_train_is_deterministic(tmp_path, data_dir, mode):
    outs = []
    for k in range(2):
        ckpt = tmp_path / f"m{k}.ckpt"
        code, _ = run(tmp_path, f"t{k}", "train", "--data", str(data_dir), "--out", str(ckpt), "--mode", mode,
                      "--epochs", "2", "--highway", "true", "--seed", "11", *TINY)
        assert code == 0
        outs.append(((tmp_path / f"t{k}.jsonl").read_bytes(), ckpt.read_bytes()))
    assert outs[0] == outs[1]
    recs = records(tmp_path / "t0.jsonl")
    assert [r["event"] for r in recs] == ["epoch", "epoch", "eval", "checkpoint"]


def test_seqtrain_and_eval(tmp_path, data_dir):
    ckpt = tmp_path / "ce.ckpt"
    assert run(tmp_path, "ce", "train", "--data", str(data_dir), "--out", str(ckpt), "--mode", "lc-blstm",
               "--epochs", "2", *TINY)[0] == 0
    blobs = []
    for k in range(2):
        out = tmp_path / f"seq{k}.ckpt"
        code, recs = run(tmp_path, f"s{k}", "seqtrain", "--data", str(data_dir), "--checkpoint", str(ckpt),
                         "--out", str(out), "--mode", "lc-blstm", "--seq-lr", "1e-3", "--pool-capacity", "4", *TINY)
        assert code == 0
        blobs.append(((tmp_path / f"s{k}.jsonl").read_bytes(), out.read_bytes()))
    assert blobs[0] == blobs[1]
    assert [r["when"] for r in recs if r["event"] == "expected_accuracy"] == ["before", "after"]
    assert sum(r["event"] == "cycle" for r in recs) == 2
    code, recs = run(tmp_path, "ev", "eval", "--data", str(data_dir), "--checkpoint", str(tmp_path / "seq0.ckpt"),
                     "--mode", "lc-blstm", *TINY)
    assert code == 0 and recs[0]["event"] == "eval" and recs[0]["frames"] > 0


def test_eval_without_checkpoint_is_chance(tmp_path, data_dir):
    code, recs = run(tmp_path, "ev", "eval", "--data", str(data_dir), *TINY)
    assert code == 0
    assert recs[0]["frame_accuracy"] == pytest.approx(1 / 3, abs=1e-12)


def test_chunkcmp_unidirectional(tmp_path):
    code, recs = run(tmp_path, "cc", "chunkcmp", "--mode", "uni", *TINY, "--feature-dim", "4")
    assert code == 0
    rec = recs[0]
    assert rec["ratio_ok"] and rec["divergence"]["lc"] <= 1e-10
    assert rec["saving"] == "1/3"  # 4 / (4 + 5 + 3)


def test_chunkcmp_bidirectional(tmp_path):
    code, recs = run(tmp_path, "cc", "chunkcmp", "--mode", "lc-blstm", "--n-c", "22", "--n-r", "21", "--n-l", "22")
    assert code == 0
    assert recs[0]["saving"] == "22/65" and recs[0]["divergence"]["lc_full_lookahead"] <= 1e-10


@pytest.mark.slow
def test_gradcheck_succeeds(tmp_path):
    code, recs = run(tmp_path, "gc", "gradcheck")
    assert code == 0
    summary = recs[-1]
    assert summary["event"] == "gradcheck_summary" and summary["max_rel_error"] <= 1e-4
    assert len([r for r in recs if r["event"] == "gradcheck"]) == 9


def test_bad_configuration_exits_2(tmp_path, data_dir):
    code, recs = run(tmp_path, "bad", "train", "--data", str(data_dir), "--mode", "sideways")
    assert code == 2 and recs[0]["kind"] == "ConfigError"
    code, _ = run(tmp_path, "bad2", "train", "--data", str(data_dir), "--highway", "true", "--n-layers", "2",
                  "--cell-dim", "4,6")
    assert code == 2
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nn_layers = zero\n")
    assert run(tmp_path, "bad3", "eval", "--data", str(data_dir), "--config", str(ini))[0] == 2
    assert run(tmp_path, "bad4", "eval", "--data", str(tmp_path / "nowhere"))[0] == 2


def test_checkpoint_mode_mismatch_exits_2(tmp_path, data_dir):
    ckpt = tmp_path / "u.ckpt"
    assert run(tmp_path, "u", "train", "--data", str(data_dir), "--out", str(ckpt), "--epochs", "1", *TINY)[0] == 0
    code, recs = run(tmp_path, "mm", "eval", "--data", str(data_dir), "--checkpoint", str(ckpt), "--mode", "csc")
    assert code == 2


def test_divergence_exits_1(tmp_path, data_dir):
    ckpt = tmp_path / "u.ckpt"
    assert run(tmp_path, "u", "train", "--data", str(data_dir), "--out", str(ckpt), "--epochs", "1", *TINY)[0] == 0
    model, meta = checkpoint.load_model(ckpt)
    model.W_out[:] = np.nan
    checkpoint.save_model(ckpt, model, meta)
    code, recs = run(tmp_path, "nan", "train", "--data", str(data_dir), "--checkpoint", str(ckpt), *TINY)
    assert code == 1 and recs[-1]["kind"] == "TrainingDiverged"


def test_config_file_overrides_flag(tmp_path, data_dir):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nepochs = 1\n")
    code, recs = run(tmp_path, "c", "train", "--data", str(data_dir), "--epochs", "3", "--config", str(ini), *TINY)
    assert code == 0 and sum(r["event"] == "epoch" for r in recs) == 1
