import numpy as np
import pytest

from hlstm.checkpoint import CheckpointError, dumps, load_model, loads, save_model
from hlstm.config import ConfigError, RunConfig, load_config, parse_overrides
from hlstm.data import Utterance, read_dataset, write_dataset

from conftest import make_model


def test_checkpoint_round_trip_is_byte_stable(tmp_path):
    model = make_model(bidirectional=True, kinds=("lstm", "highway"))
    blob = dumps(model, {"stage": "x", "lr": 0.1})
    back, meta = loads(blob)
    assert meta == {"stage": "x", "lr": 0.1}
    assert back.spec == model.spec
    assert back.checksum() == model.checksum()
    assert dumps(back, meta) == blob
    save_model(tmp_path / "m.ckpt", model)
    assert load_model(tmp_path / "m.ckpt")[0].checksum() == model.checksum()


def test_checkpoint_rejects_garbage():
    with pytest.raises(CheckpointError):
        loads(b"not a checkpoint at all")
    blob = bytearray(dumps(make_model()))
    blob[8] = 99
    with pytest.raises(CheckpointError):
        loads(bytes(blob))


def test_dataset_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    utts = [Utterance(rng.normal(size=(T, 3)), rng.integers(0, 4, T), k) for k, T in enumerate([5, 1, 9])]
    write_dataset(tmp_path / "d.bin", utts, {"n_classes": 4})
    back, header = read_dataset(tmp_path / "d.bin")
    assert header["n_classes"] == 4
    for a, b in zip(utts, back):
        assert a.uid == b.uid
        assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.n_c, cfg.n_r, cfg.n_l) == (22, 21, 22)
    assert cfg.seq_lr == 2e-6 and cfg.kappa == 0.2
    assert (cfg.dropout_early, cfg.dropout_late, cfg.dropout_switch_epoch) == (0.1, 0.8, 5)
    assert (cfg.forget_bias, cfg.carry_bias) == (1.0, 0.0)


def test_config_file_overrides_flags(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[run]\nmode = lc-blstm\ncell_dim = 8\nhighway = true\nn_layers = 3\n")
    cfg = load_config(path, mode="uni", lr=0.3)
    assert cfg.mode == "lc-blstm" and cfg.lr == 0.3 and cfg.cell_dims() == [8, 8, 8]
    spec = cfg.stack_spec(4, 5)
    assert [layer.kind for layer in spec.layers] == ["lstm", "highway", "highway"]
    assert spec.bidirectional


@pytest.mark.parametrize("bad", [
    {"mode": "sideways"}, {"n_layers": 0}, {"highway": True, "n_layers": 1},
    {"highway": True, "n_layers": 2, "cell_dim": (4, 6)}, {"dropout_late": 1.5}, {"lr": -1.0},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        RunConfig(**bad)


def test_config_parsing_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_overrides({"no_such_key": "1"})
    with pytest.raises(ConfigError):
        parse_overrides({"n_layers": "two"})
    (tmp_path / "a.ini").write_text("[other]\nx = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "b.ini")


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("HLSTM_SEED", "77")
    assert RunConfig().seed == 77


@pytest.mark.parametrize("name", ["bidi_k2", "deep8", "reference_lstmp", "reference_blstmp"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    cfg = load_config(Path(__file__).parent.parent / "configs" / f"{name}.ini")
    spec = cfg.stack_spec(cfg.feature_dim, cfg.alphabet)
    assert len(spec.layers) == cfg.n_layers
