import filecmp

import numpy as np
import pytest

from hlstm import synth, trainer
from hlstm.config import RunConfig
from hlstm.network import Model
from hlstm.seqtrain import read_graph
from hlstm.tensor import RngStream


def test_shift_and_max_rules():
    task = synth.SyntheticTask.from_config(RunConfig(alphabet=5, context=2))
    h = np.array([0, 3, 1, 4, 2, 2])
    assert task.labels(h).tolist() == [1, 4, 2, 2, 2, 2]
    task.rule = "max"
    assert task.labels(h).tolist() == [3, 4, 4, 4, 4, 4]
    task.context = 0
    assert np.array_equal(task.labels(h), h)


def test_generation_is_reproducible_and_sized():
    cfg = RunConfig(n_train=5, n_valid=2, n_test=3, min_len=4, max_len=9, seed=8)
    a, b = synth.generate(cfg), synth.generate(cfg)
    assert [len(a[s]) for s in synth.SPLITS] == [5, 2, 3]
    uids = [u.uid for s in synth.SPLITS for u in a[s]]
    assert uids == list(range(10))
    for s in synth.SPLITS:
        for u, v in zip(a[s], b[s]):
            assert np.array_equal(u.features, v.features) and np.array_equal(u.labels, v.labels)
            assert 4 <= len(u) <= 9 and u.features.shape[1] == cfg.feature_dim
    other = synth.generate(cfg, seed=9)["train"][0]
    assert not np.array_equal(other.features[:4], a["train"][0].features[:4])


def test_synth_files_byte_identical(tmp_path):
    cfg = RunConfig(n_train=4, n_valid=2, n_test=2, min_len=5, max_len=8)
    synth.synth(cfg, tmp_path / "a", seed=4)
    synth.synth(cfg, tmp_path / "b", seed=4)
    for name in ("train.bin", "valid.bin", "test.bin", "graph.txt"):
        assert filecmp.cmp(tmp_path / "a" / name, tmp_path / "b" / name, shallow=False)
    graph = read_graph(tmp_path / "a" / "graph.txt")
    assert sorted(graph.numerators) == list(range(8))


def test_labels_follow_clean_hidden_sequence():
    cfg = RunConfig(noise=0.0, context=1, rule="max", n_train=3, n_valid=0, n_test=0, seed=2)
    task = synth.SyntheticTask.from_config(cfg)
    for u in synth.generate(cfg)["train"]:
        # without noise each frame is exactly its hidden symbol's prototype
        hidden = np.argmin(((u.features[:, None, :] - task.prototypes[None]) ** 2).sum(-1), axis=1)
        assert np.array_equal(task.prototypes[hidden], u.features)
        assert np.array_equal(task.labels(hidden), u.labels)


@pytest.mark.slow
def test_one_layer_reaches_ceiling_without_noise_or_context():
    cfg = RunConfig(n_layers=1, cell_dim=(8,), proj_dim=0, context=0, noise=0.0, n_train=30, n_valid=10, n_test=10,
                    n_streams=4, init_scale=0.5, lr=0.5, epochs=8, highway_dropout=False, seed=3)
    data = synth.generate(cfg)
    model = Model.init(cfg.stack_spec(cfg.feature_dim, cfg.alphabet), RngStream(1), cfg.init_scale)
    res = trainer.train(model, data["train"], data["valid"], cfg)
    assert trainer.evaluate(res.model, data["test"], cfg)["frame_accuracy"] >= 0.99
