"""Desk-scale stand-in task: noisy frames of a hidden Markov symbol chain.

Each hidden sequence follows a chain that keeps its symbol with probability
``stay_prob`` and otherwise jumps uniformly to another one (so symbols are
uniformly distributed).  A frame is a fixed random prototype of its hidden
symbol plus Gaussian noise.  Frame labels are a deterministic function of the
clean hidden symbols in the window ``t-k .. t+k`` (indices clamped to the
utterance):

* ``shift``: the symbol ``k`` frames ahead;
* ``max``: the largest symbol in the window.

With ``k > 0`` the label depends on future frames, which a unidirectional model
cannot see.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data import Utterance, write_dataset
from .seqtrain import graph_from_labels, write_graph
from .tensor import RngStream, derive_seed

SPLITS = ("train", "valid", "test")
PROTOTYPES, SAMPLES = 21, 22


@dataclass
class SyntheticTask:
    alphabet: int
    feature_dim: int
    context: int
    noise: float
    rule: str
    stay_prob: float
    prototypes: np.ndarray

    @classmethod
    def from_config(cls, config: RunConfig, seed: int | None = None) -> SyntheticTask:
        seed = config.seed if seed is None else seed
        rng = RngStream(derive_seed(seed, PROTOTYPES))
        protos = rng.normal((config.alphabet, config.feature_dim))
        return cls(config.alphabet, config.feature_dim, config.context, config.noise, config.rule,
                   config.stay_prob, protos)

    def sample_hidden(self, rng: RngStream, T: int) -> np.ndarray:
        h = np.empty(T, dtype=np.int64)
        h[0] = rng.integers(0, self.alphabet)
        stay = rng.random(T) < self.stay_prob
        jumps = rng.integers(1, self.alphabet, T) if self.alphabet > 1 else np.zeros(T, dtype=np.int64)
        for t in range(1, T):
            h[t] = h[t - 1] if stay[t] else (h[t - 1] + jumps[t]) % self.alphabet
        return h

    def labels(self, hidden: np.ndarray) -> np.ndarray:
        T, k = len(hidden), self.context
        if self.rule == "shift":
            return hidden[np.minimum(np.arange(T) + k, T - 1)].copy()
        out = np.empty(T, dtype=np.int64)
        for t in range(T):
            out[t] = hidden[max(t - k, 0):min(t + k, T - 1) + 1].max()
        return out

    def utterance(self, rng: RngStream, T: int, uid: int) -> Utterance:
        hidden = self.sample_hidden(rng, T)
        feats = self.prototypes[hidden] + rng.normal((T, self.feature_dim), self.noise) if self.noise > 0 \
            else self.prototypes[hidden].copy()
        return Utterance(feats, self.labels(hidden), uid)


def generate(config: RunConfig, seed: int | None = None) -> dict[str, list[Utterance]]:
    seed = config.seed if seed is None else seed
    task = SyntheticTask.from_config(config, seed)
    rng = RngStream(derive_seed(seed, SAMPLES))
    out, uid = {}, 0
    for split, n in zip(SPLITS, (config.n_train, config.n_valid, config.n_test)):
        utts = []
        for _ in range(n):
            T = int(rng.integers(config.min_len, config.max_len + 1))
            utts.append(task.utterance(rng, T, uid))
            uid += 1
        out[split] = utts
    return out


def task_meta(config: RunConfig, seed: int) -> dict:
    keys = ("alphabet", "feature_dim", "context", "noise", "rule", "stay_prob", "min_len", "max_len")
    meta = {k: getattr(config, k) for k in keys}
    meta["seed"] = seed
    return meta


def synth(config: RunConfig, out_dir, seed: int | None = None) -> dict[str, str]:
    """Write ``train.bin``, ``valid.bin``, ``test.bin`` and ``graph.txt`` into ``out_dir``."""
    seed = config.seed if seed is None else seed
    os.makedirs(out_dir, exist_ok=True)
    splits = generate(config, seed)
    paths = {}
    for split, utts in splits.items():
        if not utts:
            continue
        path = os.path.join(out_dir, f"{split}.bin")
        write_dataset(path, utts, dict(task_meta(config, seed), split=split, n_classes=config.alphabet))
        paths[split] = path
    graph = graph_from_labels(splits["train"], config.alphabet)
    for split in ("valid", "test"):
        graph.numerators.update({u.uid: u.labels.copy() for u in splits[split]})
    paths["graph"] = os.path.join(out_dir, "graph.txt")
    write_graph(paths["graph"], graph)
    return paths
