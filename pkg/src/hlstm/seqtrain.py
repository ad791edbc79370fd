"""Two-pass sequence-discriminative (state-level MBR) training.

A cycle packs a group of utterances exactly as cross-entropy training does,
runs the first forward pass without touching the parameters and pools the
per-frame log-likelihoods.  Once every pooled utterance is complete, the sMBR
error signals are computed on a small decoding graph; the same minibatches
are then replayed (same packing, same dropout seed) and the pooled signals are
injected at the output layer to update the model.

The criterion is expected frame accuracy under the path posterior
``p(path) ∝ exp(kappa * sum_t loglike[t, label(s_t)]) * p_trans(path)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import Utterance
from .network import Model, loglike_grad_to_logits, stack_backward
from .tensor import RngStream, derive_seed
from .trainer import apply_max_norm, batch_forward, dropout_schedule, make_packer, sample_highway_masks, sgd_update

SEQ_DROPOUT = 11
GRAPH_MAGIC = "hlstm-graph 1"


class GraphError(ValueError):
    pass


class PoolOverflowError(ValueError):
    pass


class ReplayDivergence(RuntimeError):
    """The replayed minibatches differ from the pooled ones."""


@dataclass
class DecodingGraph:
    """States carrying class labels, with initial and transition log-probabilities.

    ``log_trans[a, b]`` is the log-probability of moving from state ``a`` to
    ``b``; ``numerators`` maps an utterance id to its reference state sequence.
    """

    labels: np.ndarray
    log_init: np.ndarray
    log_trans: np.ndarray
    numerators: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.log_init = np.asarray(self.log_init, dtype=np.float64)
        self.log_trans = np.asarray(self.log_trans, dtype=np.float64)
        self.numerators = {int(k): np.asarray(v, dtype=np.int64) for k, v in self.numerators.items()}
        self.validate()

    @property
    def n_states(self) -> int:
        return self.labels.shape[0]

    def validate(self, tol: float = 1e-9) -> None:
        S = self.n_states
        if S < 1 or self.log_init.shape != (S,) or self.log_trans.shape != (S, S):
            raise GraphError("graph arrays have inconsistent shapes")
        if np.any(self.labels < 0):
            raise GraphError("state labels must be non-negative class indices")
        if abs(np.exp(self.log_init).sum() - 1.0) > tol:
            raise GraphError("initial probabilities do not sum to 1")
        rows = np.exp(self.log_trans).sum(axis=1)
        if np.any(np.abs(rows - 1.0) > tol):
            raise GraphError(f"outgoing transitions of states {np.flatnonzero(np.abs(rows - 1) > tol)} do not sum to 1")
        for uid, path in self.numerators.items():
            if path.ndim != 1 or np.any((path < 0) | (path >= S)):
                raise GraphError(f"numerator path of utterance {uid} names unknown states")


def graph_from_labels(utterances: list[Utterance], n_classes: int, smoothing: float = 1.0) -> DecodingGraph:
    """One state per class; initial and bigram transition probabilities from the labels."""
    init = np.full(n_classes, smoothing)
    trans = np.full((n_classes, n_classes), smoothing)
    for u in utterances:
        init[u.labels[0]] += 1
        np.add.at(trans, (u.labels[:-1], u.labels[1:]), 1)
    init /= init.sum()
    trans /= trans.sum(axis=1, keepdims=True)
    return DecodingGraph(
        np.arange(n_classes), np.log(init), np.log(trans), {u.uid: u.labels.copy() for u in utterances}
    )


def write_graph(path, graph: DecodingGraph) -> None:
    """Text format, one record per line::

        hlstm-graph 1
        states S
        state <id> <label>
        init <id> <logprob>
        arc <from> <to> <logprob>
        num <uid> <state> <state> ...

    Missing ``init``/``arc`` records mean probability zero.
    """
    lines = [GRAPH_MAGIC, f"states {graph.n_states}"]
    lines += [f"state {s} {int(l)}" for s, l in enumerate(graph.labels)]
    lines += [f"init {s} {lp!r}" for s, lp in enumerate(graph.log_init.tolist()) if lp > -math.inf]
    for a in range(graph.n_states):
        for b in range(graph.n_states):
            lp = float(graph.log_trans[a, b])
            if lp > -math.inf:
                lines.append(f"arc {a} {b} {lp!r}")
    for uid in sorted(graph.numerators):
        lines.append("num " + " ".join(str(int(v)) for v in (uid, *graph.numerators[uid])))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_graph(path) -> DecodingGraph:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    if not rows or " ".join(rows[0]) != GRAPH_MAGIC:
        raise GraphError(f"{path}: not a decoding graph file")
    if rows[1][0] != "states":
        raise GraphError(f"{path}: expected 'states' record")
    S = int(rows[1][1])
    labels = np.full(S, -1)
    log_init = np.full(S, -np.inf)
    log_trans = np.full((S, S), -np.inf)
    nums = {}
    for row in rows[2:]:
        tag = row[0]
        if tag == "state":
            labels[int(row[1])] = int(row[2])
        elif tag == "init":
            log_init[int(row[1])] = float(row[2])
        elif tag == "arc":
            log_trans[int(row[1]), int(row[2])] = float(row[3])
        elif tag == "num":
            nums[int(row[1])] = [int(v) for v in row[2:]]
        else:
            raise GraphError(f"{path}: unknown record {tag!r}")
    return DecodingGraph(labels, log_init, log_trans, nums)


# ---------------------------------------------------------------------------
# criterion


@dataclass
class SmbrStats:
    state_posteriors: np.ndarray
    forward_acc: np.ndarray
    backward_acc: np.ndarray
    expected_accuracy: float
    state_grad: np.ndarray


def smbr_forward_backward(graph: DecodingGraph, loglikes: np.ndarray, kappa: float, reference) -> SmbrStats:
    """Forward-backward over the graph with expected-accuracy accumulators.

    ``forward_acc[t, s]`` is the expected accuracy of frames ``0..t`` among
    prefixes ending in ``s`` at ``t``; ``backward_acc[t, s]`` that of frames
    ``t+1..T-1`` among suffixes leaving ``s``.  Probabilities are rescaled per
    frame.
    """
    loglikes = np.asarray(loglikes, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.int64)
    T = loglikes.shape[0]
    if loglikes.ndim != 2 or reference.shape != (T,) or T < 1:
        raise ValueError("loglikes must be (T, K) with a length-T reference path")
    if graph.labels.max() >= loglikes.shape[1]:
        raise GraphError("graph labels exceed the number of output classes")
    scores = kappa * loglikes[:, graph.labels]
    emit = np.exp(scores - scores.max(axis=1, keepdims=True))
    acc = (graph.labels[None, :] == graph.labels[reference][:, None]).astype(np.float64)
    A = np.exp(graph.log_trans)
    S = graph.n_states

    alpha = np.zeros((T, S))
    a_acc = np.zeros((T, S))
    alpha[0] = np.exp(graph.log_init) * emit[0]
    a_acc[0] = acc[0]
    for t in range(T):
        if t > 0:
            pred = alpha[t - 1] @ A
            num = (alpha[t - 1] * a_acc[t - 1]) @ A
            reach = pred > 0
            a_acc[t] = np.where(reach, num / np.where(reach, pred, 1.0), 0.0) + acc[t]
            alpha[t] = pred * emit[t]
        total = alpha[t].sum()
        if not total > 0:
            raise GraphError(f"no path through the graph reaches frame {t}")
        alpha[t] /= total

    beta = np.zeros((T, S))
    b_acc = np.zeros((T, S))
    beta[T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        w = A * (emit[t + 1] * beta[t + 1])[None, :]
        mass = w.sum(axis=1)
        ok = mass > 0
        b_acc[t] = np.where(ok, (w @ (b_acc[t + 1] + acc[t + 1])) / np.where(ok, mass, 1.0), 0.0)
        beta[t] = mass / mass.max() if mass.max() > 0 else mass

    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    expected = float((gamma[T - 1] * a_acc[T - 1]).sum())
    state_grad = kappa * gamma * (a_acc + b_acc - expected)
    return SmbrStats(gamma, a_acc, b_acc, expected, state_grad)


def smbr_error_signal(graph: DecodingGraph, loglikes: np.ndarray, kappa: float = 0.2, reference=None):
    """Gradient of expected frame accuracy w.r.t. each frame's class log-likelihoods.

    ``reference`` is the numerator state sequence (or an utterance id looked up
    in ``graph.numerators``).  Returns ``(signal (T, K), expected_accuracy)``.
    """
    if reference is None or np.isscalar(reference):
        reference = graph.numerators[int(reference or 0)]
    stats = smbr_forward_backward(graph, loglikes, kappa, reference)
    signal = np.zeros_like(np.asarray(loglikes, dtype=np.float64))
    for s, k in enumerate(graph.labels):
        signal[:, k] += stats.state_grad[:, s]
    return signal, stats.expected_accuracy


def write_error_signals(path, signals: dict[int, np.ndarray]) -> None:
    """Line-delimited JSON, one record ``{"uid", "t", "grad"}`` per frame."""
    with open(path, "w") as fh:
        for uid in sorted(signals):
            for t, row in enumerate(signals[uid]):
                fh.write(json.dumps({"uid": int(uid), "t": t, "grad": [float(v) for v in row]}) + "\n")


# ---------------------------------------------------------------------------
# two-pass scheduler


@dataclass
class SequencePool:
    capacity: int
    utterances: list[Utterance]
    loglikes: dict[int, np.ndarray]
    filled: dict[int, int]
    batch_checksums: list[str]
    dropout_seed: int
    dropout_rate: float

    def complete(self) -> bool:
        return all(self.filled[u.uid] == len(u) for u in self.utterances)


def _cycle_rate(config: RunConfig, model: Model, epoch: int) -> float:
    if not (config.highway_dropout and any(True for _ in model.highway_slots())):
        return 0.0
    return dropout_schedule(config).rate(config.epochs + epoch)


def pool_pass(model: Model, queue: list[Utterance], config: RunConfig, epoch: int = 0, cycle: int = 0):
    """First forward pass; returns ``(pool, deferred_utterances)``.

    Takes up to ``pool_capacity`` utterances (and at most ``pool_max_frames``
    frames) off the front of ``queue``.  Parameters are not modified.
    """
    taken, frames = [], 0
    for u in queue:
        if len(u) > config.pool_max_frames:
            raise PoolOverflowError(f"utterance {u.uid} ({len(u)} frames) exceeds the pool budget")
        if len(taken) == config.pool_capacity or frames + len(u) > config.pool_max_frames:
            break
        taken.append(u)
        frames += len(u)
    rest = list(queue[len(taken):])
    K = model.spec.output_dim
    pool = SequencePool(
        config.pool_capacity, taken,
        {u.uid: np.zeros((len(u), K)) for u in taken}, {u.uid: 0 for u in taken}, [],
        derive_seed(config.seed, SEQ_DROPOUT, epoch, cycle), _cycle_rate(config, model, epoch),
    )
    _sweep(model, pool, config, _collect)
    if not pool.complete():
        raise RuntimeError("pool pass ended with incomplete utterances")
    return pool, rest


def _collect(model, pool, config, batch, cache):
    pool.batch_checksums.append(batch.checksum())
    for s in range(batch.n_streams):
        uid = int(batch.stream_ids[s])
        if uid < 0:
            continue
        rows = batch.valid[:, s]
        idx = batch.frame_index[rows, s]
        pool.loglikes[uid][idx] = cache.log_probs[rows, s]
        pool.filled[uid] += int(rows.sum())


def _sweep(model, pool, config, visit, check=False):
    packer = make_packer(model, pool.utterances, config)
    rng = RngStream(pool.dropout_seed)
    k = -1
    for k, batch in enumerate(packer):
        if check:
            if k >= len(pool.batch_checksums) or batch.checksum() != pool.batch_checksums[k]:
                raise ReplayDivergence(f"minibatch {k} differs from the pooled pass")
        masks = sample_highway_masks(model, rng, pool.dropout_rate, batch.n_streams) if pool.dropout_rate > 0 else None
        cache, carried = batch_forward(model, batch, config.mode, masks)
        if carried is not None:
            packer.update_carried(carried)
        visit(model, pool, config, batch, cache)
    if check and k + 1 != len(pool.batch_checksums):
        raise ReplayDivergence("replay produced a different number of minibatches")


def compute_signals(pool: SequencePool, graph: DecodingGraph, kappa: float):
    """Per-utterance ``(signal, expected_accuracy)`` for a complete pool."""
    if not pool.complete():
        raise RuntimeError("error signals need complete utterances")
    return {u.uid: smbr_error_signal(graph, pool.loglikes[u.uid], kappa, graph.numerators[u.uid])
            for u in pool.utterances}


def replay_pass(model: Model, pool: SequencePool, signals: dict, config: RunConfig) -> Model:
    """Second pass: replays the pooled minibatches, updating ``model`` in place."""
    missing = [u.uid for u in pool.utterances if u.uid not in signals]
    if missing:
        raise ValueError(f"no error signal for utterances {missing}")

    def update(model, pool, config, batch, cache):
        d_loglike = np.zeros_like(cache.log_probs)
        n = int(batch.valid.sum())
        for s in range(batch.n_streams):
            uid = int(batch.stream_ids[s])
            if uid < 0:
                continue
            rows = batch.valid[:, s]
            sig = signals[uid]
            sig = sig[0] if isinstance(sig, tuple) else sig
            # minimize negative expected accuracy
            d_loglike[rows, s] = -sig[batch.frame_index[rows, s]]
        if n == 0 or not d_loglike.any():
            return
        d_logits = loglike_grad_to_logits(cache.log_probs, d_loglike)
        grads, _ = stack_backward(cache, d_logits)
        lr = config.seq_lr if config.seq_lr_per_sample else config.seq_lr / n
        sgd_update(model, grads, lr)
        if config.max_norm > 0:
            apply_max_norm(model, config.max_norm)

    _sweep(model, pool, config, update, check=True)
    return model


def train_sequence_epoch(model: Model, data: list[Utterance], graph: DecodingGraph, config: RunConfig,
                         epoch: int = 0, on_cycle=None):
    """Pool, signal and replay until ``data`` is exhausted.

    Returns ``(model, mean_expected_accuracy)`` where the accuracy is the
    frame-normalized expected accuracy seen during the pooling passes.
    """
    queue = list(data)
    total_acc, total_frames, cycle = 0.0, 0, 0
    while queue:
        pool, queue = pool_pass(model, queue, config, epoch, cycle)
        signals = compute_signals(pool, graph, config.kappa)
        replay_pass(model, pool, signals, config)
        cycle_acc = sum(acc for _, acc in signals.values())
        cycle_frames = sum(len(u) for u in pool.utterances)
        total_acc += cycle_acc
        total_frames += cycle_frames
        if on_cycle is not None:
            on_cycle({"epoch": epoch, "cycle": cycle, "utterances": len(pool.utterances),
                      "expected_accuracy": cycle_acc / cycle_frames})
        cycle += 1
    return model, (total_acc / total_frames if total_frames else float("nan"))


def mean_expected_accuracy(model: Model, data: list[Utterance], graph: DecodingGraph, config: RunConfig) -> float:
    """Frame-normalized expected accuracy of ``model`` in inference mode."""
    cfg = config.replace(highway_dropout=False, pool_capacity=max(len(data), 1),
                         pool_max_frames=max(sum(len(u) for u in data), config.pool_max_frames))
    pool, _ = pool_pass(model, data, cfg)
    signals = compute_signals(pool, graph, config.kappa)
    return sum(acc for _, acc in signals.values()) / sum(len(u) for u in data)
