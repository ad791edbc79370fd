"""Frame-level cross-entropy training with truncated BPTT.

Utterances are packed into ``n_streams`` parallel streams.  Each minibatch holds
``segment_len`` frames per stream (``N_c`` frames plus ``N_r`` look-ahead in the
bidirectional chunked modes); a stream whose utterance runs out is masked for
the rest of the minibatch and refilled, with zeroed state, at the next one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .cells import LayerState
from .config import RunConfig
from .data import Utterance
from .network import (
    ChunkBatch,
    Model,
    csc_chunk_forward,
    forward_lc_chunk,
    frame_cross_entropy,
    sample_highway_masks,
    stack_backward,
)
from .tensor import RngStream, derive_seed

log = logging.getLogger(__name__)

# seed-derivation tags
SHUFFLE, DROPOUT, INIT = 1, 2, 3


class EndOfEpoch(Exception):
    """Every utterance has been consumed."""


class TrainingDiverged(RuntimeError):
    pass


class Packer:
    """Assigns utterances to parallel streams and cuts rectangular minibatches.

    ``segment_len=None`` packs one whole utterance per stream per minibatch.
    ``state_dims`` lists ``(cell_dim, proj_dim)`` of each layer's forward
    direction; carried states are kept for it and zeroed on refill.
    """

    def __init__(self, utterances: list[Utterance], n_streams: int, segment_len: int | None,
                 n_right: int = 0, n_left: int = 0, state_dims=None):
        if n_streams < 1 or (segment_len is not None and segment_len < 1):
            raise ValueError("need n_streams >= 1 and segment_len >= 1")
        self.utterances = list(utterances)
        self.n_streams = n_streams
        self.segment_len = segment_len
        self.n_right = n_right
        self.n_left = n_left
        self.queue = list(range(len(self.utterances)))
        self.queue.reverse()
        self.current = np.full(n_streams, -1)
        self.cursor = np.zeros(n_streams, dtype=int)
        self.carried_ids = np.full(n_streams, -1)
        self.state_dims = state_dims
        self.carried = None
        if state_dims is not None:
            self.carried = [LayerState(np.zeros((n_streams, c)), np.zeros((n_streams, r))) for c, r in state_dims]
        dims = {u.features.shape[1] for u in self.utterances}
        if len(dims) > 1:
            raise ValueError("utterances disagree on feature dimension")
        self.feature_dim = dims.pop() if dims else 0

    def _remaining(self, s: int) -> int:
        if self.current[s] < 0:
            return 0
        return len(self.utterances[self.current[s]]) - self.cursor[s]

    def _refill(self) -> None:
        for s in range(self.n_streams):
            if self._remaining(s) > 0:
                continue
            if self.queue:
                self.current[s] = self.queue.pop()
                self.cursor[s] = 0
                self.carried_ids[s] = self.utterances[self.current[s]].uid
                if self.carried is not None:
                    for st in self.carried:
                        st.c[s] = 0.0
                        st.r[s] = 0.0
            else:
                self.current[s] = -1

    def _cut(self, n: int, offset: int):
        B, D = self.n_streams, self.feature_dim
        frames = np.zeros((n, B, D))
        valid = np.zeros((n, B), dtype=bool)
        labels = np.full((n, B), -1)
        index = np.full((n, B), -1)
        for s in range(B):
            if self.current[s] < 0:
                continue
            utt = self.utterances[self.current[s]]
            start = self.cursor[s] + offset
            lo, hi = max(start, 0), min(start + n, len(utt))
            if hi > lo:
                sl = slice(lo - start, hi - start)
                frames[sl, s] = utt.features[lo:hi]
                valid[sl, s] = True
                labels[sl, s] = utt.labels[lo:hi]
                index[sl, s] = np.arange(lo, hi)
        return frames, valid, labels, index

    def pack_next(self) -> ChunkBatch:
        """Next minibatch; raises :class:`EndOfEpoch` once all data is consumed."""
        self._refill()
        active = self.current >= 0
        if not active.any():
            raise EndOfEpoch
        if self.segment_len is None:
            n = max(self._remaining(s) for s in range(self.n_streams))
        else:
            n = self.segment_len
        frames, valid, labels, index = self._cut(n, 0)
        future = future_valid = left = left_valid = None
        if self.n_right:
            future, future_valid, _, _ = self._cut(self.n_right, n)
        if self.n_left:
            left, left_valid, _, _ = self._cut(self.n_left, -self.n_left)
        stream_ids = np.array(
            [self.utterances[c].uid if c >= 0 else -1 for c in self.current], dtype=int
        )
        batch = ChunkBatch(
            frames, valid, future, future_valid,
            carried_states=self.carried, stream_ids=stream_ids, carried_ids=self.carried_ids.copy(),
            labels=labels, frame_index=index, left_context=left, left_valid=left_valid,
        )
        self.cursor[active] += n
        return batch

    def update_carried(self, states: list[LayerState]) -> None:
        if self.carried is not None:
            self.carried = [LayerState(s.c.copy(), s.r.copy()) for s in states]

    def __iter__(self):
        while True:
            try:
                yield self.pack_next()
            except EndOfEpoch:
                return


def make_packer(model: Model, utterances, config: RunConfig) -> Packer:
    """Packing geometry for ``config.mode``."""
    state_dims = [(dirs[0].lstm.cell_dim, dirs[0].lstm.proj_dim) for dirs in model.layers]
    mode = config.mode
    if mode == "uni":
        return Packer(utterances, config.n_streams, config.segment_len, state_dims=state_dims)
    if mode == "lc-blstm":
        return Packer(utterances, config.n_streams, config.n_c, n_right=config.n_r, state_dims=state_dims)
    if mode == "csc":
        return Packer(utterances, config.n_streams, config.n_c, n_right=config.n_r, n_left=config.n_l)
    return Packer(utterances, config.n_streams, None, state_dims=state_dims)


def batch_forward(model: Model, batch: ChunkBatch, mode: str, masks=None):
    """Forward one packed minibatch; returns ``(cache, carried_states or None)``."""
    if mode == "csc":
        _, cache = csc_chunk_forward(model, batch, masks)
        return cache, None
    _, carried, cache = forward_lc_chunk(model, batch, masks)
    return cache, carried


# ---------------------------------------------------------------------------
# schedules and regularization


@dataclass(frozen=True)
class LrSchedule:
    rate: float
    factor: float = 0.5
    best: float = float("inf")
    history: tuple[float, ...] = ()


def step_lr(sched: LrSchedule, validation_loss: float) -> LrSchedule:
    """Halve the rate unless ``validation_loss`` beats the best seen so far."""
    history = sched.history + (float(validation_loss),)
    if validation_loss < sched.best:
        return replace(sched, best=float(validation_loss), history=history)
    return replace(sched, rate=sched.rate * sched.factor, history=history)


@dataclass(frozen=True)
class DropoutSchedule:
    threshold: int = 5
    early: float = 0.1
    late: float = 0.8

    def rate(self, epoch: int) -> float:
        return self.early if epoch < self.threshold else self.late


def dropout_schedule(config: RunConfig) -> DropoutSchedule:
    return DropoutSchedule(config.dropout_switch_epoch, config.dropout_early, config.dropout_late)


def constrained_tensors(model: Model):
    """Input and recurrent weight matrices subject to the max-norm constraint."""
    for name, arr in model.named_tensors().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith(("W_x", "W_m")):
            yield name, arr


def apply_max_norm(model: Model, cap: float) -> Model:
    """Rescale, in place, every incoming-weight vector whose L2 norm exceeds ``cap``.

    Matrices are stored ``(out, in)``, so a unit's incoming weights form one row.
    """
    if cap <= 0:
        raise ValueError("max-norm cap must be positive")
    for _, arr in constrained_tensors(model):
        norms = np.sqrt((arr * arr).sum(axis=1))
        over = norms > cap
        if over.any():
            arr[over] *= (cap / norms[over])[:, None]
    return model


def sgd_update(model: Model, grads: dict, lr: float) -> None:
    for name, arr in model.named_tensors().items():
        arr -= lr * grads[name]


# ---------------------------------------------------------------------------
# epochs


def tie_aware_correct(log_probs: np.ndarray, labels: np.ndarray, valid: np.ndarray) -> float:
    """Sum over valid frames of 1/|argmax set| when the label is among the maxima."""
    top = log_probs.max(axis=-1, keepdims=True)
    is_max = log_probs >= top
    safe = np.where(valid, labels, 0)
    hit = np.take_along_axis(is_max, safe[..., None], axis=-1)[..., 0]
    credit = hit / is_max.sum(axis=-1)
    return float(credit[valid].sum())


def evaluate(model: Model, utterances, config: RunConfig) -> dict:
    """Mean frame cross-entropy and frame accuracy in inference mode."""
    packer = make_packer(model, utterances, config)
    total_ce = 0.0
    correct = 0.0
    frames = 0
    for batch in packer:
        cache, carried = batch_forward(model, batch, config.mode)
        if carried is not None:
            packer.update_carried(carried)
        loss, _, n = frame_cross_entropy(cache.log_probs, batch.labels, batch.valid)
        total_ce += loss * n
        correct += tie_aware_correct(cache.log_probs, batch.labels, batch.valid)
        frames += n
    if frames == 0:
        return {"cross_entropy": float("nan"), "frame_accuracy": float("nan"), "frames": 0}
    return {"cross_entropy": total_ce / frames, "frame_accuracy": correct / frames, "frames": frames}


def _shuffled(utterances, seed: int, epoch: int):
    order = RngStream(derive_seed(seed, SHUFFLE, epoch)).integers(0, 2**62, len(utterances))
    return [utterances[k] for k in np.argsort(order, kind="stable")]


def train_epoch(model: Model, train: list[Utterance], valid: list[Utterance] | None,
                config: RunConfig, epoch: int = 0, lr: float | None = None, shuffle: bool = True):
    """One pass of minibatch SGD; returns ``(model, train_loss, validation_loss)``.

    ``model`` is updated in place.  Gradients are averaged over the valid
    frames of a minibatch; with ``lr_per_sample`` the rate is multiplied by
    that frame count.
    """
    lr = config.lr if lr is None else lr
    data = _shuffled(train, config.seed, epoch) if shuffle else list(train)
    packer = make_packer(model, data, config)
    drop_rng = RngStream(derive_seed(config.seed, DROPOUT, epoch))
    rate = dropout_schedule(config).rate(epoch) if config.highway_dropout else 0.0
    total, frames = 0.0, 0
    for step, batch in enumerate(packer):
        masks = sample_highway_masks(model, drop_rng, rate, batch.n_streams) if rate > 0 else None
        cache, carried = batch_forward(model, batch, config.mode, masks)
        if carried is not None:
            packer.update_carried(carried)
        loss, d_logits, n = frame_cross_entropy(cache.log_probs, batch.labels, batch.valid)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, minibatch {step}")
        if n == 0:
            continue
        total += loss * n
        frames += n
        if lr == 0.0:
            continue
        grads, _ = stack_backward(cache, d_logits)
        sgd_update(model, grads, lr * n if config.lr_per_sample else lr)
        if config.max_norm > 0:
            apply_max_norm(model, config.max_norm)
    train_loss = total / frames if frames else float("nan")
    val_loss = evaluate(model, valid, config)["cross_entropy"] if valid else float("nan")
    return model, train_loss, val_loss


@dataclass
class TrainResult:
    model: Model
    records: list[dict] = field(default_factory=list)


def train(model: Model, train_data, valid_data, config: RunConfig, emit=None) -> TrainResult:
    """Run ``config.epochs`` epochs with validation-driven rate halving."""
    sched = LrSchedule(config.lr, config.lr_halving)
    drop = dropout_schedule(config)
    result = TrainResult(model)
    for epoch in range(config.epochs):
        _, train_loss, val_loss = train_epoch(model, train_data, valid_data, config, epoch, sched.rate)
        record = {
            "epoch": epoch,
            "lr": sched.rate,
            "dropout": drop.rate(epoch) if (config.highway_dropout and config.highway) else 0.0,
            "train_loss": train_loss,
            "valid_loss": val_loss if valid_data else None,
        }
        log.info("epoch %d lr %.4g train %.4f valid %.4f", epoch, record["lr"], train_loss, val_loss)
        result.records.append(record)
        if emit is not None:
            emit(record)
        if valid_data:
            sched = step_lr(sched, val_loss)
    return result
