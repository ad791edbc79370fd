"""Deep (bidirectional) LSTM stacks and their chunked evaluation modes.

Sequences are time-major arrays ``(T, B, dim)`` with a boolean validity mask
``(T, B)``.  At an invalid frame a direction holds its state unchanged, so
padding before or after an utterance never leaks into valid frames.  The same
engine backs three modes:

* full sequence: both directions start from zero state at the utterance edges;
* latency-controlled chunks: the forward direction resumes from carried
  states, the backward direction starts from zero at the end of ``N_r``
  look-ahead frames;
* context-sensitive chunks: ``N_l`` left and ``N_r`` right frames are
  recomputed around each chunk with both directions reset.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import cells
from .cells import DropoutMask, HighwayParams, LayerState, LstmLayerParams
from .tensor import RngStream, ShapeError, linear, log_softmax, mac_scope

DIRECTIONS = ("fwd", "bwd")
LAYER_KINDS = ("lstm", "highway")


class StateMismatchError(ValueError):
    """Carried recurrent states do not belong to the batch's streams."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    cell_dim: int
    proj_dim: int | None = None

    @property
    def out_dim(self) -> int:
        return self.cell_dim if self.proj_dim is None else self.proj_dim


@dataclass(frozen=True)
class StackSpec:
    input_dim: int
    output_dim: int
    layers: tuple[LayerSpec, ...]
    bidirectional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        self.validate()

    def validate(self) -> None:
        if self.input_dim < 1 or self.output_dim < 1 or not self.layers:
            raise ValueError("stack needs positive input/output dims and at least one layer")
        for idx, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"layer {idx}: unknown kind {layer.kind!r}")
            if layer.cell_dim < 1 or (layer.proj_dim is not None and layer.proj_dim < 1):
                raise ValueError(f"layer {idx}: dims must be positive")
            if layer.kind == "highway":
                if idx == 0:
                    raise ValueError("the first layer has no lower cell to connect a highway to")
                if self.layers[idx - 1].cell_dim != layer.cell_dim:
                    raise ValueError(
                        f"layer {idx}: highway needs lower cell_dim {self.layers[idx - 1].cell_dim}"
                        f" == {layer.cell_dim}"
                    )

    @property
    def n_dirs(self) -> int:
        return 2 if self.bidirectional else 1

    def layer_input_dim(self, idx: int) -> int:
        if idx == 0:
            return self.input_dim
        return self.layers[idx - 1].out_dim * self.n_dirs

    @property
    def head_dim(self) -> int:
        return self.layers[-1].out_dim * self.n_dirs

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "bidirectional": self.bidirectional,
            "layers": [
                {"kind": l.kind, "cell_dim": l.cell_dim, "proj_dim": l.proj_dim} for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> StackSpec:
        return cls(
            input_dim=int(d["input_dim"]),
            output_dim=int(d["output_dim"]),
            layers=tuple(LayerSpec(l["kind"], int(l["cell_dim"]), l.get("proj_dim")) for l in d["layers"]),
            bidirectional=bool(d["bidirectional"]),
        )


@dataclass
class DirectionParams:
    lstm: LstmLayerParams
    highway: HighwayParams | None = None


@dataclass
class Model:
    spec: StackSpec
    layers: list[list[DirectionParams]]
    W_out: np.ndarray
    b_out: np.ndarray

    @classmethod
    def init(
        cls, spec: StackSpec, rng: RngStream, scale: float = 0.05, forget_bias: float = 1.0, carry_bias: float = 0.0
    ) -> Model:
        layers = []
        for idx, ls in enumerate(spec.layers):
            n_in = spec.layer_input_dim(idx)
            dirs = []
            for _ in range(spec.n_dirs):
                p = cells.init_lstm_params(rng, n_in, ls.cell_dim, ls.proj_dim, scale, forget_bias)
                hp = None
                if ls.kind == "highway":
                    hp = cells.init_highway_params(rng, n_in, ls.cell_dim, scale, carry_bias)
                dirs.append(DirectionParams(p, hp))
            layers.append(dirs)
        W_out = rng.uniform((spec.output_dim, spec.head_dim), -scale, scale)
        return cls(spec, layers, W_out, np.zeros(spec.output_dim))

    @classmethod
    def zeros(cls, spec: StackSpec) -> Model:
        model = cls.init(spec, RngStream(0))
        for arr in model.named_tensors().values():
            arr[...] = 0.0
        return model

    def named_tensors(self) -> dict[str, np.ndarray]:
        """Ordered name -> array view of every parameter (arrays are live)."""
        out = {}
        for idx, dirs in enumerate(self.layers):
            for d, dp in enumerate(dirs):
                prefix = f"l{idx}.{DIRECTIONS[d]}."
                for name, arr in dp.lstm.named():
                    out[prefix + name] = arr
                if dp.highway is not None:
                    for name, arr in dp.highway.named():
                        out[prefix + name] = arr
        out["out.W"] = self.W_out
        out["out.b"] = self.b_out
        return out

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.named_tensors().items()}

    def copy(self) -> Model:
        new = Model.init(self.spec, RngStream(0))
        src = self.named_tensors()
        for name, arr in new.named_tensors().items():
            arr[...] = src[name]
        return new

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_tensors().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def highway_slots(self):
        """(layer, direction, cell_dim) for every highway direction."""
        for idx, ls in enumerate(self.spec.layers):
            if ls.kind == "highway":
                for d in range(self.spec.n_dirs):
                    yield idx, d, ls.cell_dim


def sample_highway_masks(model: Model, rng: RngStream, rate: float, batch: int) -> dict:
    """One mask per highway layer and direction, shared by every frame of a chunk."""
    return {(l, d): cells.make_dropout_mask(rng, dim, rate, batch) for l, d, dim in model.highway_slots()}


@dataclass
class ChunkBatch:
    """Fixed-size block of frames from parallel streams (time-major arrays).

    ``frames`` is ``(N_c, B, D)``; ``future_context`` ``(N_r, B, D)`` and
    ``left_context`` ``(N_l, B, D)`` hold look-ahead and (for context-sensitive
    chunks) look-behind frames.  ``carried_states`` holds one batched forward
    state per layer; ``carried_ids`` names the utterance each carried row
    belongs to and must equal ``stream_ids`` on active streams.
    """

    frames: np.ndarray
    valid: np.ndarray
    future_context: np.ndarray | None = None
    future_valid: np.ndarray | None = None
    carried_states: list[LayerState] | None = None
    stream_ids: np.ndarray | None = None
    carried_ids: np.ndarray | None = None
    labels: np.ndarray | None = None
    frame_index: np.ndarray | None = None
    left_context: np.ndarray | None = None
    left_valid: np.ndarray | None = None

    @property
    def n_streams(self) -> int:
        return self.frames.shape[1]

    @property
    def n_main(self) -> int:
        return self.frames.shape[0]

    def _ctx(self, which):
        arr = getattr(self, which)
        if arr is None:
            B, D = self.frames.shape[1:]
            return np.zeros((0, B, D)), np.zeros((0, B), dtype=bool)
        return arr, getattr(self, which.replace("context", "valid"))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.frames, self.valid, self.future_context, self.left_context, self.stream_ids):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass
class DirectionRun:
    tapes: list
    cs: np.ndarray
    rs: np.ndarray


@dataclass
class ForwardCache:
    model: Model
    xs: np.ndarray
    valid: np.ndarray
    runs: list[list[DirectionRun]]
    head_in: np.ndarray
    out_start: int
    out_end: int
    log_probs: np.ndarray = field(repr=False)


def _zero_state(p: LstmLayerParams, batch: int) -> LayerState:
    return LayerState.zeros(p, batch)


def _run_direction(dp: DirectionParams, xs, valid, init: LayerState, lower_cs, mask, reverse: bool) -> DirectionRun:
    T, B = valid.shape
    p = dp.lstm
    cs = np.zeros((T, B, p.cell_dim))
    rs = np.zeros((T, B, p.proj_dim))
    tapes = [None] * T
    state = init
    if dp.highway is not None and mask is None:
        mask = DropoutMask.identity(p.cell_dim, B)
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        v = valid[t]
        if not v.any():
            cs[t], rs[t] = state.c, state.r
            continue
        if dp.highway is None:
            new, _, tape = cells.lstm_step(p, xs[t], state)
        else:
            new, _, tape = cells.highway_step(p, dp.highway, xs[t], state, lower_cs[t], mask)
        if not v.all():
            col = v[:, None]
            new = LayerState(np.where(col, new.c, state.c), np.where(col, new.r, state.r))
        state = new
        cs[t], rs[t] = state.c, state.r
        tapes[t] = tape
    return DirectionRun(tapes, cs, rs)


def stack_forward(
    model: Model,
    xs: np.ndarray,
    valid: np.ndarray,
    init_states: list[LayerState] | None = None,
    masks: dict | None = None,
    out_start: int = 0,
    out_end: int | None = None,
) -> ForwardCache:
    """Run the whole stack over ``xs`` and the softmax head over ``[out_start, out_end)``."""
    spec = model.spec
    xs = np.asarray(xs, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if xs.ndim != 3 or xs.shape[2] != spec.input_dim or valid.shape != xs.shape[:2]:
        raise ShapeError(f"frames {xs.shape} / mask {valid.shape} do not fit input dim {spec.input_dim}")
    T, B = valid.shape
    out_end = T if out_end is None else out_end
    runs: list[list[DirectionRun]] = []
    inp = xs
    with mac_scope("recurrent"):
        for idx, dirs in enumerate(model.layers):
            layer_runs = []
            for d, dp in enumerate(dirs):
                if d == 0 and init_states is not None:
                    init = init_states[idx]
                else:
                    init = _zero_state(dp.lstm, B)
                lower = runs[idx - 1][d].cs if dp.highway is not None else None
                mask = masks.get((idx, d)) if masks else None
                layer_runs.append(_run_direction(dp, inp, valid, init, lower, mask, reverse=(d == 1)))
            runs.append(layer_runs)
            inp = np.concatenate([r.rs for r in layer_runs], axis=-1)
    head_in = inp[out_start:out_end]
    with mac_scope("output"):
        logits = linear(head_in, model.W_out) + model.b_out
    return ForwardCache(model, xs, valid, runs, head_in, out_start, out_end, log_softmax(logits))


def stack_backward(cache: ForwardCache, d_logits: np.ndarray):
    """Reverse-mode pass; returns ``(grads, d_inputs)``.

    ``d_logits`` has the shape of ``cache.log_probs``.  No gradient flows into
    initial (carried) states; invalid frames contribute nothing.
    """
    model = cache.model
    spec = model.spec
    T, B = cache.valid.shape
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.shape != cache.log_probs.shape:
        raise ShapeError(f"gradient shape {d_logits.shape} != output shape {cache.log_probs.shape}")
    grads = model.zero_grads()
    flat_d = d_logits.reshape(-1, spec.output_dim)
    grads["out.W"] += flat_d.T @ cache.head_in.reshape(-1, spec.head_dim)
    grads["out.b"] += flat_d.sum(axis=0)
    d_inp = np.zeros((T, B, spec.head_dim))
    d_inp[cache.out_start:cache.out_end] = d_logits @ model.W_out

    extra_dc = [None] * spec.n_dirs
    for idx in range(len(model.layers) - 1, -1, -1):
        dirs = model.layers[idx]
        width = spec.layers[idx].out_dim
        next_d = np.zeros((T, B, spec.layer_input_dim(idx)))
        lower_dc = [None] * spec.n_dirs
        for d, dp in enumerate(dirs):
            run = cache.runs[idx][d]
            G_r = d_inp[:, :, d * width:(d + 1) * width]
            G_c = extra_dc[d]
            dgrads = cells.zero_grads(dp.lstm, dp.highway)
            if dp.highway is not None:
                lower_dc[d] = np.zeros((T, B, dp.lstm.cell_dim))
            dc = np.zeros((B, dp.lstm.cell_dim))
            dr = np.zeros((B, dp.lstm.proj_dim))
            order = range(T) if d == 1 else range(T - 1, -1, -1)
            for t in order:
                dc_t = dc if G_c is None else dc + G_c[t]
                dr_t = dr + G_r[t]
                tape = run.tapes[t]
                if tape is None:
                    dc, dr = dc_t, dr_t
                    continue
                v = cache.valid[t]
                if v.all():
                    dx, dprev, dlow = cells.accumulate_step_backward(tape, dc_t, dr_t, dgrads)
                    dc, dr = dprev.c, dprev.r
                else:
                    col = v[:, None]
                    dx, dprev, dlow = cells.accumulate_step_backward(
                        tape, np.where(col, dc_t, 0.0), np.where(col, dr_t, 0.0), dgrads
                    )
                    dc = np.where(col, dprev.c, dc_t)
                    dr = np.where(col, dprev.r, dr_t)
                next_d[t] += dx
                if dlow is not None:
                    lower_dc[d][t] += dlow
            prefix = f"l{idx}.{DIRECTIONS[d]}."
            for name, g in dgrads.items():
                grads[prefix + name] += g
        extra_dc = lower_dc
        d_inp = next_d
    return grads, d_inp


# ---------------------------------------------------------------------------
# public evaluation modes


def _check_utterance(utterance):
    utterance = np.asarray(utterance, dtype=np.float64)
    if utterance.ndim != 2 or utterance.shape[0] < 1:
        raise ValueError("utterance must be a non-empty (T, input_dim) array")
    return utterance


def forward_full(model: Model, utterance, masks: dict | None = None):
    """Whole-utterance evaluation; returns ``(posteriors (T, K), cache)``."""
    utterance = _check_utterance(utterance)
    T = utterance.shape[0]
    cache = stack_forward(model, utterance[:, None, :], np.ones((T, 1), dtype=bool), masks=masks)
    return np.exp(cache.log_probs[:, 0, :]), cache


def backward_full(cache: ForwardCache, d_logits):
    """Gradient for a :func:`forward_full` cache; ``d_logits`` is ``(T, K)``."""
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_logits.ndim == 2:
        d_logits = d_logits[:, None, :]
    grads, _ = stack_backward(cache, d_logits)
    return grads


def _carry_check(model: Model, batch: ChunkBatch):
    if batch.carried_states is None:
        return None
    if len(batch.carried_states) != len(model.layers):
        raise StateMismatchError("need one carried state per layer")
    if batch.stream_ids is not None and batch.carried_ids is not None:
        active = batch.stream_ids >= 0
        if np.any(batch.carried_ids[active] != batch.stream_ids[active]):
            raise StateMismatchError("carried states belong to different streams than this chunk")
    B = batch.n_streams
    for idx, (st, dirs) in enumerate(zip(batch.carried_states, model.layers)):
        p = dirs[0].lstm
        if st.c.shape != (B, p.cell_dim) or st.r.shape != (B, p.proj_dim):
            raise StateMismatchError(f"layer {idx}: carried state shape mismatch")
    return batch.carried_states


def forward_lc_chunk(model: Model, batch: ChunkBatch, masks: dict | None = None):
    """Latency-controlled evaluation of one chunk.

    Returns ``(posteriors (N_c, B, K), carried_states, cache)`` where
    ``carried_states`` are the forward-direction states after the last main
    frame.  Look-ahead frames feed the backward direction only; they yield no
    output.
    """
    init = _carry_check(model, batch)
    fut, fut_valid = batch._ctx("future_context")
    xs = np.concatenate([batch.frames, fut], axis=0)
    valid = np.concatenate([batch.valid, fut_valid], axis=0)
    n_c = batch.n_main
    cache = stack_forward(model, xs, valid, init_states=init, masks=masks, out_start=0, out_end=n_c)
    carried = [LayerState(runs[0].cs[n_c - 1].copy(), runs[0].rs[n_c - 1].copy()) for runs in cache.runs]
    return np.exp(cache.log_probs), carried, cache


def backward_lc_chunk(cache: ForwardCache, d_logits):
    grads, _ = stack_backward(cache, d_logits)
    return grads


def csc_chunk_forward(model: Model, batch: ChunkBatch, masks: dict | None = None):
    """Context-sensitive chunk evaluation; both directions start from zero.

    Returns ``(posteriors (N_c, B, K), cache)``; context frames yield no output.
    """
    left, left_valid = batch._ctx("left_context")
    fut, fut_valid = batch._ctx("future_context")
    xs = np.concatenate([left, batch.frames, fut], axis=0)
    valid = np.concatenate([left_valid, batch.valid, fut_valid], axis=0)
    n_l = left.shape[0]
    cache = stack_forward(model, xs, valid, masks=masks, out_start=n_l, out_end=n_l + batch.n_main)
    return np.exp(cache.log_probs), cache


def _window(utterance, start, stop):
    """Frames [start, stop) of an utterance, zero-padded and masked outside it."""
    T, D = utterance.shape
    n = stop - start
    out = np.zeros((n, 1, D))
    valid = np.zeros((n, 1), dtype=bool)
    lo, hi = max(start, 0), min(stop, T)
    if hi > lo:
        out[lo - start:hi - start, 0] = utterance[lo:hi]
        valid[lo - start:hi - start, 0] = True
    return out, valid


def utterance_chunks(utterance, n_c: int, n_r: int = 0, n_l: int = 0):
    """Split one utterance into single-stream :class:`ChunkBatch` objects.

    Chunks cover ``N_c`` main frames each (the last may be partly masked) and
    carry ``N_l``/``N_r`` true neighbouring frames, masked past the edges.
    """
    utterance = _check_utterance(utterance)
    if n_c < 1 or n_r < 0 or n_l < 0:
        raise ValueError("need N_c >= 1 and non-negative context sizes")
    T = utterance.shape[0]
    chunks = []
    for start in range(0, T, n_c):
        frames, valid = _window(utterance, start, start + n_c)
        fut, fut_valid = _window(utterance, start + n_c, start + n_c + n_r)
        left, left_valid = _window(utterance, start - n_l, start)
        chunks.append(ChunkBatch(
            frames, valid, fut, fut_valid,
            stream_ids=np.zeros(1, dtype=int), carried_ids=np.zeros(1, dtype=int),
            left_context=left, left_valid=left_valid,
        ))
    return chunks


def forward_lc_utterance(model: Model, utterance, n_c: int, n_r: int):
    """Posteriors ``(T, K)`` of an utterance evaluated chunk by chunk in LC mode."""
    utterance = _check_utterance(utterance)
    carried = None
    outs = []
    for chunk in utterance_chunks(utterance, n_c, n_r):
        chunk.carried_states = carried
        post, carried, _ = forward_lc_chunk(model, chunk)
        outs.append(post[:, 0])
    return np.concatenate(outs)[: utterance.shape[0]]


def forward_csc_utterance(model: Model, utterance, n_c: int, n_l: int, n_r: int):
    utterance = _check_utterance(utterance)
    outs = [csc_chunk_forward(model, ch)[0][:, 0] for ch in utterance_chunks(utterance, n_c, n_r, n_l)]
    return np.concatenate(outs)[: utterance.shape[0]]


def frame_cross_entropy(log_probs: np.ndarray, labels: np.ndarray, valid: np.ndarray):
    """Mean frame cross-entropy over valid frames and its gradient w.r.t. logits."""
    valid = np.asarray(valid, dtype=bool)
    n = int(valid.sum())
    d_logits = np.zeros_like(log_probs)
    if n == 0:
        return 0.0, d_logits, 0
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(log_probs, safe[..., None], axis=-1)[..., 0]
    loss = -float(picked[valid].sum()) / n
    probs = np.exp(log_probs)
    onehot = np.zeros_like(log_probs)
    np.put_along_axis(onehot, safe[..., None], 1.0, axis=-1)
    d_logits = np.where(valid[..., None], (probs - onehot) / n, 0.0)
    return loss, d_logits, n


def loglike_grad_to_logits(log_probs: np.ndarray, d_loglikes: np.ndarray) -> np.ndarray:
    """Chain a gradient w.r.t. log-posteriors through the log-softmax."""
    probs = np.exp(log_probs)
    return d_loglikes - probs * d_loglikes.sum(axis=-1, keepdims=True)
