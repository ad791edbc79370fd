"""Single-timestep LSTM, LSTMP and highway-LSTMP computations.

All step functions accept either one vector per argument or a batch of row
vectors (``(batch, dim)``); parameters are shared across the batch.  The
recurrent carrier is the projected output ``r``; a layer without projection
uses ``r = m``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, RngStream, ShapeError, linear, sigmoid

GATES = ("i", "f", "c", "o")


@dataclass
class LstmLayerParams:
    W_xi: np.ndarray
    W_xf: np.ndarray
    W_xc: np.ndarray
    W_xo: np.ndarray
    W_mi: np.ndarray
    W_mf: np.ndarray
    W_mc: np.ndarray
    W_mo: np.ndarray
    w_ci: np.ndarray
    w_cf: np.ndarray
    w_co: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray
    W_proj: np.ndarray | None = None

    @property
    def input_dim(self) -> int:
        return self.W_xi.shape[1]

    @property
    def cell_dim(self) -> int:
        return self.W_xi.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.cell_dim if self.W_proj is None else self.W_proj.shape[0]

    def validate(self) -> None:
        n_in, n_cell, n_rec = self.input_dim, self.cell_dim, self.proj_dim
        for g in GATES:
            _check(getattr(self, f"W_x{g}"), (n_cell, n_in), f"W_x{g}")
            _check(getattr(self, f"W_m{g}"), (n_cell, n_rec), f"W_m{g}")
            _check(getattr(self, f"b_{g}"), (n_cell,), f"b_{g}")
        for g in ("i", "f", "o"):
            _check(getattr(self, f"w_c{g}"), (n_cell,), f"w_c{g}")
        if self.W_proj is not None:
            _check(self.W_proj, (n_rec, n_cell), "W_proj")

    def named(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is not None:
                yield f.name, value


@dataclass
class HighwayParams:
    W_xd: np.ndarray
    w_cd: np.ndarray
    w_ld: np.ndarray
    b_d: np.ndarray

    def validate(self, p: LstmLayerParams) -> None:
        _check(self.W_xd, (p.cell_dim, p.input_dim), "W_xd")
        for name in ("w_cd", "w_ld", "b_d"):
            _check(getattr(self, name), (p.cell_dim,), name)

    def named(self):
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class LayerState:
    c: np.ndarray
    r: np.ndarray

    @classmethod
    def zeros(cls, p: LstmLayerParams, batch: int | None = None) -> LayerState:
        lead = () if batch is None else (batch,)
        return cls(np.zeros(lead + (p.cell_dim,)), np.zeros(lead + (p.proj_dim,)))


@dataclass
class DropoutMask:
    """Inverted-dropout mask for the highway term; entries are 0 or 1/(1-rate)."""

    mask: np.ndarray
    rate: float

    @classmethod
    def identity(cls, dim: int, batch: int | None = None) -> DropoutMask:
        shape = (dim,) if batch is None else (batch, dim)
        return cls(np.ones(shape), 0.0)


@dataclass
class StepTape:
    p: LstmLayerParams
    hp: HighwayParams | None
    x: np.ndarray
    prev: LayerState
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    m: np.ndarray
    lower_c: np.ndarray | None = None
    mask: np.ndarray | None = None
    d: np.ndarray | None = None


def _check(a, shape, name):
    if a is None or a.shape != shape:
        got = None if a is None else a.shape
        raise ShapeError(f"{name}: expected shape {shape}, got {got}")


def init_lstm_params(
    rng: RngStream,
    input_dim: int,
    cell_dim: int,
    proj_dim: int | None = None,
    scale: float = 0.05,
    forget_bias: float = 1.0,
) -> LstmLayerParams:
    """Uniform(-scale, scale) matrices, zero peepholes and biases except the forget gate."""
    rec_dim = cell_dim if proj_dim is None else proj_dim
    kw = {}
    for g in GATES:
        kw[f"W_x{g}"] = rng.uniform((cell_dim, input_dim), -scale, scale)
    for g in GATES:
        kw[f"W_m{g}"] = rng.uniform((cell_dim, rec_dim), -scale, scale)
    for g in ("i", "f", "o"):
        kw[f"w_c{g}"] = np.zeros(cell_dim)
    for g in GATES:
        kw[f"b_{g}"] = np.zeros(cell_dim)
    kw["b_f"][:] = forget_bias
    if proj_dim is not None:
        kw["W_proj"] = rng.uniform((proj_dim, cell_dim), -scale, scale)
    return LstmLayerParams(**kw)


def init_highway_params(
    rng: RngStream, input_dim: int, cell_dim: int, scale: float = 0.05, carry_bias: float = 0.0
) -> HighwayParams:
    return HighwayParams(
        W_xd=rng.uniform((cell_dim, input_dim), -scale, scale),
        w_cd=np.zeros(cell_dim),
        w_ld=np.zeros(cell_dim),
        b_d=np.full(cell_dim, float(carry_bias)),
    )


def make_dropout_mask(rng: RngStream, dim: int, rate: float, batch: int | None = None) -> DropoutMask:
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1], got {rate}")
    shape = (dim,) if batch is None else (batch, dim)
    if rate == 0.0:
        return DropoutMask(np.ones(shape), 0.0)
    if rate == 1.0:
        return DropoutMask(np.zeros(shape), 1.0)
    keep = rng.random(shape) >= rate
    return DropoutMask(keep / (1.0 - rate), float(rate))


def _check_inputs(p, x, prev):
    if x.shape[-1] != p.input_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != layer input dim {p.input_dim}")
    if prev.c.shape[-1] != p.cell_dim or prev.r.shape[-1] != p.proj_dim:
        raise ShapeError("previous state does not match layer dims")


def _step(p, hp, x, prev, lower_c=None, mask=None):
    x = np.asarray(x, dtype=DTYPE)
    _check_inputs(p, x, prev)
    c_prev, r_prev = prev.c, prev.r
    i = sigmoid(linear(x, p.W_xi) + linear(r_prev, p.W_mi) + p.w_ci * c_prev + p.b_i)
    f = sigmoid(linear(x, p.W_xf) + linear(r_prev, p.W_mf) + p.w_cf * c_prev + p.b_f)
    g = np.tanh(linear(x, p.W_xc) + linear(r_prev, p.W_mc) + p.b_c)
    c = f * c_prev + i * g
    d = None
    if hp is not None:
        if lower_c.shape[-1] != p.cell_dim:
            raise ShapeError(f"lower cell dim {lower_c.shape[-1]} != {p.cell_dim}")
        d = sigmoid(hp.b_d + linear(x, hp.W_xd) + hp.w_cd * c_prev + hp.w_ld * lower_c)
        c = c + d * (mask * lower_c)
    o = sigmoid(linear(x, p.W_xo) + linear(r_prev, p.W_mo) + p.w_co * c + p.b_o)
    tanh_c = np.tanh(c)
    m = o * tanh_c
    r = m if p.W_proj is None else linear(m, p.W_proj)
    tape = StepTape(p, hp, x, prev, i, f, g, o, c, tanh_c, m, lower_c, mask, d)
    return LayerState(c, r), r, tape


def lstm_step(p: LstmLayerParams, x, prev: LayerState):
    """One peephole LSTM(P) step; returns ``(new_state, y, tape)`` with ``y = r``."""
    return _step(p, None, x, prev)


def highway_step(p: LstmLayerParams, hp: HighwayParams, x, prev: LayerState, lower_c, mask: DropoutMask | None = None):
    """LSTM(P) step with a carry-gated direct link from the lower layer's cell.

    The carry gate sees the undropped ``lower_c``; only the cell-update term
    ``d * lower_c`` is masked.
    """
    lower_c = np.asarray(lower_c, dtype=DTYPE)
    m = np.ones_like(lower_c) if mask is None else mask.mask
    return _step(p, hp, x, prev, lower_c, m)


def zero_grads(p: LstmLayerParams, hp: HighwayParams | None = None) -> dict[str, np.ndarray]:
    grads = {name: np.zeros_like(v) for name, v in p.named()}
    if hp is not None:
        grads.update({name: np.zeros_like(v) for name, v in hp.named()})
    return grads


def _outer_sum(delta, inp):
    # sum over batch rows of delta_b inp_b^T
    if delta.ndim == 1:
        return np.outer(delta, inp)
    return delta.T @ inp


def _rowsum(a):
    return a if a.ndim == 1 else a.sum(axis=0)


def accumulate_step_backward(tape: StepTape, d_c, d_r, grads: dict[str, np.ndarray]):
    """Backpropagate through one step, adding parameter gradients into ``grads``.

    ``d_c`` and ``d_r`` are the total loss gradients with respect to the step's
    output cell state and recurrent output.  Returns ``(dx, d_prev, d_lower_c)``
    where ``d_lower_c`` is None for a plain step.
    """
    p, hp = tape.p, tape.hp
    c_prev, r_prev, x = tape.prev.c, tape.prev.r, tape.x
    if p.W_proj is None:
        d_m = d_r
    else:
        grads["W_proj"] += _outer_sum(d_r, tape.m)
        d_m = d_r @ p.W_proj
    d_o = d_m * tape.tanh_c
    d_c = d_c + d_m * tape.o * (1.0 - tape.tanh_c**2)
    da_o = d_o * tape.o * (1.0 - tape.o)
    d_c = d_c + da_o * p.w_co
    grads["w_co"] += _rowsum(da_o * tape.c)

    da_i = d_c * tape.g * tape.i * (1.0 - tape.i)
    da_f = d_c * c_prev * tape.f * (1.0 - tape.f)
    da_g = d_c * tape.i * (1.0 - tape.g**2)
    d_c_prev = d_c * tape.f + da_i * p.w_ci + da_f * p.w_cf
    grads["w_ci"] += _rowsum(da_i * c_prev)
    grads["w_cf"] += _rowsum(da_f * c_prev)

    dx = 0.0
    d_r_prev = 0.0
    for gate, da in (("i", da_i), ("f", da_f), ("c", da_g), ("o", da_o)):
        W_x = getattr(p, f"W_x{gate}")
        W_m = getattr(p, f"W_m{gate}")
        grads[f"W_x{gate}"] += _outer_sum(da, x)
        grads[f"W_m{gate}"] += _outer_sum(da, r_prev)
        grads[f"b_{gate}"] += _rowsum(da)
        dx = dx + da @ W_x
        d_r_prev = d_r_prev + da @ W_m

    d_lower_c = None
    if hp is not None:
        hw = tape.mask * tape.lower_c
        da_d = d_c * hw * tape.d * (1.0 - tape.d)
        d_lower_c = d_c * tape.d * tape.mask + da_d * hp.w_ld
        d_c_prev = d_c_prev + da_d * hp.w_cd
        dx = dx + da_d @ hp.W_xd
        grads["W_xd"] += _outer_sum(da_d, x)
        grads["w_cd"] += _rowsum(da_d * c_prev)
        grads["w_ld"] += _rowsum(da_d * tape.lower_c)
        grads["b_d"] += _rowsum(da_d)
    return dx, LayerState(d_c_prev, d_r_prev), d_lower_c


def lstm_step_backward(tape: StepTape, grad_out):
    """Gradients of one step given ``grad_out = (d_state_next, dy)``.

    ``d_state_next`` is a :class:`LayerState` holding the loss gradient with
    respect to the emitted state (as consumed by the next timestep) and ``dy``
    the gradient with respect to the emitted output.  Returns
    ``(param_grads, dx, d_prev)``; highway steps also report ``param_grads
    ["lower_c"]``.
    """
    d_state, dy = grad_out
    grads = zero_grads(tape.p, tape.hp)
    dx, d_prev, d_lower = accumulate_step_backward(tape, d_state.c, d_state.r + dy, grads)
    if d_lower is not None:
        grads["lower_c"] = d_lower
    return grads, dx, d_prev
