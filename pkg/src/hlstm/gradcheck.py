"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cells import LayerState
from .network import (
    ChunkBatch,
    LayerSpec,
    Model,
    StackSpec,
    frame_cross_entropy,
    sample_highway_masks,
    stack_backward,
    stack_forward,
)
from .tensor import RngStream

LAYER_KINDS = ("lstm", "lstmp", "hlstm")
STACK_MODES = ("uni", "blstm", "lc")


def relative_error(analytic, numeric, floor: float = 1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(loss_fn, array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    out = np.zeros_like(array)
    flat = array.reshape(-1)
    grad = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn()
        flat[k] = orig - eps
        down = loss_fn()
        flat[k] = orig
        grad[k] = (up - down) / (2 * eps)
    return out


def randomize(model: Model, rng: RngStream, scale: float = 0.5) -> Model:
    for arr in model.named_tensors().values():
        arr[...] = rng.uniform(arr.shape, -scale, scale)
    return model


def toy_spec(kind: str, bidirectional: bool, input_dim=3, cell_dim=4, proj_dim=3, output_dim=5, n_layers=2):
    proj = None if kind == "lstm" else proj_dim
    layers = [LayerSpec("lstm", cell_dim, proj)]
    upper = "highway" if kind == "hlstm" else "lstm"
    layers += [LayerSpec(upper, cell_dim, proj) for _ in range(n_layers - 1)]
    return StackSpec(input_dim, output_dim, tuple(layers), bidirectional)


@dataclass
class GradCheckResult:
    kind: str
    mode: str
    max_rel_error: float
    worst_param: str
    n_checked: int


def _problem(kind: str, mode: str, seed: int):
    """Build (model, loss_fn, analytic_grads_fn) for one toy configuration."""
    rng = RngStream(seed)
    spec = toy_spec(kind, bidirectional=(mode != "uni"))
    model = randomize(Model.init(spec, rng), rng)
    B, D = 2, spec.input_dim
    masks = sample_highway_masks(model, rng, 0.3, B) if kind == "hlstm" else None
    if mode == "lc":
        n_c, n_r = 4, 3
        frames = rng.normal((n_c, B, D))
        future = rng.normal((n_r, B, D))
        valid = np.ones((n_c, B), dtype=bool)
        fut_valid = np.ones((n_r, B), dtype=bool)
        valid[3:, 1] = False
        fut_valid[:, 1] = False
        carried = [
            LayerState(rng.uniform((B, ls.cell_dim), -1, 1), rng.uniform((B, ls.out_dim), -1, 1))
            for ls in spec.layers
        ]
        batch = ChunkBatch(frames, valid, future, fut_valid, carried_states=carried)
        xs = np.concatenate([frames, future])
        all_valid = np.concatenate([valid, fut_valid])
        labels = rng.integers(0, spec.output_dim, (n_c, B))
        out_valid = valid

        def run():
            return stack_forward(model, xs, all_valid, init_states=batch.carried_states, masks=masks, out_end=n_c)
    else:
        T = 7
        xs = rng.normal((T, B, D))
        all_valid = np.ones((T, B), dtype=bool)
        all_valid[5:, 1] = False
        labels = rng.integers(0, spec.output_dim, (T, B))
        out_valid = all_valid

        def run():
            return stack_forward(model, xs, all_valid, masks=masks)

    def loss_fn():
        return frame_cross_entropy(run().log_probs, labels, out_valid)[0]

    def analytic():
        cache = run()
        _, d_logits, _ = frame_cross_entropy(cache.log_probs, labels, out_valid)
        return stack_backward(cache, d_logits)[0]

    return model, loss_fn, analytic


def check_configuration(kind: str, mode: str, seed: int = 0, eps: float = 1e-5) -> GradCheckResult:
    model, loss_fn, analytic = _problem(kind, mode, seed)
    grads = analytic()
    worst, worst_name, n = 0.0, "", 0
    for name, arr in model.named_tensors().items():
        num = numeric_gradient(loss_fn, arr, eps)
        err = float(relative_error(grads[name], num).max())
        n += arr.size
        if err > worst:
            worst, worst_name = err, name
    return GradCheckResult(kind, mode, worst, worst_name, n)


def run_suite(seed: int = 0, eps: float = 1e-5) -> list[GradCheckResult]:
    return [check_configuration(k, m, seed, eps) for k in LAYER_KINDS for m in STACK_MODES]
