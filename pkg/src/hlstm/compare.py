"""Chunked-versus-full comparisons and counted compute."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .network import (
    ChunkBatch,
    Model,
    csc_chunk_forward,
    forward_csc_utterance,
    forward_full,
    forward_lc_chunk,
    forward_lc_utterance,
)
from .tensor import RngStream, count_macs


def lc_saving_formula(n_l: int, n_c: int, n_r: int) -> Fraction:
    return Fraction(n_l, n_l + n_c + n_r)


def count_chunk_macs(model: Model, n_l: int, n_c: int, n_r: int, n_streams: int = 1, seed: int = 0) -> dict:
    """Recurrent-stack multiply-accumulates of one fully valid chunk in LC and CSC mode.

    The softmax head runs on the ``N_c`` main frames in both modes and is
    reported separately.
    """
    rng = RngStream(seed)
    D, B = model.spec.input_dim, n_streams
    batch = ChunkBatch(
        rng.normal((n_c, B, D)), np.ones((n_c, B), dtype=bool),
        rng.normal((n_r, B, D)), np.ones((n_r, B), dtype=bool),
        left_context=rng.normal((n_l, B, D)), left_valid=np.ones((n_l, B), dtype=bool),
    )
    with count_macs() as lc:
        forward_lc_chunk(model, batch)
    with count_macs() as csc:
        csc_chunk_forward(model, batch)
    saving = Fraction(csc["recurrent"] - lc["recurrent"], csc["recurrent"])
    return {
        "lc_recurrent": lc["recurrent"],
        "csc_recurrent": csc["recurrent"],
        "lc_output": lc["output"],
        "csc_output": csc["output"],
        "saving": saving,
        "formula": lc_saving_formula(n_l, n_c, n_r),
    }


def max_divergence(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def chunk_divergence(model: Model, utterances, n_c: int, n_r: int, n_l: int) -> dict:
    """Largest posterior difference of each chunked mode against full evaluation."""
    out = {"lc": 0.0, "lc_full_lookahead": 0.0, "csc": 0.0}
    for u in utterances:
        full, _ = forward_full(model, u.features)
        T = len(u)
        out["lc"] = max(out["lc"], max_divergence(forward_lc_utterance(model, u.features, n_c, n_r), full))
        covering = forward_lc_utterance(model, u.features, n_c, T)
        out["lc_full_lookahead"] = max(out["lc_full_lookahead"], max_divergence(covering, full))
        if model.spec.bidirectional:
            csc = forward_csc_utterance(model, u.features, n_c, n_l, n_r)
            out["csc"] = max(out["csc"], max_divergence(csc, full))
    if not model.spec.bidirectional:
        del out["csc"]
    return out
