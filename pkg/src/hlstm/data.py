"""Utterance containers and the dataset file format.

A dataset file starts with two text lines, then binary records::

    HLSTM-DATASET 1\n
    {"feature_dim": D, "lengths": [...], "n_utterances": N, ...}\n
    for each utterance: T*D float64 little-endian features (row-major),
                        T int32 little-endian labels

The JSON line is written with sorted keys, so equal datasets give equal bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

MAGIC_LINE = b"HLSTM-DATASET 1\n"


@dataclass
class Utterance:
    features: np.ndarray
    labels: np.ndarray
    uid: int = 0

    def __len__(self) -> int:
        return self.features.shape[0]


def write_dataset(path, utterances: list[Utterance], meta: dict | None = None) -> None:
    if not utterances:
        raise ValueError("refusing to write an empty dataset")
    dim = utterances[0].features.shape[1]
    header = dict(meta or {})
    header.update(feature_dim=dim, lengths=[len(u) for u in utterances], n_utterances=len(utterances))
    with open(path, "wb") as fh:
        fh.write(MAGIC_LINE)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for u in utterances:
            if u.features.shape[1] != dim:
                raise ValueError("all utterances must share the feature dimension")
            fh.write(np.ascontiguousarray(u.features, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(u.labels, dtype="<i4").tobytes())


def read_dataset(path) -> tuple[list[Utterance], dict]:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC_LINE:
            raise ValueError(f"{path}: not a dataset file")
        header = json.loads(fh.readline())
        dim = header["feature_dim"]
        out = []
        for uid, T in enumerate(header["lengths"]):
            feats = np.frombuffer(fh.read(8 * T * dim), dtype="<f8").reshape(T, dim).astype(np.float64)
            labels = np.frombuffer(fh.read(4 * T), dtype="<i4").astype(np.int64)
            out.append(Utterance(feats, labels, uid))
    return out, header
