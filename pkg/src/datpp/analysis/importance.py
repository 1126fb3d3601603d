"""Accumulated attention importance of deformed keys.

The deepest deformable layer's attention, averaged over its queries, scores
that layer's keys. Each earlier layer is scored by weighting its queries with
the importance that arrives at their positions from the layer above: every
key of the later layer hands its score to the query cell nearest to its
(continuous) location, and the earlier layer's attention rows are summed
under those weights. Scores are normalized to sum to one per layer and per
batch element.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dmha import DmhaTrace
from ..errors import ConfigError, DimensionError, FormatError
from ..sampling import denormalize


@dataclass
class LayerImportance:
    """Importance of one deformable layer.

    ``key_locations`` is B x G x N_s x 2 in normalized (x, y);
    ``scores`` is B x G x N_s; ``attention`` is B x M x HW x N_s.
    """

    name: str
    key_locations: np.ndarray
    scores: np.ndarray
    attention: np.ndarray
    feature_size: tuple
    heads_per_group: int

    def query_row(self, y: int, x: int, batch: int = 0) -> np.ndarray:
        """Attention of the query at grid cell (y, x) over this layer's keys, M x N_s."""
        h, w = self.feature_size
        if not (0 <= y < h and 0 <= x < w):
            raise ConfigError(f"query ({y},{x}) outside the {h}x{w} grid of {self.name}")
        return self.attention[batch, :, y * w + x, :]

    def to_lines(self, batch: int = 0) -> list[str]:
        lines = []
        for g in range(self.scores.shape[1]):
            lines.append(f"# {self.name} batch {batch} group {g}")
            for (x, y), s in zip(self.key_locations[batch, g], self.scores[batch, g]):
                lines.append(f"{x:.9g} {y:.9g} {s:.9g}")
        return lines


@dataclass
class ImportanceMap:
    layers: list[LayerImportance]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


def read_importance_lines(lines) -> list[np.ndarray]:
    """Parse ``x y score`` records; one array (N x 3) per ``#`` header."""
    blocks: list[list[list[float]]] = []
    for n, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            blocks.append([])
            continue
        parts = line.split()
        if len(parts) != 3 or not blocks:
            raise FormatError(f"line {n}: expected 'x y score' after a header, got {line!r}")
        blocks[-1].append([float(v) for v in parts])
    return [np.array(b).reshape(-1, 3) for b in blocks]


def _group_mean(attn: np.ndarray, hpg: int) -> np.ndarray:
    """Average heads within each group: B x M x HW x N_s -> B x G x HW x N_s."""
    b, m, q, n = attn.shape
    return attn.reshape(b, m // hpg, hpg, q, n).mean(axis=2)


def _nearest_cell(locs: np.ndarray, h: int, w: int) -> np.ndarray:
    """Flat index of the grid cell nearest to each normalized (x, y) location."""
    px = np.clip(np.rint(denormalize(locs[..., 0], w)), 0, w - 1).astype(np.int64)
    py = np.clip(np.rint(denormalize(locs[..., 1], h)), 0, h - 1).astype(np.int64)
    return py * w + px


def _normalize(s: np.ndarray) -> np.ndarray:
    tot = s.reshape(s.shape[0], -1).sum(axis=1)
    tot = np.where(tot > 0, tot, 1.0)
    return s / tot[:, None, None]


def importance_map(traces: list[DmhaTrace], names: list[str] | None = None) -> ImportanceMap:
    """Importance of every layer's deformed keys; ``traces`` ordered shallow to deep."""
    if not traces:
        raise ConfigError("importance_map needs at least one attention trace")
    names = names or [f"layer{i}" for i in range(len(traces))]
    if len(names) != len(traces):
        raise ConfigError(f"{len(names)} names for {len(traces)} traces")
    batch = traces[0].attention.shape[0]
    for t in traces:
        if t.attention.shape[0] != batch:
            raise DimensionError("all traces must come from the same batch")
        h, w = t.feature_size
        if t.attention.shape[2] != h * w or t.attention.shape[3] != t.num_samples:
            raise DimensionError(f"trace attention {t.attention.shape} inconsistent with "
                                 f"{h}x{w} queries and {t.num_samples} keys")

    out: list[LayerImportance | None] = [None] * len(traces)
    weights = None  # B x HW query weights of the current layer
    for i in range(len(traces) - 1, -1, -1):
        t = traces[i]
        h, w = t.feature_size
        a = _group_mean(t.attention, t.heads_per_group)
        if weights is None:
            scores = a.mean(axis=2)
        else:
            scores = np.einsum("bq,bgqn->bgn", weights, a)
        scores = _normalize(scores)
        keys = t.key_locations()
        out[i] = LayerImportance(names[i], keys, scores, t.attention, (h, w), t.heads_per_group)
        if i > 0:
            ph, pw = traces[i - 1].feature_size
            cells = _nearest_cell(keys, ph, pw).reshape(batch, -1)
            weights = np.zeros((batch, ph * pw))
            for b in range(batch):
                np.add.at(weights[b], cells[b], scores[b].reshape(-1))
    return ImportanceMap(out)
