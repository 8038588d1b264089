"""Batch-level percentile selection of reasoning / perception tokens."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, UsageError


class TokenIndex(NamedTuple):
    b: int
    i: int
    t: int


@dataclass(frozen=True)
class SelectionConfig:
    """Fractions select tokens; weights scale their surrogate terms.

    ``overlap_rule="reasoning"`` gives tokens in both sets the reasoning
    weight; ``"additive"`` sums both weights instead.
    """

    alpha_r: float = 0.3
    alpha_p: float = 0.3
    gamma_r: float = 1.0
    gamma_p: float = 0.5
    overlap_rule: str = "reasoning"
    entropy_top_p: float = 0.95
    renormalize_entropy: bool = False

    def __post_init__(self):
        for name in ("alpha_r", "alpha_p"):
            a = getattr(self, name)
            if not 0.0 < a <= 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {a}")
        if self.gamma_r < 0 or self.gamma_p < 0:
            raise ConfigurationError("token weights must be nonnegative")
        if self.overlap_rule not in ("reasoning", "additive"):
            raise ConfigurationError(f"unknown overlap rule {self.overlap_rule!r}")


def _n_selected(alpha, n):
    # floor with slack for values like 0.3 * 10 = 2.9999999999999996
    return int(math.floor(alpha * n + 1e-9))


def percentile_threshold(scores, alpha):
    """Score at the ``(1 - alpha)`` quantile of the batch.

    Sorted ascending, the threshold sits at 0-based index
    ``ceil((1 - alpha) * N)`` (clamped into range), so exactly
    ``floor(alpha * N)`` scores lie at or above it when all are distinct.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise UsageError("cannot take a percentile of an empty score list")
    if not 0.0 < alpha <= 1.0:
        raise UsageError(f"alpha must lie in (0, 1], got {alpha}")
    n = scores.size
    idx = min(max(n - _n_selected(alpha, n), 0), n - 1)
    return float(np.sort(scores, kind="stable")[idx])


def select_mask(scores, alpha):
    """Boolean mask of scores at or above the percentile threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores >= percentile_threshold(scores, alpha)


def select_tokens(table, field, alpha):
    if field not in ("entropy", "sensitivity"):
        raise UsageError(f"select on entropy or sensitivity, not {field!r}")
    if len(table) == 0:
        raise UsageError("empty score table")
    keep = np.nonzero(select_mask(table.field(field), alpha))[0]
    return frozenset(TokenIndex(int(table.b[k]), int(table.i[k]), int(table.t[k])) for k in keep)


def build_weight_mask(tr, tp, config, batch):
    """Per-token weights aligned with ``batch.tokens``.

    Reasoning tokens get ``gamma_r`` (overlaps included), perception-only
    tokens ``gamma_p``, everything else zero.
    """
    weights = np.zeros(batch.tokens.shape)
    g = batch.group_size
    for indices, gamma in ((tp, config.gamma_p), (tr, config.gamma_r)):
        for b, i, t in indices:
            if not (0 <= b < len(batch.samples) and 0 <= i < g
                    and 0 <= t < batch.lengths[b * g + i]):
                raise UsageError(f"token index {(b, i, t)} is outside the batch")
    in_r = _as_grid(tr, batch)
    in_p = _as_grid(tp, batch)
    weights[in_p] = config.gamma_p
    if config.overlap_rule == "additive":
        weights[in_r] += config.gamma_r
    else:
        weights[in_r] = config.gamma_r
    return weights


def _as_grid(indices, batch):
    grid = np.zeros(batch.tokens.shape, dtype=bool)
    if indices:
        arr = np.array(list(indices), dtype=np.int64)
        grid[arr[:, 0] * batch.group_size + arr[:, 1], arr[:, 2]] = True
    return grid


def export_selection(path, table, selections):
    """CSV rows ``b,i,t,field,score`` for each ``(field, token set)``."""
    pos = {(int(b), int(i), int(t)): k for k, (b, i, t) in enumerate(zip(table.b, table.i, table.t))}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("b", "i", "t", "field", "score"))
        for field, chosen in selections.items():
            scores = table.field(field)
            for idx in sorted(chosen):
                w.writerow((*idx, field, repr(float(scores[pos[tuple(idx)]]))))
