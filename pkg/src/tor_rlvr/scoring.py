"""Per-token reasoning and perception scores.

Reasoning score: entropy of the top-p nucleus of the next-token
distribution, summed literally over the nucleus (no renormalisation).
Perception score: absolute change of the sampled token's log-probability
when the image is swapped for the empty placeholder. Alternative
perception proxies and a Spearman helper live here too.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import StalenessError, UndefinedCorrelationError, UsageError

NUCLEUS_TOL = 1e-12


def _check_p(p):
    if not 0.0 < p <= 1.0:
        raise UsageError(f"top-p mass must lie in (0, 1], got {p}")


def nucleus_mask(probs, p):
    """Boolean mask of the top-p nucleus along the last axis.

    The nucleus is the smallest probability-sorted prefix whose cumulative
    mass reaches ``p``; the token that crosses the threshold is included.
    Sorting is stable, so equal probabilities are ranked by token id.
    """
    _check_p(p)
    probs = np.asarray(probs, dtype=np.float64)
    order = np.argsort(-probs, axis=-1, kind="stable")
    cum = np.cumsum(np.take_along_axis(probs, order, axis=-1), axis=-1)
    k = np.minimum((cum < p - NUCLEUS_TOL).sum(axis=-1) + 1, probs.shape[-1])
    in_sorted = np.arange(probs.shape[-1]) < k[..., None]
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, order, in_sorted, axis=-1)
    return mask


def top_p_entropy(probs, p, renormalize=False):
    """Vectorised :func:`token_entropy` over any leading dimensions."""
    probs = np.asarray(probs, dtype=np.float64)
    mask = nucleus_mask(probs, p)
    kept = np.where(mask, probs, 0.0)
    if renormalize:
        kept = kept / kept.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(kept > 0, kept * np.log(kept), 0.0)
    return -terms.sum(axis=-1)


def token_entropy(probs, p, renormalize=False):
    """Top-p entropy of one distribution, natural log."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise UsageError("token_entropy expects a single probability vector")
    if abs(probs.sum() - 1.0) > 1e-9 or np.any(probs < 0):
        raise UsageError("probabilities must be nonnegative and sum to 1")
    return float(top_p_entropy(probs, p, renormalize))


def full_entropy(probs):
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(probs > 0, probs * np.log(probs), 0.0).sum(axis=-1)


def visual_sensitivity(logp_with, logp_without):
    return np.abs(np.asarray(logp_with) - np.asarray(logp_without))


def rank_correlation(a, b):
    """Spearman's rho with average ranks for ties."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise UsageError("rank correlation needs two equal-length lists of length >= 2")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if den == 0.0:
        raise UndefinedCorrelationError("zero rank variance")
    return float(np.clip((ra * rb).sum() / den, -1.0, 1.0))


PROXIES = ("probDiff", "entropyDiff", "attentionMass")
CSV_COLUMNS = ("b", "i", "t", "token", "entropy", "sensitivity",
               "probDiff", "entropyDiff", "attentionMass")


@dataclass
class TokenScoreTable:
    """Flat per-token scores in (b, i, t) order; proxies are NaN when absent."""

    b: np.ndarray
    i: np.ndarray
    t: np.ndarray
    token: np.ndarray
    entropy: np.ndarray
    sensitivity: np.ndarray
    probDiff: np.ndarray = None
    entropyDiff: np.ndarray = None
    attentionMass: np.ndarray = None
    attention_by_layer: np.ndarray = None

    def __len__(self):
        return len(self.entropy)

    def field(self, name):
        values = getattr(self, name)
        if values is None:
            raise UsageError(f"score table has no {name} column")
        return values

    def to_csv(self, path):
        n = len(self)
        nan = np.full(n, np.nan)
        cols = [getattr(self, c) if getattr(self, c) is not None else nan for c in CSV_COLUMNS]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in zip(*cols):
                w.writerow([int(x) for x in row[:4]] + [repr(float(x)) for x in row[4:]])


def build_score_table(batch, params, p=0.95, proxies=()):
    """Score every token of a rollout batch.

    Entropies come from sampling time; sensitivities from one teacher-forced
    pass under the placeholder image. ``proxies`` may name any of
    ``probDiff``, ``entropyDiff``, ``attentionMass``.
    """
    from . import policy

    if batch.version != params.version:
        raise StalenessError(
            f"rollouts from version {batch.version}, params at version {params.version}")
    proxies = set(proxies)
    if proxies - set(PROXIES):
        raise UsageError(f"unknown proxies {proxies - set(PROXIES)}")
    valid = batch.valid
    if batch.logp_placeholder is None or proxies:
        need_dist = bool(proxies & {"probDiff", "entropyDiff"})
        placeholder = policy.score_batch(params, batch, "placeholder",
                                         return_probs=need_dist)
        batch.logp_placeholder = placeholder.logp
    sens = visual_sensitivity(batch.logp_with, batch.logp_placeholder)
    n_idx, t_idx = np.nonzero(valid)
    table = TokenScoreTable(
        b=batch.sample_index[n_idx], i=batch.rollout_index[n_idx], t=t_idx,
        token=batch.tokens[n_idx, t_idx],
        entropy=batch.entropy[n_idx, t_idx], sensitivity=sens[n_idx, t_idx])
    if not proxies:
        return table
    with_image = policy.score_batch(params, batch, "image", return_probs=need_dist,
                                    return_attention="attentionMass" in proxies)
    if "probDiff" in proxies:
        diff = np.abs(np.exp(batch.logp_with) - np.exp(batch.logp_placeholder))
        table.probDiff = diff[n_idx, t_idx]
    if "entropyDiff" in proxies:
        h_with = full_entropy(with_image.probs)
        h_without = full_entropy(placeholder.probs)
        table.entropyDiff = np.abs(h_with - h_without)[n_idx, t_idx]
    if "attentionMass" in proxies:
        per_layer = with_image.image_attention
        table.attention_by_layer = per_layer[:, n_idx, t_idx].T
        table.attentionMass = per_layer.mean(axis=0)[n_idx, t_idx]
    return table
