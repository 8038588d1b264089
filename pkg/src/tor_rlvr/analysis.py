"""Diagnostic reports over score tables and token selections.

Every report is a pure function of its inputs. ``write_*`` helpers emit one
CSV per report whose file name embeds the run id and batch index, e.g.
``distribution-entropy_run0_b000299.csv``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedCorrelationError, UsageError
from .scoring import rank_correlation
from .selection import percentile_threshold

FRACTIONS = (0.2, 0.3, 0.5)
N_BINS = 50
PROXY_FIELDS = ("sensitivity", "probDiff", "entropyDiff", "attentionMass")


@dataclass
class DistributionReport:
    field: str
    count: int
    mean: float
    thresholds: dict        # fraction -> score
    bin_edges: np.ndarray   # (N_BINS + 1,)
    counts: np.ndarray      # (N_BINS,)


def distribution_report(table, field, fractions=FRACTIONS):
    """Count, mean, top-fraction thresholds and a 50-bin histogram of one column."""
    scores = np.asarray(table.field(field), dtype=np.float64)
    if scores.size == 0:
        raise UsageError("distribution report needs a nonempty table")
    thresholds = {f: percentile_threshold(scores, f) for f in fractions}
    lo, hi = float(scores.min()), float(scores.max())
    if hi == lo:
        # a degenerate range still gets 50 bins so every report has the same shape
        hi = lo + 1.0
    counts, edges = np.histogram(scores, bins=N_BINS, range=(lo, hi))
    return DistributionReport(field, int(scores.size), float(scores.mean()),
                              thresholds, edges, counts)


def _rollout_keys(table):
    return list(zip(table.b.tolist(), table.i.tolist()))


def interdependence_scatter(batch, table, tr, tp):
    """Per-rollout reasoning uncertainty against perception strength.

    Returns a list of dicts with keys ``b, i, meanEntropy, maxEntropy,
    meanSensitivity, maxSensitivity``; a coordinate is ``None`` when the
    rollout has no selected token of that kind.
    """
    ent = {}
    sens = {}
    for k, (b, i) in enumerate(_rollout_keys(table)):
        t = int(table.t[k])
        if (b, i, t) in tr:
            ent.setdefault((b, i), []).append(float(table.entropy[k]))
        if (b, i, t) in tp:
            sens.setdefault((b, i), []).append(float(table.sensitivity[k]))
    rows = []
    for n in range(batch.n_rollouts):
        key = (n // batch.group_size, n % batch.group_size)
        e, s = ent.get(key), sens.get(key)
        rows.append({"b": key[0], "i": key[1],
                     "meanEntropy": None if e is None else float(np.mean(e)),
                     "maxEntropy": None if e is None else max(e),
                     "meanSensitivity": None if s is None else float(np.mean(s)),
                     "maxSensitivity": None if s is None else max(s)})
    return rows


def scatter_correlation(rows, aggregation="mean"):
    """Pearson correlation of the complete pairs, or ``None`` if undefined."""
    pairs = [(r[f"{aggregation}Entropy"], r[f"{aggregation}Sensitivity"]) for r in rows]
    pairs = np.array([p for p in pairs if None not in p], dtype=np.float64).reshape(-1, 2)
    if len(pairs) < 2 or np.ptp(pairs[:, 0]) == 0 or np.ptp(pairs[:, 1]) == 0:
        return None
    return float(np.corrcoef(pairs[:, 0], pairs[:, 1])[0, 1])


def overlap_ratio(tr, tp):
    union = tr | tp
    return len(tr & tp) / len(union) if union else 0.0


def overlap_trace(history, total_tokens=None):
    """``|Tr & Tp| / |Tr | Tp|`` per batch, plus ``|Tr & Tp| / total`` when totals are given."""
    rows = []
    for k, (tr, tp) in enumerate(history):
        row = {"batch": k, "overlapRatio": overlap_ratio(tr, tp)}
        if total_tokens is not None:
            n = total_tokens[k]
            row["overlapRatioOfTotal"] = len(tr & tp) / n if n else 0.0
        rows.append(row)
    return rows


def mixture_report(batch, tr, tp, rewards):
    """Per-rollout selected fractions, grouped by sample."""
    rewards = np.asarray(rewards, dtype=np.float64).reshape(-1)
    if rewards.size != batch.n_rollouts:
        raise UsageError(f"{rewards.size} rewards for {batch.n_rollouts} rollouts")
    n_r = np.zeros(batch.n_rollouts, dtype=np.int64)
    n_p = np.zeros(batch.n_rollouts, dtype=np.int64)
    g = batch.group_size
    for idx, counts in ((tr, n_r), (tp, n_p)):
        for b, i, _ in idx:
            counts[b * g + i] += 1
    rows = []
    for n in range(batch.n_rollouts):
        length = int(batch.lengths[n])
        rows.append({"b": n // g, "i": n % g, "length": length,
                     "reasoningSelected": int(n_r[n]), "perceptionSelected": int(n_p[n]),
                     "reasoningSelectedFraction": n_r[n] / length,
                     "perceptionSelectedFraction": n_p[n] / length,
                     "reward": float(rewards[n])})
    return rows


def proxy_comparison(table, fields=PROXY_FIELDS):
    """Spearman matrix over perception proxies; NaN marks undefined entries."""
    cols = [np.asarray(table.field(f), dtype=np.float64) for f in fields]
    k = len(fields)
    mat = np.full((k, k), np.nan)
    for a in range(k):
        for b in range(a, k):
            try:
                rho = rank_correlation(cols[a], cols[b])
            except UndefinedCorrelationError:
                continue
            mat[a, b] = mat[b, a] = 1.0 if a == b else rho
    return mat


def layer_attention_correlation(table, field="sensitivity"):
    """Spearman correlation of ``field`` with each layer's image-attention mass."""
    if table.attention_by_layer is None:
        raise UsageError("score table has no per-layer attention")
    out = []
    for layer in range(table.attention_by_layer.shape[1]):
        try:
            out.append(rank_correlation(table.field(field), table.attention_by_layer[:, layer]))
        except UndefinedCorrelationError:
            out.append(float("nan"))
    return out


# ---------------------------------------------------------------------------
# CSV writers


def report_path(out_dir, kind, run_id, batch_index):
    return os.path.join(out_dir, f"{kind}_{run_id}_b{batch_index:06d}.csv")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_rows(path, header, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row[h]) for h in header])
    return path


def write_distribution(report, path):
    """Summary rows (``kind=threshold``) followed by histogram bins (``kind=bin``)."""
    rows = [{"kind": "summary", "key": "count", "lo": None, "hi": None, "value": report.count},
            {"kind": "summary", "key": "mean", "lo": None, "hi": None, "value": report.mean}]
    rows += [{"kind": "threshold", "key": f, "lo": None, "hi": None, "value": v}
             for f, v in report.thresholds.items()]
    rows += [{"kind": "bin", "key": k, "lo": report.bin_edges[k], "hi": report.bin_edges[k + 1],
              "value": int(c)} for k, c in enumerate(report.counts)]
    return _write_rows(path, ("kind", "key", "lo", "hi", "value"), rows)


def write_scatter(rows, path):
    return _write_rows(path, ("b", "i", "meanEntropy", "maxEntropy",
                              "meanSensitivity", "maxSensitivity"), rows)


def write_overlap(rows, path):
    header = ("batch", "overlapRatio") + (("overlapRatioOfTotal",)
                                          if rows and "overlapRatioOfTotal" in rows[0] else ())
    return _write_rows(path, header, rows)


def write_mixture(rows, path):
    return _write_rows(path, ("b", "i", "length", "reasoningSelected", "perceptionSelected",
                              "reasoningSelectedFraction", "perceptionSelectedFraction",
                              "reward"), rows)


def write_proxy_matrix(matrix, path, fields=PROXY_FIELDS):
    rows = [{"field": f, **{g: matrix[a, b] for b, g in enumerate(fields)}}
            for a, f in enumerate(fields)]
    return _write_rows(path, ("field",) + tuple(fields), rows)
