"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 to 10 share one set of desk-scale training runs (five seeds of
GRPO, ToR-GRPO and the reasoning-only variant), cached for the session.
The summary lines are repeated at the end of the pytest report.
"""
import csv
import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from tor_rlvr import analysis as an
from tor_rlvr import gradcheck as gc
from tor_rlvr import objectives as ob
from tor_rlvr import policy as pl
from tor_rlvr import scoring as sc
from tor_rlvr import selection as sel
from tor_rlvr import trainer as tr
from tor_rlvr.cli import summarize
from tor_rlvr.scoring import TokenScoreTable
from tor_rlvr.selection import SelectionConfig, TokenIndex

from conftest import ACCEPTANCE_LINES, random_distribution

SEEDS = (1, 2, 3, 4, 5)
VARIANTS = {
    "grpo": dict(algorithm="grpo"),
    "tor-grpo": dict(algorithm="tor-grpo",
                     selection=SelectionConfig(alpha_r=0.3, alpha_p=0.3, gamma_r=1.0, gamma_p=0.5)),
    "reasoning-only": dict(algorithm="tor-grpo",
                           selection=SelectionConfig(alpha_r=0.3, alpha_p=0.3, gamma_r=1.0,
                                                     gamma_p=0.0)),
}


def report(number, passed, detail):
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def desk_config(variant, seed):
    return tr.TrainConfig(rng_seed=seed, **VARIANTS[variant])


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """Every (variant, seed) run of the desk-scale protocol, with wall times."""
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    for variant, seed in itertools.product(VARIANTS, SEEDS):
        out = root / f"{variant}-s{seed}"
        start = time.perf_counter()
        result = tr.train_loop(desk_config(variant, seed), str(out))
        runs[variant, seed] = dict(result=result, seconds=time.perf_counter() - start, out=out)
        print(f"  {variant} seed {seed}: greedy {result.initial_eval:.3f} -> "
              f"{result.final_eval:.3f} in {runs[variant, seed]['seconds']:.0f}s")
    runs["root"] = root
    return runs


# ---------------------------------------------------------------------------
# 1. objective reduction


def test_c01_objective_reduction():
    rng = np.random.default_rng(101)
    cfg = ob.ObjectiveConfig()
    worst = 0.0
    start = time.perf_counter()
    for _ in range(100):
        b, g, length = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 9))
        n = b * g
        lengths = rng.integers(1, length + 1, n)
        old = -rng.exponential(size=(n, length))
        new = old + rng.normal(scale=0.3, size=old.shape)
        ref = old + rng.normal(scale=0.3, size=old.shape)
        adv = ob.group_advantage(rng.integers(0, 2, (b, g))).flat
        if not np.any(adv):
            adv = rng.normal(size=n)
        ones = np.ones_like(old)
        pairs = [(ob.grpo_loss(new, old, ref, adv, lengths, cfg).item(),
                  ob.tor_grpo_loss(new, old, ref, adv, lengths, ones, cfg).item()),
                 (ob.dapo_loss(new, old, adv, lengths, cfg).item(),
                  ob.tor_dapo_loss(new, old, adv, lengths, ones, cfg).item())]
        for a, t in pairs:
            worst = max(worst, abs(a - t) / max(abs(a), abs(t), 1e-300))
    seconds = time.perf_counter() - start
    ok = worst < 1e-12 and seconds < 5
    assert report(1, ok, f"max relative difference {worst:.2e} over 100 instances, "
                         f"{seconds:.2f}s"), (worst, seconds)


# ---------------------------------------------------------------------------
# 2. gradient fidelity


def test_c02_gradient_fidelity():
    start = time.perf_counter()
    reports = gc.run_gradcheck(seed=0, h=1e-5, tolerance=1e-4)
    seconds = time.perf_counter() - start
    n_params = gc.n_parameters(gc.build_problem(0)["params"])
    worst = max(r.max_error for r in reports.values())
    ok = (set(reports) == set(gc.OBJECTIVES) and all(r.passed for r in reports.values())
          and worst <= 1e-4 and n_params <= 1000 and seconds < 60)
    detail = ", ".join(f"{k} {r.max_error:.1e}" for k, r in reports.items())
    assert report(2, ok, f"{detail}; {n_params} params, {seconds:.1f}s")


# ---------------------------------------------------------------------------
# 3. entropy oracle


def _enumerated_entropy(probs, p):
    order = sorted(range(len(probs)), key=lambda k: (-probs[k], k))
    mass, total = 0.0, 0.0
    for k in order:
        q = float(probs[k])
        total -= q * math.log(q) if q > 0 else 0.0
        mass += q
        if mass >= p - 1e-12:
            break
    return total


def test_c03_entropy_oracle():
    rng = np.random.default_rng(303)
    worst, worst_shannon = 0.0, 0.0
    for _ in range(1000):
        v = int(rng.integers(2, 65))
        probs = random_distribution(rng, v, peaked=bool(rng.integers(2)))
        for p in (0.5, 0.9, 0.95, 1.0):
            worst = max(worst, abs(sc.token_entropy(probs, p) - _enumerated_entropy(probs, p)))
        shannon = -sum(q * math.log(q) for q in probs if q > 0)
        worst_shannon = max(worst_shannon, abs(sc.token_entropy(probs, 1.0) - shannon))
    ok = worst <= 1e-12 and worst_shannon <= 1e-12
    assert report(3, ok, f"max |error| {worst:.1e}, p=1 vs Shannon {worst_shannon:.1e}")


# ---------------------------------------------------------------------------
# 4. advantage standardisation


def test_c04_advantage_standardisation():
    rng = np.random.default_rng(404)
    worst_mean, worst_std, zero_ok = 0.0, 0.0, True
    for _ in range(2000):
        g = int(rng.integers(2, 17))
        r = rng.integers(0, 2, (1, g)).astype(float)
        a = ob.group_advantage(r).advantages[0]
        if r.std() > 0:
            worst_mean = max(worst_mean, abs(a.mean()))
            worst_std = max(worst_std, abs(a.std() - 1))
        else:
            zero_ok &= bool(np.all(a == 0))
    example = ob.group_advantage([[1, 0, 0, 0]]).advantages[0]
    ex_err = float(np.max(np.abs(example - [1.732051, -0.577350, -0.577350, -0.577350])))
    ok = worst_mean < 1e-12 and worst_std < 1e-9 and zero_ok and ex_err <= 1e-6
    assert report(4, ok, f"max |mean| {worst_mean:.1e}, max |std-1| {worst_std:.1e}, "
                         f"(1,0,0,0) error {ex_err:.1e}")


# ---------------------------------------------------------------------------
# 5. selection correctness


def test_c05_selection_correctness():
    rng = np.random.default_rng(505)
    failures = []
    for k in range(1000):
        n = int(rng.integers(1, 300))
        alpha = float(rng.uniform(0.01, 1.0))
        distinct = k % 2 == 0
        scores = rng.permutation(n) + rng.random() if distinct else rng.integers(0, 6, n) * 0.5
        table = TokenScoreTable(b=np.zeros(n, int), i=np.zeros(n, int), t=np.arange(n),
                                token=np.zeros(n, int), entropy=scores.astype(float),
                                sensitivity=scores.astype(float))
        chosen = sel.select_tokens(table, "entropy", alpha)
        picked = np.zeros(n, bool)
        picked[[x.t for x in chosen]] = True
        thr = sel.percentile_threshold(scores, alpha)
        floor = math.floor(alpha * n + 1e-9)
        ties = int(np.sum(scores == thr))
        if not floor <= picked.sum() <= floor + ties:
            failures.append(("count", k))
        if distinct and picked.sum() < n and scores[picked].min() < scores[~picked].max():
            failures.append(("order", k))
        scaled = replace(table, entropy=table.entropy * 7.25)
        if sel.select_tokens(scaled, "entropy", alpha) != chosen:
            failures.append(("scale", k))
    assert report(5, not failures, f"1000 tables, {len(failures)} violations"), failures[:5]


# ---------------------------------------------------------------------------
# 6. mask semantics


class _Shape:
    def __init__(self, b, g, lengths):
        self.samples, self.group_size = [None] * b, g
        self.lengths = np.asarray(lengths)
        self.tokens = np.zeros((len(lengths), int(max(lengths))), int)


def test_c06_mask_semantics():
    rng = np.random.default_rng(606)
    bad = 0
    for _ in range(500):
        b, g = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        shape = _Shape(b, g, rng.integers(1, 9, b * g))
        idx = [TokenIndex(n // g, n % g, t) for n in range(b * g) for t in range(shape.lengths[n])]
        t_r = {x for x in idx if rng.random() < 0.35}
        t_p = {x for x in idx if rng.random() < 0.35}
        cfg = SelectionConfig(gamma_r=float(rng.uniform(0.5, 2)), gamma_p=float(rng.uniform(0, 1)))
        w = sel.build_weight_mask(t_r, t_p, cfg, shape)
        values_ok = set(np.unique(w)) <= {0.0, cfg.gamma_r, cfg.gamma_p}
        overlap_ok = all(w[x.b * g + x.i, x.t] == cfg.gamma_r for x in t_r & t_p)
        support = {TokenIndex(n // g, n % g, t) for n, t in zip(*np.nonzero(w))}
        support_ok = cfg.gamma_p == 0 and support == t_r or support == t_r | t_p
        bad += not (values_ok and overlap_ok and support_ok)
    assert report(6, bad == 0, f"500 random masks, {bad} violations")


# ---------------------------------------------------------------------------
# 7. dynamic sampling


def test_c07_dynamic_sampling():
    checked, bad = 0, 0
    for g in range(2, 7):
        patterns = np.array(list(itertools.product((0.0, 1.0), repeat=g)))
        kept = set(ob.dynamic_sample_filter(patterns).tolist())
        for k, row in enumerate(patterns):
            mixed = row.min() != row.max()
            bad += (k in kept) != mixed
            checked += 1
    assert report(7, bad == 0, f"{checked} reward patterns for G=2..6, {bad} misfiltered")


# ---------------------------------------------------------------------------
# 8. desk-scale learning


def test_c08_desk_scale_learning(desk_runs):
    rows = []
    good = 0
    slowest = 0.0
    for seed in SEEDS:
        run = desk_runs["grpo", seed]
        res = run["result"]
        ok = res.initial_eval <= 0.4 and res.final_eval >= 0.8 and run["seconds"] < 1200
        good += ok
        slowest = max(slowest, run["seconds"])
        rows.append(f"s{seed} {res.initial_eval:.2f}->{res.final_eval:.2f}")
    passed = good >= 4
    assert report(8, passed, f"{good}/5 seeds reach >=0.8 from <=0.4 ({', '.join(rows)}); "
                             f"slowest {slowest:.0f}s")


# ---------------------------------------------------------------------------
# 9. ToR comparison


def test_c09_tor_comparison(desk_runs):
    cells = [{"algorithm": variant, "sweepKey": "", "sweepValue": "", "seed": seed,
              "finalReward": desk_runs[variant, seed]["result"].final_eval, "status": "ok"}
             for variant in VARIANTS for seed in SEEDS]
    summary = summarize(cells)
    path = desk_runs["root"] / "summary.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(summary[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    means = {r["algorithm"]: r["meanFinalReward"] for r in summary}
    ok = (means["tor-grpo"] >= means["grpo"] - 0.02
          and means["reasoning-only"] <= means["tor-grpo"] + 0.02)
    assert report(9, ok, "mean final reward " + ", ".join(f"{k} {v:.3f}" for k, v in means.items())
                  + f"; summary {path}")


# ---------------------------------------------------------------------------
# 10. analysis machinery


def test_c10_analysis_machinery(desk_runs):
    # thresholds and overlap over every recorded run
    overlap_ok = all(0.0 <= row["overlapRatio"] <= 1.0
                     for key, run in desk_runs.items() if key != "root"
                     for row in run["result"].history)
    params = pl.load_checkpoint(desk_runs["grpo", SEEDS[0]]["out"] / "checkpoints" / "final.ckpt")
    config = desk_config("grpo", SEEDS[0])
    samples = tr._task_samples(config, 10_000, 0)
    batch = pl.sample_rollouts(params, samples, config.group_size, config.top_p, rng_seed=7)
    table = sc.build_score_table(batch, params, proxies=sc.PROXIES)
    monotone = True
    for field in ("entropy", "sensitivity"):
        th = an.distribution_report(table, field).thresholds
        vals = [th[f] for f in sorted(th)]
        monotone &= all(b <= a for a, b in zip(vals, vals[1:]))
    mat = an.proxy_comparison(table)
    defined = ~np.isnan(mat)
    symmetric = np.array_equal(defined, defined.T) and np.array_equal(mat[defined], mat.T[defined])
    unit = all(mat[k, k] == 1.0 for k in range(4) if defined[k, k])
    rho = mat[an.PROXY_FIELDS.index("probDiff"), an.PROXY_FIELDS.index("sensitivity")]
    ok = overlap_ok and monotone and symmetric and unit and rho > 0
    assert report(10, ok, f"thresholds monotone {monotone}, overlap in [0,1] {overlap_ok}, "
                          f"matrix symmetric {symmetric} unit diagonal {unit}, "
                          f"rho(probDiff, logp-diff) {rho:.3f}")


# ---------------------------------------------------------------------------
# 11. reproducibility


def test_c11_reproducibility(desk_runs, tmp_path):
    first = desk_runs["grpo", SEEDS[0]]["out"]
    tr.train_loop(desk_config("grpo", SEEDS[0]), str(tmp_path))
    same = {name: (first / name).read_bytes() == (tmp_path / name).read_bytes()
            for name in ("metrics.jsonl", "checkpoints/final.ckpt")}
    assert report(11, all(same.values()),
                  ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
