import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from tor_rlvr import policy as pl
from tor_rlvr import scoring as sc
from tor_rlvr.errors import StalenessError, UndefinedCorrelationError, UsageError

from conftest import random_distribution


def brute_force_entropy(probs, p):
    """Walk the vocabulary in descending probability, one token at a time."""
    items = sorted(enumerate(probs), key=lambda kv: (-kv[1], kv[0]))
    total, mass = 0.0, 0.0
    for _, q in items:
        if q > 0:
            total -= q * math.log(q)
        mass += q
        if mass >= p - 1e-12:
            break
    return total


def test_one_hot_entropy_is_zero():
    for p in (0.3, 0.95, 1.0):
        assert sc.token_entropy(np.eye(5)[2], p) == 0.0


def test_uniform_two_tokens():
    assert sc.token_entropy(np.array([0.5, 0.5]), 0.95) == pytest.approx(math.log(2), abs=1e-12)


def test_point_nine_point_one():
    h = sc.token_entropy(np.array([0.9, 0.1]), 0.95)
    assert h == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)), abs=1e-12)
    assert h == pytest.approx(0.325083, abs=1e-6)


def test_nucleus_includes_crossing_token_and_is_smallest():
    probs = np.array([0.1, 0.5, 0.3, 0.1])
    assert sc.nucleus_mask(probs, 0.8).tolist() == [False, True, True, False]
    assert sc.nucleus_mask(probs, 0.81).tolist() == [True, True, True, False]
    assert sc.nucleus_mask(probs, 1.0).all()


def test_entropy_is_not_renormalised_by_default():
    probs = np.array([0.6, 0.3, 0.1])
    literal = sc.token_entropy(probs, 0.5)
    assert literal == pytest.approx(-0.6 * math.log(0.6), abs=1e-15)
    assert sc.token_entropy(probs, 0.5, renormalize=True) == 0.0


def test_brute_force_agreement_on_random_distributions():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = int(rng.integers(2, 65))
        probs = random_distribution(rng, v, peaked=bool(rng.integers(2)))
        for p in (0.5, 0.9, 0.95, 1.0):
            assert abs(sc.token_entropy(probs, p) - brute_force_entropy(probs, p)) <= 1e-12


def test_p_one_is_shannon_entropy():
    rng = np.random.default_rng(1)
    for _ in range(200):
        probs = random_distribution(rng, 20)
        shannon = -sum(q * math.log(q) for q in probs if q > 0)
        assert abs(sc.token_entropy(probs, 1.0) - shannon) <= 1e-12


def test_entropy_monotone_in_p():
    rng = np.random.default_rng(2)
    for _ in range(100):
        probs = random_distribution(rng, 30, peaked=True)
        hs = [sc.token_entropy(probs, p) for p in np.linspace(0.05, 1.0, 20)]
        assert all(b >= a for a, b in zip(hs, hs[1:]))


def test_vectorised_matches_scalar():
    rng = np.random.default_rng(3)
    probs = np.stack([random_distribution(rng, 12) for _ in range(10)]).reshape(2, 5, 12)
    vec = sc.top_p_entropy(probs, 0.9)
    for idx in np.ndindex(2, 5):
        assert vec[idx] == sc.token_entropy(probs[idx], 0.9)


def test_invalid_p_and_probs():
    with pytest.raises(UsageError):
        sc.token_entropy(np.array([0.5, 0.5]), 0.0)
    with pytest.raises(UsageError):
        sc.token_entropy(np.array([0.5, 0.5]), 1.5)
    with pytest.raises(UsageError):
        sc.token_entropy(np.array([0.5, 0.6]), 0.9)


def test_visual_sensitivity_examples():
    assert sc.visual_sensitivity(-1.0, -1.0) == 0.0
    assert sc.visual_sensitivity(-1.0, -3.0) == 2.0
    assert sc.visual_sensitivity(-3.0, -1.0) == 2.0


def test_rank_correlation_examples():
    assert sc.rank_correlation([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)
    assert sc.rank_correlation([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
    assert sc.rank_correlation([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)


def test_rank_correlation_matches_reference_with_ties():
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = rng.integers(0, 5, 30).astype(float)
        b = a + rng.integers(0, 3, 30)
        assert sc.rank_correlation(a, b) == pytest.approx(spearmanr(a, b).statistic, abs=1e-12)


def test_rank_correlation_undefined_and_usage():
    with pytest.raises(UndefinedCorrelationError):
        sc.rank_correlation([1, 1, 1], [1, 2, 3])
    with pytest.raises(UsageError):
        sc.rank_correlation([1], [1])
    with pytest.raises(UsageError):
        sc.rank_correlation([1, 2], [1, 2, 3])


def test_score_table_is_complete(small_batch, small_params):
    table = sc.build_score_table(small_batch, small_params)
    assert len(table) == small_batch.lengths.sum()
    seen = set(zip(table.b.tolist(), table.i.tolist(), table.t.tolist()))
    expect = {(n // 4, n % 4, t) for n in range(small_batch.n_rollouts)
              for t in range(small_batch.lengths[n])}
    assert seen == expect
    assert np.all(table.entropy >= 0) and np.all(table.sensitivity >= 0)


def test_score_table_uses_sampling_entropies(small_batch, small_params):
    table = sc.build_score_table(small_batch, small_params)
    valid = small_batch.valid
    assert np.array_equal(table.entropy, small_batch.entropy[valid])


def test_score_table_sensitivity_is_placeholder_logp_diff(small_batch, small_params):
    table = sc.build_score_table(small_batch, small_params)
    for k in range(0, len(table), 3):
        b, i, t = int(table.b[k]), int(table.i[k]), int(table.t[k])
        rec = small_batch.record(b * 4 + i)
        without = pl.score_under_condition(small_params, rec, small_batch.samples[b],
                                           "placeholder")
        assert table.sensitivity[k] == pytest.approx(abs(rec.logp_with[t] - without[t]),
                                                     abs=1e-10)


def test_zero_image_pathway_gives_zero_sensitivity(small_params, small_samples):
    params = pl.zero_image_pathway(small_params)
    batch = pl.sample_rollouts(params, small_samples, 3, top_p=1.0, rng_seed=2)
    table = sc.build_score_table(batch, params, proxies=("probDiff", "entropyDiff"))
    assert np.all(table.sensitivity == 0)
    assert np.all(table.probDiff == 0) and np.all(table.entropyDiff == 0)


def test_score_table_is_pure(small_batch, small_params):
    t1 = sc.build_score_table(small_batch, small_params, proxies=sc.PROXIES)
    t2 = sc.build_score_table(small_batch, small_params, proxies=sc.PROXIES)
    for name in ("entropy", "sensitivity", "probDiff", "entropyDiff", "attentionMass"):
        assert t1.field(name).tobytes() == t2.field(name).tobytes()


def test_proxies_are_in_range(small_batch, small_params):
    table = sc.build_score_table(small_batch, small_params, proxies=sc.PROXIES)
    assert np.all((table.probDiff >= 0) & (table.probDiff <= 1))
    assert np.all(table.entropyDiff >= 0)
    assert np.all((table.attentionMass >= 0) & (table.attentionMass <= 1 + 1e-12))
    assert table.attention_by_layer.shape == (len(table), 2)
    assert np.allclose(table.attention_by_layer.mean(axis=1), table.attentionMass)


def test_stale_params_rejected(small_batch, small_params):
    newer = small_params.snapshot(version=small_params.version + 1)
    with pytest.raises(StalenessError):
        sc.build_score_table(small_batch, newer)


def test_unknown_proxy_rejected(small_batch, small_params):
    with pytest.raises(UsageError):
        sc.build_score_table(small_batch, small_params, proxies=("gradNorm",))


def test_missing_column_is_usage_error(small_batch, small_params):
    table = sc.build_score_table(small_batch, small_params)
    with pytest.raises(UsageError):
        table.field("probDiff")


def test_csv_export(tmp_path, small_batch, small_params):
    table = sc.build_score_table(small_batch, small_params)
    path = tmp_path / "scores.csv"
    table.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "b,i,t,token,entropy,sensitivity,probDiff,entropyDiff,attentionMass"
    assert len(lines) == len(table) + 1
