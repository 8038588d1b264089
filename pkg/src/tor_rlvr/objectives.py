"""Rewards, group advantages and the four clipped surrogate objectives.

All objectives are returned as quantities to *maximise*. Per-token arrays
are padded ``(N, L)`` with ``lengths`` marking the valid prefix of each row;
padding never contributes. ``logp_new`` may be a :class:`~tor_rlvr.diffcore.Tensor`
(to differentiate through it) or a plain array.

Clip and KL defaults (epsilon 0.2, clip-higher 0.2/0.28, beta 0.01) are
engine choices, not published settings.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import synthtask as st
from .errors import ConfigurationError, DegenerateBatchError, UsageError


@dataclass(frozen=True)
class ObjectiveConfig:
    epsilon: float = 0.2
    epsilon_low: float = 0.2
    epsilon_high: float = 0.28
    beta: float = 0.01
    advantage_epsilon: float = 1e-12
    std_mode: str = "population"

    def __post_init__(self):
        if min(self.epsilon, self.epsilon_low, self.epsilon_high) <= 0:
            raise ConfigurationError("clip bounds must be positive")
        if self.beta < 0:
            raise ConfigurationError("beta must be nonnegative")
        if self.advantage_epsilon <= 0:
            raise ConfigurationError("advantageEpsilon must be positive")
        if self.std_mode not in ("population", "sample"):
            raise ConfigurationError(f"unknown std mode {self.std_mode!r}")


@dataclass
class GroupAdvantages:
    advantages: np.ndarray  # (B, G), one scalar per rollout
    mean: np.ndarray        # (B,)
    std: np.ndarray         # (B,)

    @property
    def flat(self):
        return self.advantages.reshape(-1)


def compute_rewards(batch):
    return np.array([st.verify(batch.response(n), batch.samples[n // batch.group_size].answer)
                     for n in range(batch.n_rollouts)], dtype=np.float64)


def group_advantage(rewards, advantage_epsilon=1e-12, std_mode="population"):
    """Standardise rewards within each group (rows of a ``(B, G)`` array)."""
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    if r.shape[1] < 2:
        raise UsageError("group advantages need at least two rollouts per group")
    mean = r.mean(axis=1)
    std = r.std(axis=1, ddof=0 if std_mode == "population" else 1)
    adv = (r - mean[:, None]) / (std[:, None] + advantage_epsilon)
    adv[std == 0] = 0.0
    return GroupAdvantages(adv, mean, std)


def importance_ratio(logp_new, logp_old):
    return np.exp(np.asarray(logp_new) - np.asarray(logp_old))


def clipped_term(r, advantage, eps_low, eps_high):
    r = np.asarray(r, dtype=np.float64)
    return np.minimum(r * advantage, np.clip(r, 1 - eps_low, 1 + eps_high) * advantage)


def kl_penalty(logp_theta, logp_ref):
    """Per-token nonnegative estimator of KL(pi_theta || pi_ref)."""
    d = np.asarray(logp_ref) - np.asarray(logp_theta)
    return np.exp(d) - d - 1.0


def dynamic_sample_filter(rewards):
    """Indices of groups (rows) whose rewards are not all equal."""
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    return np.nonzero(r.max(axis=1) != r.min(axis=1))[0]


# ---------------------------------------------------------------------------
# surrogate objectives


def _prepare(logp_new, logp_old, advantages, lengths, mask, *extra):
    logp_new = logp_new if isinstance(logp_new, dc.Tensor) else dc.Tensor(logp_new)
    shape = logp_new.shape
    logp_old = np.asarray(logp_old, dtype=np.float64)
    lengths = np.asarray(lengths)
    advantages = np.asarray(advantages, dtype=np.float64).reshape(-1)
    extra_ok = all(e is None or np.shape(e) == shape for e in extra)
    if len(shape) != 2 or logp_old.shape != shape or advantages.shape != (shape[0],) \
            or lengths.shape != (shape[0],) or not extra_ok:
        raise UsageError("per-token arrays, advantages and lengths are misaligned")
    if np.any(lengths > shape[1]) or np.any(lengths < 1):
        raise UsageError("rollout lengths must lie in [1, L]")
    valid = np.arange(shape[1])[None, :] < lengths[:, None]
    if mask is None:
        weight = valid.astype(np.float64)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != shape:
            raise UsageError(f"weight mask shape {mask.shape} does not match {shape}")
        weight = np.where(valid, mask, 0.0)
    return logp_new, logp_old, advantages, lengths, valid, weight


def _surrogate(logp_new, logp_old, advantages, valid, eps_low, eps_high):
    # pad slots get logp_old = logp_new-independent zeros; keep them finite
    ratio = dc.exp(logp_new - np.where(valid, logp_old, logp_new.values))
    adv = advantages[:, None] * valid
    return dc.minimum(ratio * adv, dc.clip(ratio, 1 - eps_low, 1 + eps_high) * adv)


def _grpo(logp_new, logp_old, logp_ref, advantages, lengths, config, mask):
    logp_new, logp_old, adv, lengths, valid, weight = _prepare(
        logp_new, logp_old, advantages, lengths, mask, logp_ref)
    term = _surrogate(logp_new, logp_old, adv, valid, config.epsilon, config.epsilon)
    per_token = term * weight
    if config.beta > 0:
        d = np.where(valid, logp_ref, logp_new.values) - logp_new
        kl = (dc.exp(d) - d - 1.0) * valid
        per_token = per_token - kl * config.beta
    per_rollout = per_token.sum(axis=1) * (1.0 / lengths)
    return per_rollout.mean()


def _dapo(logp_new, logp_old, advantages, lengths, config, mask):
    if np.size(lengths) == 0:
        raise DegenerateBatchError("no rollouts left after dynamic sampling")
    logp_new, logp_old, adv, lengths, valid, weight = _prepare(
        logp_new, logp_old, advantages, lengths, mask)
    term = _surrogate(logp_new, logp_old, adv, valid, config.epsilon_low, config.epsilon_high)
    return (term * weight).sum() * (1.0 / lengths.sum())


def grpo_loss(logp_new, logp_old, logp_ref, advantages, lengths, config):
    """Sequence-mean clipped surrogate minus the per-token KL penalty."""
    return _grpo(logp_new, logp_old, logp_ref, advantages, lengths, config, None)


def tor_grpo_loss(logp_new, logp_old, logp_ref, advantages, lengths, mask, config):
    """As :func:`grpo_loss` with each clipped term scaled by its token weight.

    The KL term and the ``1/L_i`` normaliser are left unweighted.
    """
    return _grpo(logp_new, logp_old, logp_ref, advantages, lengths, config, mask)


def dapo_loss(logp_new, logp_old, advantages, lengths, config):
    """Token-level clip-higher surrogate, normalised by the total token count."""
    return _dapo(logp_new, logp_old, advantages, lengths, config, None)


def tor_dapo_loss(logp_new, logp_old, advantages, lengths, mask, config):
    return _dapo(logp_new, logp_old, advantages, lengths, config, mask)


def objective_stats(logp_new, logp_old, logp_ref, lengths, mask, eps_low, eps_high, advantages):
    """Diagnostics: mean ratio, clip fraction, mean KL, masked-token fraction."""
    lengths = np.asarray(lengths)
    valid = np.arange(np.shape(logp_old)[1])[None, :] < lengths[:, None]
    r = importance_ratio(logp_new, logp_old)[valid]
    adv = np.broadcast_to(np.asarray(advantages).reshape(-1, 1), valid.shape)[valid]
    clipped = ((adv > 0) & (r > 1 + eps_high)) | ((adv < 0) & (r < 1 - eps_low))
    kl = kl_penalty(logp_new, logp_ref)[valid] if logp_ref is not None else np.zeros(1)
    masked = 0.0 if mask is None else float((np.asarray(mask)[valid] == 0).mean())
    return {"meanRatio": float(r.mean()), "clipFraction": float(clipped.mean()),
            "klTerm": float(kl.mean()), "maskedTokenFraction": masked}
