"""Finite-difference audit of the four objectives on a tiny policy."""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import diffcore as dc
from . import objectives as obj
from . import policy as pl
from . import synthtask as st
from .policy import PolicyConfig
from .selection import SelectionConfig, build_weight_mask, select_tokens
from .scoring import build_score_table

OBJECTIVES = ("grpo", "tor-grpo", "dapo", "tor-dapo")
TINY_POLICY = PolicyConfig(d_model=4, n_layers=1, n_heads=1, d_ff=8, max_len=6, init_scale=0.5)


def n_parameters(params):
    return int(sum(a.size for a in params.arrays.values()))


def _ratio_offsets(rng, shape, eps_low, eps_high, margin=0.02):
    """Log-ratio offsets spread over both clip regions, kept off the kinks."""
    kinks = np.log([1 - eps_low, 1 + eps_high, 1.0])
    d = rng.uniform(-0.6, 0.6, shape)
    for _ in range(100):
        bad = np.min(np.abs(d[..., None] - kinks), axis=-1) < margin
        if not bad.any():
            break
        d[bad] = rng.uniform(-0.6, 0.6, bad.sum())
    return d


def build_problem(seed=0, task=None, policy=TINY_POLICY, batch_size=2, group_size=3,
                  objective=None, selection=None):
    """Random tiny policy, a sampled batch and every per-token input the losses need."""
    task = task or st.TaskConfig(grid_height=2, grid_width=2, alphabet_size=2, max_answer=4)
    objective = objective or obj.ObjectiveConfig(beta=0.05)
    selection = selection or SelectionConfig(alpha_r=0.5, alpha_p=0.5)
    rng = np.random.default_rng(seed)
    params = pl.init_params(policy, task, seed)
    samples = [st.generate_sample(seed * 100 + k, task) for k in range(batch_size)]
    batch = pl.sample_rollouts(params, samples, group_size, 1.0, policy.max_len, seed)
    rewards = rng.integers(0, 2, (batch_size, group_size)).astype(np.float64)
    rewards[:, 0], rewards[:, 1] = 0.0, 1.0   # every group mixed
    adv = obj.group_advantage(rewards).flat
    table = build_score_table(batch, params)
    mask = build_weight_mask(select_tokens(table, "entropy", selection.alpha_r),
                             select_tokens(table, "sensitivity", selection.alpha_p),
                             selection, batch)
    eps = max(objective.epsilon, objective.epsilon_low), max(objective.epsilon, objective.epsilon_high)
    off_old = _ratio_offsets(rng, batch.tokens.shape, *eps)
    off_ref = rng.uniform(-0.5, 0.5, batch.tokens.shape)
    valid = batch.valid
    logp_old = np.where(valid, batch.logp_with + off_old, 0.0)
    logp_ref = np.where(valid, batch.logp_with + off_ref, 0.0)
    cells, questions = pl._prompt_arrays(samples, group_size, "image", task)
    return dict(params=params, batch=batch, cells=cells, questions=questions, adv=adv,
                mask=mask, logp_old=logp_old, logp_ref=logp_ref, objective=objective)


def objective_fn(name, problem):
    """``fn(**param_tensors) -> scalar`` for one objective."""
    pr = problem
    params, batch, cfg = pr["params"], pr["batch"], pr["objective"]

    def fn(**leaves):
        logp, _, _ = pl.response_logprobs(leaves, params, pr["cells"], pr["questions"],
                                          batch.tokens)
        args = (logp, pr["logp_old"])
        if name == "grpo":
            return obj.grpo_loss(*args, pr["logp_ref"], pr["adv"], batch.lengths, cfg)
        if name == "tor-grpo":
            return obj.tor_grpo_loss(*args, pr["logp_ref"], pr["adv"], batch.lengths,
                                     pr["mask"], cfg)
        if name == "dapo":
            return obj.dapo_loss(*args, pr["adv"], batch.lengths, cfg)
        return obj.tor_dapo_loss(*args, pr["adv"], batch.lengths, pr["mask"], cfg)

    return fn


def run_gradcheck(seed=0, corrupt=False, h=1e-5, tolerance=1e-4, policy=TINY_POLICY, task=None):
    """FD report per objective, keyed by objective name."""
    problem = build_problem(seed, task=task, policy=policy)
    inputs = {k: v.copy() for k, v in problem["params"].arrays.items()}
    reports = {}
    for name in OBJECTIVES:
        fn = objective_fn(name, problem)
        if corrupt:
            with dc.corrupt_adjoint():
                reports[name] = dc.finite_difference_check(fn, inputs, h, tolerance)
        else:
            reports[name] = dc.finite_difference_check(fn, inputs, h, tolerance)
    return reports


def tiny_policy_for(max_len):
    return replace(TINY_POLICY, max_len=max_len)
