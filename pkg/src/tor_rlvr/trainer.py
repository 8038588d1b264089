"""RLVR training loop: collect under a frozen snapshot, select, reweight, ascend."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import objectives as obj
from . import policy as pl
from . import synthtask as st
from .errors import ConfigurationError, DegenerateBatchError, NumericError, StalenessError
from .objectives import ObjectiveConfig
from .optim import Optimizer
from .policy import PolicyConfig
from .scoring import build_score_table
from .selection import SelectionConfig, build_weight_mask, select_tokens

log = logging.getLogger(__name__)

ALGORITHMS = ("grpo", "dapo", "tor-grpo", "tor-dapo")

# large-model settings (7B scale), kept for reference and not used as defaults
LARGE_SCALE_SETTINGS = {"learningRate": 1e-6, "globalBatchSize": 128, "rolloutBatchSize": 512,
                  "groupSize": 12, "entropyTopP": 0.95, "gammaR": 1.0, "gammaP": 0.5,
                  "alphaR": 0.3, "alphaP": 0.3}


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "grpo"
    rollout_batch_size: int = 32
    group_size: int = 8
    global_batch_size: int = 64
    learning_rate: float = 1e-3
    total_rollout_batches: int = 300
    top_p: float = 0.95
    max_len: int = 32
    rng_seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9
    epochs: int = 1
    warmup_steps: int = 200
    warmup_lr: float = 1e-2
    eval_samples: int = 256
    eval_every: int = 0
    checkpoint_every: int = 50
    on_degenerate: str = "raise"
    task: st.TaskConfig = field(default_factory=st.TaskConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"algorithm must be one of {ALGORITHMS}")
        if self.group_size < 2:
            raise ConfigurationError("groupSize must be at least 2")
        if self.rollout_batch_size < 1 or self.global_batch_size < 1:
            raise ConfigurationError("batch sizes must be positive")
        if self.global_batch_size > self.rollout_batch_size * self.group_size:
            raise ConfigurationError("globalBatchSize must not exceed rolloutBatchSize*groupSize")
        if self.learning_rate <= 0:
            raise ConfigurationError("learningRate must be positive")
        if self.total_rollout_batches < 0 or self.epochs < 1:
            raise ConfigurationError("totalRolloutBatches >= 0 and epochs >= 1 required")
        if not 0.0 < self.top_p <= 1.0:
            raise ConfigurationError("topP must lie in (0, 1]")
        if self.on_degenerate not in ("raise", "skip"):
            raise ConfigurationError("onDegenerate must be 'raise' or 'skip'")
        if self.policy.max_len != self.max_len:
            object.__setattr__(self, "policy", replace(self.policy, max_len=self.max_len))

    @property
    def uses_mask(self):
        return self.algorithm.startswith("tor-")

    @property
    def is_dapo(self):
        return self.algorithm.endswith("dapo")


def derive_seed(*keys):
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)[0])


# stream tags for derived seeds
_INIT, _WARMUP, _TASK, _ROLLOUT, _PERM, _EVAL = range(6)


@dataclass
class TrainState:
    params: pl.PolicyParams
    ref: pl.PolicyParams
    optimizer: Optimizer
    step: int = 0
    batches_done: int = 0
    metrics: dict = field(default_factory=dict)


@dataclass
class Collected:
    batch: pl.RolloutBatch
    rewards: np.ndarray        # (B', G) after any filtering
    all_rewards: np.ndarray    # (B, G) as sampled
    advantages: obj.GroupAdvantages
    table: object
    tr: frozenset
    tp: frozenset
    mask: np.ndarray
    logp_ref: np.ndarray
    batch_index: int


class TrainingAborted(NumericError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def eval_samples(config):
    seed = derive_seed(config.rng_seed, _EVAL)
    return [st.generate_sample(derive_seed(seed, k), config.task)
            for k in range(config.eval_samples)]


def init_state(config):
    params = pl.init_params(config.policy, config.task, derive_seed(config.rng_seed, _INIT))
    params = pl.format_warmup(params, config.warmup_steps, derive_seed(config.rng_seed, _WARMUP),
                              lr=config.warmup_lr)
    opt = Optimizer(config.optimizer, config.learning_rate, momentum=config.momentum)
    return TrainState(params, params.snapshot(), opt)


def _task_samples(config, batch_index, attempt):
    seed = derive_seed(config.rng_seed, _TASK, batch_index, attempt)
    return [st.generate_sample(derive_seed(seed, k), config.task)
            for k in range(config.rollout_batch_size)]


def collect_rollout_batch(state, config, batch_index):
    snapshot = state.params.snapshot()
    sel = config.selection
    for attempt in (0, 1):
        samples = _task_samples(config, batch_index, attempt)
        batch = pl.sample_rollouts(
            snapshot, samples, config.group_size, config.top_p, config.max_len,
            derive_seed(config.rng_seed, _ROLLOUT, batch_index, attempt),
            entropy_p=sel.entropy_top_p, renormalize_entropy=sel.renormalize_entropy)
        all_rewards = obj.compute_rewards(batch).reshape(len(samples), config.group_size)
        rewards = all_rewards
        if not config.is_dapo:
            break
        keep = obj.dynamic_sample_filter(all_rewards)
        if keep.size:
            batch, rewards = batch.subset(keep), all_rewards[keep]
            break
        log.info("batch %d: every group has zero reward variance, resampling", batch_index)
    else:
        raise DegenerateBatchError(f"batch {batch_index}: no group with mixed rewards")

    oc = config.objective
    adv = obj.group_advantage(rewards, oc.advantage_epsilon, oc.std_mode)
    table = build_score_table(batch, snapshot, p=sel.entropy_top_p)
    tr = select_tokens(table, "entropy", sel.alpha_r)
    tp = select_tokens(table, "sensitivity", sel.alpha_p)
    if config.uses_mask:
        mask = build_weight_mask(tr, tp, sel, batch)
    else:
        mask = batch.valid.astype(np.float64)
    logp_ref = None
    if not config.is_dapo and oc.beta > 0:
        logp_ref = pl.score_batch(state.ref, batch, "image").logp
    return Collected(batch, rewards, all_rewards, adv, table, tr, tp, mask, logp_ref, batch_index)


def _minibatch_objective(config, logp_new, logp_old, logp_ref, adv, lengths, mask):
    oc = config.objective
    if config.algorithm == "grpo":
        return obj.grpo_loss(logp_new, logp_old, logp_ref, adv, lengths, oc)
    if config.algorithm == "tor-grpo":
        return obj.tor_grpo_loss(logp_new, logp_old, logp_ref, adv, lengths, mask, oc)
    if config.algorithm == "dapo":
        return obj.dapo_loss(logp_new, logp_old, adv, lengths, oc)
    return obj.tor_dapo_loss(logp_new, logp_old, adv, lengths, mask, oc)


def _dump(out_dir, collected, rows, step, reason):
    if out_dir is None:
        return None
    path = os.path.join(out_dir, "diagnostics", f"abort_step{step:06d}.json")
    os.makedirs(os.path.dirname(path), exist_ok=True)
    b = collected.batch
    with open(path, "w") as fh:
        json.dump({"reason": reason, "step": step, "batch": collected.batch_index,
                   "rows": rows.tolist(), "tokens": b.tokens[rows].tolist(),
                   "lengths": b.lengths[rows].tolist(),
                   "logp_old": b.logp_with[rows].tolist(),
                   "advantages": collected.advantages.flat[rows].tolist()}, fh)
    return path


def update_step(state, collected, config, out_dir=None, objective_log=None):
    """One pass (or ``epochs`` passes) of mini-batch ascent over the collected rollouts."""
    batch = collected.batch
    if batch.version != state.params.version:
        raise StalenessError(
            f"rollouts from version {batch.version}, params at {state.params.version}")
    params = state.params
    rng = np.random.default_rng(derive_seed(config.rng_seed, _PERM, collected.batch_index))
    cells, questions = pl._prompt_arrays(batch.samples, batch.group_size, "image", config.task)
    adv_flat = collected.advantages.flat
    eps_lo, eps_hi = ((config.objective.epsilon_low, config.objective.epsilon_high)
                      if config.is_dapo else (config.objective.epsilon,) * 2)
    records = []
    for _ in range(config.epochs):
        order = rng.permutation(batch.n_rollouts)
        for start in range(0, len(order), config.global_batch_size):
            rows = np.sort(order[start:start + config.global_batch_size])
            tokens, lengths = batch.rows(rows)
            lmax = tokens.shape[1]
            logp_old = batch.logp_with[rows, :lmax]
            logp_ref = None if collected.logp_ref is None else collected.logp_ref[rows, :lmax]
            mask = collected.mask[rows, :lmax]
            leaves = params.leaves()
            try:
                logp_new, _, _ = pl.response_logprobs(leaves, params, cells[rows],
                                                      questions[rows], tokens)
                value = _minibatch_objective(config, logp_new, logp_old, logp_ref,
                                             adv_flat[rows], lengths, mask)
                value.backward()
            except NumericError as exc:
                path = _dump(out_dir, collected, rows, state.step, str(exc))
                raise TrainingAborted(f"non-finite objective at step {state.step}: {exc}",
                                      path) from exc
            grads = {k: t.grad if t.grad is not None else np.zeros_like(t.values)
                     for k, t in leaves.items()}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                path = _dump(out_dir, collected, rows, state.step, "non-finite gradient")
                raise TrainingAborted(f"non-finite gradient at step {state.step}", path)
            stats = obj.objective_stats(logp_new.values, logp_old, logp_ref, lengths,
                                        mask if config.uses_mask else None, eps_lo, eps_hi,
                                        adv_flat[rows])
            rec = {"step": state.step, "objective": value.item(), **stats}
            records.append(rec)
            if objective_log is not None:
                objective_log.write(json.dumps(rec) + "\n")
            state.optimizer.step(params.arrays, grads)
            state.step += 1
    params.version += 1
    state.batches_done += 1
    return state, records


def batch_metrics(collected, records):
    table, tr, tp = collected.table, collected.tr, collected.tp
    n_tok = len(table)
    union, inter = tr | tp, tr & tp
    pos = {(int(b), int(i), int(t)): k
           for k, (b, i, t) in enumerate(zip(table.b, table.i, table.t))}

    def mean_over(indices, values):
        if not indices:
            return 0.0
        return float(np.mean([values[pos[tuple(x)]] for x in indices]))

    return {
        "batch": collected.batch_index,
        "meanReward": float(collected.all_rewards.mean()),
        "objective": float(np.mean([r["objective"] for r in records])) if records else 0.0,
        "clipFraction": float(np.mean([r["clipFraction"] for r in records])) if records else 0.0,
        "overlapRatio": len(inter) / len(union) if union else 0.0,
        "overlapRatioOfTotal": len(inter) / n_tok,
        "maskedFractionReasoning": len(tr) / n_tok,
        "maskedFractionPerception": len(tp) / n_tok,
        "meanEntropySelected": mean_over(tr, table.entropy),
        "meanSensitivitySelected": mean_over(tp, table.sensitivity),
    }


@dataclass
class TrainResult:
    state: TrainState
    history: list
    initial_eval: float
    final_eval: float
    evals: list
    checkpoints: list


def _checkpoint(params, out_dir, name, paths):
    if out_dir is None:
        return
    path = os.path.join(out_dir, "checkpoints", name)
    pl.save_checkpoint(params, path)
    paths.append(path)


def train_loop(config, out_dir=None, progress=None):
    """Run ``total_rollout_batches`` collect/update iterations.

    With ``out_dir`` set, writes ``metrics.jsonl`` (one row per rollout
    batch), ``objective.jsonl`` (one row per optimizer step), ``eval.jsonl``
    and ``checkpoints/``.
    """
    state = init_state(config)
    ev = eval_samples(config)
    initial = pl.greedy_reward(state.params, ev, config.max_len)
    evals = [{"batch": 0, "greedyReward": initial}]
    history, ckpts = [], []
    files = {}
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
        for name in ("metrics", "objective", "eval"):
            files[name] = open(os.path.join(out_dir, f"{name}.jsonl"), "w")
        files["eval"].write(json.dumps(evals[0]) + "\n")
    _checkpoint(state.params, out_dir, "initial.ckpt", ckpts)
    try:
        for k in range(config.total_rollout_batches):
            try:
                collected = collect_rollout_batch(state, config, k)
            except DegenerateBatchError:
                if config.on_degenerate == "raise":
                    raise
                log.warning("batch %d skipped: degenerate", k)
                continue
            state, records = update_step(state, collected, config, out_dir,
                                         files.get("objective"))
            row = batch_metrics(collected, records)
            history.append(row)
            if "metrics" in files:
                files["metrics"].write(json.dumps(row) + "\n")
                files["metrics"].flush()
            if progress is not None:
                progress(row)
            done = k + 1
            if config.eval_every and done % config.eval_every == 0 \
                    and done != config.total_rollout_batches:
                e = {"batch": done, "greedyReward": pl.greedy_reward(state.params, ev,
                                                                     config.max_len)}
                evals.append(e)
                if "eval" in files:
                    files["eval"].write(json.dumps(e) + "\n")
            if config.checkpoint_every and done % config.checkpoint_every == 0 \
                    and done != config.total_rollout_batches:
                _checkpoint(state.params, out_dir, f"batch{done:06d}.ckpt", ckpts)
        final = pl.greedy_reward(state.params, ev, config.max_len) \
            if config.total_rollout_batches else initial
        if config.total_rollout_batches:
            e = {"batch": config.total_rollout_batches, "greedyReward": final}
            evals.append(e)
            if "eval" in files:
                files["eval"].write(json.dumps(e) + "\n")
            _checkpoint(state.params, out_dir, "final.ckpt", ckpts)
    finally:
        for fh in files.values():
            fh.close()
    return TrainResult(state, history, initial, final, evals, ckpts)
