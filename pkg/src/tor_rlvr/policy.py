"""Tiny image-conditioned causal decoder.

Input layout per example: the question tokens, then ``H*W`` image-cell
positions, then ``BOS`` and the response so far. All positions share one
causal self-attention stack, so cells can attend to the question. The
distribution over response token ``t`` is read at the ``t``-th position
after the image (the ``BOS`` slot for ``t = 0``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import synthtask as st
from .errors import CheckpointError, ConfigurationError, UsageError
from .optim import Optimizer
from .scoring import nucleus_mask, top_p_entropy

MASK_VALUE = -1e30
CHECKPOINT_MAGIC = b"TORCKPT"
CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 8
    d_ff: int = 256
    max_len: int = 32
    init_scale: float = 0.3

    def __post_init__(self):
        if self.d_model > 32 or self.n_layers > 2 or self.n_layers < 1:
            raise ConfigurationError("toy decoder is limited to d<=32 and 1-2 blocks")
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if self.max_len < 1:
            raise ConfigurationError("max_len must be positive")


def param_shapes(cfg, task):
    d, v = cfg.d_model, task.vocab_size
    shapes = {
        "tok_emb": (v, d),
        "pos_emb": (task.question_length + 1 + cfg.max_len, d),
        "cell_emb": (task.alphabet_size + 1, d),
        "row_emb": (task.grid_height, d),
        "col_emb": (task.grid_width, d),
    }
    for layer in range(cfg.n_layers):
        for w in ("wq", "wk", "wv", "wo"):
            shapes[f"l{layer}.{w}"] = (d, d)
        shapes[f"l{layer}.w1"] = (d, cfg.d_ff)
        shapes[f"l{layer}.b1"] = (cfg.d_ff,)
        shapes[f"l{layer}.w2"] = (cfg.d_ff, d)
        shapes[f"l{layer}.b2"] = (d,)
        shapes[f"l{layer}.g1"] = (d,)
        shapes[f"l{layer}.g2"] = (d,)
    shapes["g_out"] = (d,)
    shapes["w_out"] = (d, v)
    shapes["b_out"] = (v,)
    return shapes


IMAGE_PATHWAY = ("cell_emb", "row_emb", "col_emb")


@dataclass
class PolicyParams:
    arrays: dict
    config: PolicyConfig
    task: st.TaskConfig
    version: int = 0

    @property
    def n_params(self):
        return int(sum(a.size for a in self.arrays.values()))

    def snapshot(self, version=None):
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()}, self.config,
                            self.task, self.version if version is None else version)

    def leaves(self):
        return {k: dc.Tensor(v, requires_grad=True) for k, v in self.arrays.items()}

    def constants(self):
        return {k: dc.Tensor(v) for k, v in self.arrays.items()}


def init_params(cfg, task, seed=0, zeros=False):
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg, task).items():
        if name.endswith(("g1", "g2", "g_out")):
            arrays[name] = np.ones(shape)
        elif zeros or len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, cfg.init_scale, size=shape)
    return PolicyParams(arrays, cfg, task, 0)


def zero_image_pathway(params):
    out = params.snapshot()
    for name in IMAGE_PATHWAY:
        out.arrays[name][...] = 0.0
    return out


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardOut:
    logits: dc.Tensor
    image_attention: list = field(default_factory=list)


def _causal_mask(n):
    return np.triu(np.full((n, n), MASK_VALUE), k=1)


def forward(p, cfg, task, cells, text, attention=False):
    """Logits at the ``BOS`` position and every response position after it.

    ``p`` maps parameter names to Tensors; ``cells`` is ``(N, H*W)`` of cell
    symbols and ``text`` is ``(N, Q + 1 + t)``: question, ``BOS``, response
    prefix. Returns logits of shape ``(N, 1 + t, V)``.
    """
    cells, text = np.asarray(cells), np.asarray(text)
    n, n_cells = cells.shape
    q_len = task.question_length
    t_text = text.shape[1]
    if t_text > p["pos_emb"].shape[0]:
        raise UsageError(f"sequence of {t_text} text tokens exceeds the position table")
    rows = np.repeat(np.arange(task.grid_height), task.grid_width)
    cols = np.tile(np.arange(task.grid_width), task.grid_height)
    img = dc.embed(p["cell_emb"], cells) + (dc.embed(p["row_emb"], rows)
                                            + dc.embed(p["col_emb"], cols))
    txt = dc.embed(p["tok_emb"], text) + dc.embed(p["pos_emb"], np.arange(t_text))
    # question first, so image cells can condition on what is being asked
    x = dc.concat([txt[:, :q_len, :], img, txt[:, q_len:, :]], axis=1)
    total = n_cells + t_text
    h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
    mask = _causal_mask(total)
    gen = q_len + n_cells
    image_attention = []

    def heads(z):
        return z.reshape(n, total, h, dh).transpose(0, 2, 1, 3)

    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        u = dc.rms_norm(x) * p[pre + "g1"]
        q, k, v = (heads(u @ p[pre + w]) for w in ("wq", "wk", "wv"))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)) + mask
        att = dc.softmax(scores, axis=-1)
        if attention:
            image_attention.append(
                att.values[:, :, gen:, q_len:gen].sum(axis=-1).mean(axis=1))
        o = (att @ v).transpose(0, 2, 1, 3).reshape(n, total, cfg.d_model)
        x = x + o @ p[pre + "wo"]
        u = dc.rms_norm(x) * p[pre + "g2"]
        hidden = dc.tanh(u @ p[pre + "w1"] + p[pre + "b1"])
        x = x + (hidden @ p[pre + "w2"] + p[pre + "b2"])
    x = dc.rms_norm(x[:, gen:, :]) * p["g_out"]
    return ForwardOut(x @ p["w_out"] + p["b_out"], image_attention)


def _cells(grid, condition, task):
    if condition == "placeholder":
        return st.placeholder_grid(task).reshape(-1)
    if condition == "image":
        return np.asarray(grid).reshape(-1)
    return np.asarray(condition).reshape(-1)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def next_distribution(params, image, question, prefix):
    """Probability vector over the vocabulary for the next response token."""
    prefix = list(prefix)
    if len(prefix) >= params.config.max_len:
        raise UsageError(f"prefix of length {len(prefix)} reaches maxLen")
    text = np.array([[*question, st.BOS, *prefix]])
    cells = np.asarray(image).reshape(1, -1)
    with dc.no_grad():
        out = forward(params.constants(), params.config, params.task, cells, text)
    return np.exp(_log_softmax(out.logits.values[0, -1]))


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutRecord:
    b: int
    i: int
    tokens: np.ndarray
    length: int
    logp_with: np.ndarray
    entropy: np.ndarray
    logp_placeholder: np.ndarray
    version: int


@dataclass
class RolloutBatch:
    """``B`` samples times ``G`` rollouts, stored padded as ``(B*G, Lmax)``.

    Row ``n`` holds rollout ``i = n % G`` of sample ``b = n // G``.
    """

    samples: list
    group_size: int
    tokens: np.ndarray
    lengths: np.ndarray
    logp_with: np.ndarray
    entropy: np.ndarray
    version: int
    logp_placeholder: np.ndarray = None
    source_groups: np.ndarray = None

    def __post_init__(self):
        if self.group_size < 2:
            raise UsageError("group size must be at least 2")
        if self.source_groups is None:
            self.source_groups = np.arange(len(self.samples))

    @property
    def n_rollouts(self):
        return len(self.lengths)

    @property
    def sample_index(self):
        return np.repeat(np.arange(len(self.samples)), self.group_size)

    @property
    def rollout_index(self):
        return np.tile(np.arange(self.group_size), len(self.samples))

    @property
    def valid(self):
        return np.arange(self.tokens.shape[1])[None, :] < self.lengths[:, None]

    @property
    def n_tokens(self):
        return int(self.lengths.sum())

    def record(self, n):
        ln = int(self.lengths[n])
        ph = None if self.logp_placeholder is None else self.logp_placeholder[n, :ln].copy()
        return RolloutRecord(int(n // self.group_size), int(n % self.group_size),
                             self.tokens[n, :ln].copy(), ln, self.logp_with[n, :ln].copy(),
                             self.entropy[n, :ln].copy(), ph, self.version)

    def records(self):
        return [self.record(n) for n in range(self.n_rollouts)]

    def response(self, n):
        return self.tokens[n, :self.lengths[n]].tolist()

    def subset(self, groups):
        """Keep whole groups (indices into ``samples``), re-indexed from 0."""
        groups = np.asarray(groups, dtype=np.int64)
        rows = (groups[:, None] * self.group_size + np.arange(self.group_size)).reshape(-1)
        lmax = int(self.lengths[rows].max()) if rows.size else 0
        ph = None if self.logp_placeholder is None else self.logp_placeholder[rows, :lmax]
        return RolloutBatch([self.samples[g] for g in groups], self.group_size,
                            self.tokens[rows, :lmax], self.lengths[rows],
                            self.logp_with[rows, :lmax], self.entropy[rows, :lmax],
                            self.version, ph, self.source_groups[groups])

    def rows(self, rows):
        """Arbitrary rollout rows as plain arrays (no group structure)."""
        rows = np.asarray(rows)
        lmax = int(self.lengths[rows].max())
        return (self.tokens[rows, :lmax], self.lengths[rows])


def _prompt_arrays(samples, group_size, condition, task):
    cells = np.stack([_cells(s.grid, condition, task) for s in samples])
    questions = np.array([s.question for s in samples], dtype=np.int64)
    return np.repeat(cells, group_size, axis=0), np.repeat(questions, group_size, axis=0)


def _decode(params, cells, questions, max_len, choose):
    n = cells.shape[0]
    tokens = np.full((n, max_len), st.PAD, dtype=np.int64)
    logp = np.zeros((n, max_len))
    ent = np.zeros((n, max_len))
    lengths = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    p = params.constants()
    prompt = np.concatenate([questions, np.full((n, 1), st.BOS)], axis=1)
    for t in range(max_len):
        act = np.nonzero(~done)[0]
        if act.size == 0:
            break
        text = np.concatenate([prompt[act], tokens[act, :t]], axis=1)
        with dc.no_grad():
            out = forward(p, params.config, params.task, cells[act], text)
        lp = _log_softmax(out.logits.values[:, t, :])
        probs = np.exp(lp)
        tok, e = choose(probs)
        tokens[act, t] = tok
        logp[act, t] = lp[np.arange(act.size), tok]
        ent[act, t] = e
        lengths[act] += 1
        done[act[tok == st.EOS]] = True
    return tokens, lengths, logp, ent


def sample_rollouts(params, samples, group_size, top_p=0.95, max_len=None, rng_seed=0,
                    entropy_p=0.95, renormalize_entropy=False):
    """Draw ``group_size`` nucleus-sampled responses per sample.

    Records, per generated token, the log-probability under the full
    distribution and the top-p entropy of that distribution.
    """
    if not 0.0 < top_p <= 1.0:
        raise UsageError(f"topP must lie in (0, 1], got {top_p}")
    if group_size < 2:
        raise UsageError("group size must be at least 2")
    max_len = params.config.max_len if max_len is None else max_len
    if max_len > params.config.max_len:
        raise UsageError("maxLen exceeds the policy's position table")
    rng = np.random.default_rng(rng_seed)

    def choose(probs):
        nucleus = np.where(nucleus_mask(probs, top_p), probs, 0.0)
        cum = np.cumsum(nucleus, axis=-1)
        u = rng.random(probs.shape[0]) * cum[:, -1]
        tok = (cum <= u[:, None]).sum(axis=-1)
        tok = np.minimum(tok, probs.shape[1] - 1)
        # guard against landing on a zero-mass slot through rounding
        bad = nucleus[np.arange(len(tok)), tok] == 0
        if bad.any():
            tok[bad] = np.argmax(nucleus[bad], axis=-1)
        return tok, top_p_entropy(probs, entropy_p, renormalize_entropy)

    cells, questions = _prompt_arrays(samples, group_size, "image", params.task)
    tokens, lengths, logp, ent = _decode(params, cells, questions, max_len, choose)
    lmax = int(lengths.max())
    batch = RolloutBatch(list(samples), group_size, tokens[:, :lmax], lengths,
                         logp[:, :lmax], ent[:, :lmax], params.version)
    # store the teacher-forced values, so that every later rescoring of the
    # same tokens (placeholder pass, first update step) agrees bit for bit
    batch.logp_with = score_batch(params, batch, "image").logp
    return batch


def greedy_decode(params, samples, max_len=None):
    max_len = params.config.max_len if max_len is None else max_len

    def choose(probs):
        return np.argmax(probs, axis=-1), np.zeros(probs.shape[0])

    cells = np.stack([_cells(s.grid, "image", params.task) for s in samples])
    questions = np.array([s.question for s in samples], dtype=np.int64)
    tokens, lengths, _, _ = _decode(params, cells, questions, max_len, choose)
    return [tokens[n, :lengths[n]].tolist() for n in range(len(samples))]


def greedy_reward(params, samples, max_len=None):
    responses = greedy_decode(params, samples, max_len)
    return float(np.mean([st.verify(r, s.answer) for r, s in zip(responses, samples)]))


# ---------------------------------------------------------------------------
# teacher-forced scoring


def _teacher_text(questions, tokens):
    n = tokens.shape[0]
    prefix = tokens[:, :-1] if tokens.shape[1] else tokens
    return np.concatenate([questions, np.full((n, 1), st.BOS), prefix], axis=1)


def response_logprobs(p, params_like, cells, questions, tokens, attention=False):
    """Teacher-forced ``log pi(o_t | o_<t, image, q)`` as a ``(N, L)`` Tensor.

    ``p`` is a dict of Tensors (leaves for training, constants otherwise);
    ``params_like`` supplies the configs. Padding positions hold the
    log-probability of whatever token sits there and must be masked by the
    caller.
    """
    text = _teacher_text(questions, tokens)
    out = forward(p, params_like.config, params_like.task, cells, text, attention)
    lp = dc.log_softmax(out.logits, axis=-1)
    return dc.pick(lp, tokens), lp, out


@dataclass
class ScoreResult:
    logp: np.ndarray
    probs: np.ndarray = None
    image_attention: np.ndarray = None


def score_batch(params, batch, condition, return_probs=False, return_attention=False):
    """Teacher-forced per-token log-probs of a whole batch under one condition."""
    cells, questions = _prompt_arrays(batch.samples, batch.group_size, condition, params.task)
    with dc.no_grad():
        logp, lp_all, out = response_logprobs(params.constants(), params, cells, questions,
                                              batch.tokens, attention=return_attention)
    valid = batch.valid
    result = ScoreResult(np.where(valid, logp.values, 0.0))
    if return_probs:
        result.probs = np.exp(lp_all.values)
    if return_attention:
        att = np.stack(out.image_attention)
        result.image_attention = np.where(valid[None], att, 0.0)
    return result


def score_under_condition(params, record, sample, condition):
    """Per-token log-probs of one recorded rollout under ``image`` or ``placeholder``."""
    cells = _cells(sample.grid, condition, params.task).reshape(1, -1)
    questions = np.array([sample.question])
    tokens = np.asarray(record.tokens, dtype=np.int64).reshape(1, -1)
    with dc.no_grad():
        logp, _, _ = response_logprobs(params.constants(), params, cells, questions, tokens)
    return logp.values[0]


# ---------------------------------------------------------------------------
# format warm-up


def format_warmup(params, steps=300, seed=0, batch_size=64, lr=1e-2):
    """Teach the answer-span format with answers drawn at random.

    The target answers are independent of the grid, so the result knows the
    response syntax but not the task. Returns new params at the same version.
    """
    params = params.snapshot()
    if steps <= 0:
        return params
    task = params.task
    rng = np.random.default_rng(seed)
    opt = Optimizer("adam", lr=lr)
    for _ in range(steps):
        samples = [st.generate_sample(int(s), task)
                   for s in rng.integers(0, 2**63 - 1, size=batch_size)]
        targets = []
        for s in samples:
            if s.question[0] == st.COUNT:
                fake = str(int(rng.integers(0, task.n_cells + 1)))
            else:
                fake = st.symbol_name(int(rng.integers(1, task.alphabet_size + 1)))
            targets.append([st.ANS_START, *st.answer_tokens(fake), st.ANS_END, st.EOS])
        lmax = max(len(t) for t in targets)
        tokens = np.full((batch_size, lmax), st.PAD, dtype=np.int64)
        for n, t in enumerate(targets):
            tokens[n, :len(t)] = t
        valid = tokens != st.PAD
        cells = np.stack([s.grid.reshape(-1) for s in samples])
        questions = np.array([s.question for s in samples])
        leaves = params.leaves()
        logp, _, _ = response_logprobs(leaves, params, cells, questions, tokens)
        objective = (logp * valid).sum() * (1.0 / valid.sum())
        objective.backward()
        opt.step(params.arrays, {k: v.grad for k, v in leaves.items()})
    return params


# ---------------------------------------------------------------------------
# checkpoints


def _config_dict(params):
    return {"policy": params.config.__dict__,
            "task": {**params.task.__dict__,
                     "question_families": list(params.task.question_families)}}


def save_checkpoint(params, path):
    """Binary dump: magic line, JSON header line, then raw little-endian float64."""
    names = sorted(params.arrays)
    header = {"format": CHECKPOINT_FORMAT, "version_tag": params.version,
              **_config_dict(params),
              "arrays": [{"name": k, "shape": list(params.arrays[k].shape)} for k in names]}
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for k in names:
            fh.write(np.ascontiguousarray(params.arrays[k], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.readline().rstrip(b"\n") != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        try:
            header = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {header.get('format')}")
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    cfg = PolicyConfig(**header["policy"])
    task = st.TaskConfig(**header["task"])
    expected = param_shapes(cfg, task)
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise CheckpointError(f"{path}: parameter shapes do not match the stored config")
    return PolicyParams(arrays, cfg, task, header["version_tag"])


def with_version(params, version):
    return replace(params, version=version)
