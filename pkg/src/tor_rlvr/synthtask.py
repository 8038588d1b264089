"""Seeded grid-counting task with a programmatic answer checker.

A sample is a small grid of symbol cells (the "image"), a short question
(``COUNT s`` or ``COMPARE a b``) and a canonical answer string. Responses are
token sequences; the answer is whatever sits between the single
``ANS_START`` / ``ANS_END`` pair.
"""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

# cell value 0 is the empty / placeholder cell; 1..alphabet_size are symbols
CELL_PAD = 0

PAD, EOS, BOS, ANS_START, ANS_END, COUNT, COMPARE = range(7)
SPECIALS = ("PAD", "EOS", "BOS", "ANS_START", "ANS_END", "COUNT", "COMPARE")
DIGIT0 = len(SPECIALS)
SYMBOL0 = DIGIT0 + 10
MAX_ALPHABET = 26


def symbol_name(symbol):
    return string.ascii_uppercase[symbol - 1]


def symbol_token(symbol):
    return SYMBOL0 + symbol - 1


def digit_token(d):
    return DIGIT0 + d


@dataclass(frozen=True)
class TaskConfig:
    grid_height: int = 3
    grid_width: int = 3
    alphabet_size: int = 4
    question_families: tuple = ("count",)
    max_answer: int = 9

    def __post_init__(self):
        object.__setattr__(self, "question_families", tuple(self.question_families))
        if not 2 <= self.alphabet_size <= MAX_ALPHABET:
            raise ConfigurationError(f"alphabetSize must lie in [2, {MAX_ALPHABET}]")
        if self.grid_height < 1 or self.grid_width < 1:
            raise ConfigurationError("grid dimensions must be positive")
        if self.grid_height * self.grid_width > 64:
            raise ConfigurationError("gridHeight*gridWidth must not exceed 64")
        if self.max_answer < self.grid_height * self.grid_width:
            raise ConfigurationError("maxAnswer must be at least gridHeight*gridWidth")
        if not self.question_families or set(self.question_families) - {"count", "compare"}:
            raise ConfigurationError(f"unknown question families {self.question_families}")

    @property
    def n_cells(self):
        return self.grid_height * self.grid_width

    @property
    def question_length(self):
        return 3 if "compare" in self.question_families else 2

    @property
    def vocab_size(self):
        return SYMBOL0 + self.alphabet_size


def token_string(tok):
    if tok < DIGIT0:
        return SPECIALS[tok]
    if tok < SYMBOL0:
        return str(tok - DIGIT0)
    return symbol_name(tok - SYMBOL0 + 1)


def decode(tokens):
    return " ".join(token_string(int(t)) for t in tokens)


def encode(text):
    """Inverse of :func:`decode` for whitespace-separated token names."""
    out = []
    for word in text.split():
        if word in SPECIALS:
            out.append(SPECIALS.index(word))
        elif word.isdigit() and len(word) == 1:
            out.append(digit_token(int(word)))
        elif len(word) == 1 and word in string.ascii_uppercase:
            out.append(symbol_token(string.ascii_uppercase.index(word) + 1))
        else:
            raise ValueError(f"unknown token {word!r}")
    return out


@dataclass(frozen=True)
class SyntheticSample:
    grid: np.ndarray = field(compare=False)
    question: tuple
    answer: str
    seed: int = -1

    def __eq__(self, other):
        return (isinstance(other, SyntheticSample) and self.seed == other.seed
                and self.question == other.question and self.answer == other.answer
                and np.array_equal(self.grid, other.grid))

    def __hash__(self):
        return hash((self.seed, self.question, self.answer, self.grid.tobytes()))

    def to_json(self):
        return json.dumps({"seed": int(self.seed), "grid": self.grid.tolist(),
                           "question": [int(t) for t in self.question],
                           "answer": self.answer})

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        return cls(np.array(d["grid"], dtype=np.int64), tuple(d["question"]),
                   d["answer"], d["seed"])


def placeholder_grid(config):
    """The empty image: every cell is the placeholder symbol."""
    return np.full((config.grid_height, config.grid_width), CELL_PAD, dtype=np.int64)


def answer_for(grid, question):
    grid = np.asarray(grid)
    kind = question[0]
    if kind == COUNT:
        s = question[1] - SYMBOL0 + 1
        return str(int(np.count_nonzero(grid == s)))
    if kind == COMPARE:
        a, b = (q - SYMBOL0 + 1 for q in question[1:3])
        ca, cb = np.count_nonzero(grid == a), np.count_nonzero(grid == b)
        if ca != cb:
            return symbol_name(a if ca > cb else b)
        return symbol_name(min(a, b))
    raise ValueError(f"unknown question kind {kind}")


def make_sample(grid, question, config, seed=-1):
    """Build a sample from an explicit grid and question (answer derived)."""
    question = tuple(int(t) for t in question)
    question = question + (PAD,) * (config.question_length - len(question))
    grid = np.asarray(grid, dtype=np.int64).reshape(config.grid_height, config.grid_width)
    return SyntheticSample(grid, question, answer_for(grid, question), seed)


def generate_sample(seed, config):
    rng = np.random.default_rng(seed)
    grid = rng.integers(1, config.alphabet_size + 1,
                        size=(config.grid_height, config.grid_width))
    family = config.question_families[rng.integers(len(config.question_families))]
    if family == "count":
        question = (COUNT, symbol_token(int(rng.integers(1, config.alphabet_size + 1))))
    else:
        a, b = rng.choice(np.arange(1, config.alphabet_size + 1), size=2, replace=False)
        question = (COMPARE, symbol_token(int(a)), symbol_token(int(b)))
    return make_sample(grid, question, config, seed)


def answer_tokens(answer):
    if answer.isdigit():
        return [digit_token(int(c)) for c in answer]
    return encode(answer)


def render_gold(sample):
    return [ANS_START, *answer_tokens(sample.answer), ANS_END, EOS]


def _canonical(span):
    text = "".join(token_string(t) for t in span)
    if text.isdigit():
        return str(int(text))
    return text


def verify(response_tokens, ground_truth):
    """Binary reward: 1 iff exactly one well-formed answer span matches."""
    toks = [int(t) for t in response_tokens]
    if toks.count(ANS_START) != 1 or toks.count(ANS_END) != 1:
        return 0
    lo, hi = toks.index(ANS_START), toks.index(ANS_END)
    span = toks[lo + 1:hi]
    if hi < lo or not span or any(not DIGIT0 <= t < SYMBOL0 + MAX_ALPHABET for t in span):
        return 0
    return int(_canonical(span) == ground_truth)


def write_jsonl(samples, path):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(s.to_json() + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [SyntheticSample.from_json(line) for line in fh if line.strip()]
