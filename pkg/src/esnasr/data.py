"""Synthetic frames-to-tokens corpus, long-form concatenation and token error rate."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyInputError, InvalidConfigError, InvalidReferenceError
from .numerics import Prng, child_seed


@dataclass(frozen=True)
class SynthConfig:
    """Each token owns a fixed random embedding; an utterance repeats each token's
    embedding ``frames_per_token`` times and adds Gaussian noise.

    ``start_index`` lets disjoint splits share one task (same embeddings, same seed).
    """
    vocab_size: int = 16
    feature_dim: int = 16
    frames_per_token: int = 3
    noise_sigma: float = 0.3
    min_label_len: int = 3
    max_label_len: int = 8
    num_examples: int = 5000
    seed: int = 0
    start_index: int = 0
    embedding_scale: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidConfigError("vocab_size must be >= 2")
        if self.frames_per_token < 1 or self.feature_dim < 1:
            raise InvalidConfigError("frames_per_token and feature_dim must be >= 1")
        if not 1 <= self.min_label_len <= self.max_label_len:
            raise InvalidConfigError("need 1 <= min_label_len <= max_label_len")
        if self.embedding_scale <= 0:
            raise InvalidConfigError("embedding_scale must be positive")
        if self.noise_sigma < 0 or self.num_examples < 0:
            raise InvalidConfigError("noise_sigma and num_examples must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Utterance:
    id: str
    labels: list
    frames: np.ndarray


def token_embeddings(config: SynthConfig) -> np.ndarray:
    """(V+1, feature_dim) table; row 0 is unused so row ``k`` belongs to token ``k``."""
    rng = np.random.default_rng(child_seed(config.seed, "token-embeddings"))
    table = np.zeros((config.vocab_size + 1, config.feature_dim))
    table[1:] = rng.normal(0.0, config.embedding_scale,
                           size=(config.vocab_size, config.feature_dim))
    return table


def make_utterance(config: SynthConfig, index: int, table: np.ndarray = None) -> Utterance:
    if table is None:
        table = token_embeddings(config)
    stream = Prng(child_seed(config.seed, f"utterance.{index}"))
    length = config.min_label_len + stream.randbelow(config.max_label_len - config.min_label_len + 1)
    labels = [1 + stream.randbelow(config.vocab_size) for _ in range(length)]
    frames = np.repeat(table[labels], config.frames_per_token, axis=0)
    if config.noise_sigma > 0:
        noise_rng = np.random.default_rng(stream.next_u64())
        frames = frames + noise_rng.normal(0.0, config.noise_sigma, size=frames.shape)
    return Utterance(f"synth-{config.seed}-{index}", labels, frames)


def synth_generate(config: SynthConfig) -> list:
    table = token_embeddings(config)
    return [make_utterance(config, config.start_index + i, table)
            for i in range(config.num_examples)]


def concat_longform(dataset: Sequence[Utterance], num_examples: int, utterances_per_example: int,
                    seed: int) -> list:
    """Long utterances built from randomly chosen sources (no repeats within one example)."""
    if not dataset:
        raise EmptyInputError("cannot build long-form examples from an empty dataset")
    if not 1 <= utterances_per_example <= len(dataset):
        raise InvalidConfigError(
            f"utterances_per_example must lie in [1, {len(dataset)}], got {utterances_per_example}")
    root = Prng(seed)
    out = []
    for i in range(num_examples):
        picks = root.split(i).sample(len(dataset), utterances_per_example)
        parts = [dataset[j] for j in picks]
        labels = [tok for u in parts for tok in u.labels]
        frames = np.concatenate([np.asarray(u.frames) for u in parts], axis=0)
        out.append(Utterance(f"long-{seed}-{i}", labels, frames))
    return out


# ---------------------------------------------------------------------------
# JSON-lines exchange format

def dump_jsonl(dataset: Iterable[Utterance], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for u in dataset:
            record = {"id": u.id, "labels": [int(t) for t in u.labels],
                      "frames": np.asarray(u.frames, dtype=np.float64).tolist()}
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            n += 1
    return n


def load_jsonl(path) -> list:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.append(Utterance(rec["id"], list(rec["labels"]), np.asarray(rec["frames"], dtype=np.float64)))
    return out


# ---------------------------------------------------------------------------
# error rate

@dataclass(frozen=True)
class WerResult:
    rate: float
    substitutions: int
    insertions: int
    deletions: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def edit_counts(reference: Sequence, hypothesis: Sequence) -> tuple:
    """(substitutions, insertions, deletions) of a minimum-cost alignment.

    Among equal-cost scripts the backtrace prefers substitution/match, then
    deletion, then insertion.
    """
    n, m = len(reference), len(hypothesis)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = reference[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ri == hypothesis[j - 1] else 1
            dist[i, j] = min(dist[i - 1, j - 1] + cost, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    s = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            cost = 0 if reference[i - 1] == hypothesis[j - 1] else 1
            if dist[i, j] == dist[i - 1, j - 1] + cost:
                s += cost
                i, j = i - 1, j - 1
                continue
        if i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return s, ins, dels


def wer(reference: Sequence, hypothesis: Sequence) -> WerResult:
    if len(reference) == 0:
        raise InvalidReferenceError("reference must be nonempty")
    s, i, d = edit_counts(list(reference), list(hypothesis))
    return WerResult((s + i + d) / len(reference), s, i, d)


def corpus_wer(pairs: Iterable) -> WerResult:
    """Pooled error rate: total edits over total reference tokens."""
    s = i = d = n = 0
    for ref, hyp in pairs:
        r = wer(ref, hyp)
        s, i, d = s + r.substitutions, i + r.insertions, d + r.deletions
        n += len(ref)
    if n == 0:
        raise InvalidReferenceError("no reference tokens")
    return WerResult((s + i + d) / n, s, i, d)
