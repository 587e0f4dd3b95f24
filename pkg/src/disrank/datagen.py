"""Synthetic clickstream corpus with a known relevance rule, plus JSONL I/O.

A document built for target label ``y`` puts ``round(y/4 * |query|)``
distinct query words in its title and makes a ``y/4`` share of its summary
words query words; every other word is a filler drawn from the vocabulary
minus the query's words.  Labels are then flipped with probability ``noise``.
"""

from __future__ import annotations

import json
import math
import string
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .numerics import Prng

SPLITS = ("cpt", "sft", "kd", "test")
FIELDS = ("query", "title", "summary", "label", "score")


class JsonlError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass
class LabeledRecord:
    query: str
    title: str = ""
    summary: str = ""
    label: int | None = None
    score: float | None = None

    def __post_init__(self):
        if not isinstance(self.query, str) or not self.query:
            raise ValueError("query must be a non-empty string")
        if not isinstance(self.title, str) or not isinstance(self.summary, str):
            raise ValueError("title and summary must be strings")
        if self.label is not None and (
            isinstance(self.label, bool) or not isinstance(self.label, int) or not 0 <= self.label <= 4
        ):
            raise ValueError(f"label must be an integer in 0..4, got {self.label!r}")
        if self.score is not None:
            if isinstance(self.score, bool) or not isinstance(self.score, (int, float)):
                raise ValueError(f"score must be a number, got {self.score!r}")
            self.score = float(self.score)

    def to_dict(self) -> dict:
        d = {"query": self.query, "title": self.title, "summary": self.summary}
        if self.label is not None:
            d["label"] = self.label
        if self.score is not None:
            d["score"] = self.score
        return d


def write_jsonl(path: str | Path, records: Iterable[LabeledRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[LabeledRecord]:
    records = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise JsonlError(path, lineno, f"malformed record ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise JsonlError(path, lineno, "record is not an object")
            unknown = sorted(set(obj) - set(FIELDS))
            if unknown:
                warnings.warn(f"{path}:{lineno}: ignoring unknown fields {unknown}", stacklevel=2)
            try:
                records.append(LabeledRecord(**{k: obj[k] for k in FIELDS if k in obj}))
            except (TypeError, ValueError) as exc:
                raise JsonlError(path, lineno, str(exc)) from None
    return records


@dataclass
class SynthConfig:
    vocab_words: int = 200
    n_queries: dict = field(default_factory=lambda: {"cpt": 2000, "sft": 2000, "kd": 1000, "test": 300})
    docs_per_query: int = 8
    query_words: tuple[int, int] = (2, 5)
    title_words: tuple[int, int] = (3, 8)
    summary_words: tuple[int, int] = (5, 20)
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.query_words = tuple(self.query_words)
        self.title_words = tuple(self.title_words)
        self.summary_words = tuple(self.summary_words)
        if self.vocab_words < 20:
            raise ValueError("vocab_words must be >= 20")
        if self.docs_per_query < 2:
            raise ValueError("docs_per_query must be >= 2")
        if not 0 <= self.noise < 0.5:
            raise ValueError("noise must be in [0, 0.5)")
        for name in ("query_words", "title_words", "summary_words"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must be an interval of positive integers")
        if self.query_words[1] > self.vocab_words // 2:
            raise ValueError("queries would exhaust the vocabulary")
        if set(self.n_queries) != set(SPLITS) or any(v < 0 for v in self.n_queries.values()):
            raise ValueError(f"n_queries needs non-negative counts for {SPLITS}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_vocab(n: int, rng: np.random.Generator) -> list[str]:
    letters = np.array(list(string.ascii_lowercase))
    words: list[str] = []
    seen = set()
    while len(words) < n:
        w = "".join(rng.choice(letters, size=int(rng.integers(3, 7))))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def build_document(
    query_words: list[str], y: int, vocab: list[str], cfg: SynthConfig, rng: np.random.Generator
) -> tuple[str, str]:
    """Title and summary whose query-word overlap encodes label ``y``."""
    qset = set(query_words)
    fillers = [w for w in vocab if w not in qset]
    k = round_half_up(y / 4 * len(query_words))
    n_title = max(int(rng.integers(cfg.title_words[0], cfg.title_words[1] + 1)), k)
    title = [query_words[i] for i in rng.permutation(len(query_words))[:k]]
    title += [fillers[i] for i in rng.integers(0, len(fillers), size=n_title - k)]
    title = [title[i] for i in rng.permutation(n_title)]

    n_sum = int(rng.integers(cfg.summary_words[0], cfg.summary_words[1] + 1))
    m = round_half_up(y / 4 * n_sum)
    summary = [query_words[i] for i in rng.integers(0, len(query_words), size=m)]
    summary += [fillers[i] for i in rng.integers(0, len(fillers), size=n_sum - m)]
    summary = [summary[i] for i in rng.permutation(n_sum)]
    return " ".join(title), " ".join(summary)


def generate_splits(cfg: SynthConfig) -> dict[str, list[LabeledRecord]]:
    prng = Prng(cfg.seed)
    vocab = make_vocab(cfg.vocab_words, prng.stream("datagen/vocab"))
    used: set[str] = set()
    out: dict[str, list[LabeledRecord]] = {}
    for split in SPLITS:
        rng = prng.stream(f"datagen/{split}")
        recs = []
        for _ in range(cfg.n_queries[split]):
            while True:
                nq = int(rng.integers(cfg.query_words[0], cfg.query_words[1] + 1))
                qwords = [vocab[i] for i in rng.choice(len(vocab), size=nq, replace=False)]
                query = " ".join(qwords)
                if query not in used:
                    used.add(query)
                    break
            for _ in range(cfg.docs_per_query):
                y = int(rng.integers(0, 5))
                title, summary = build_document(qwords, y, vocab, cfg, rng)
                label = y
                if rng.random() < cfg.noise:
                    label = int(rng.choice([v for v in range(5) if v != y]))
                if split == "cpt":
                    if y >= 3:
                        recs.append(LabeledRecord(query, title, summary))
                elif split == "kd":
                    recs.append(LabeledRecord(query, title, summary))
                else:
                    recs.append(LabeledRecord(query, title, summary, label=label))
        out[split] = recs
    return out


def gen_corpus(cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write ``cpt/sft/kd/test.jsonl`` into ``out_dir``; returns the paths."""
    out_dir = Path(out_dir)
    splits = generate_splits(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, recs in splits.items():
        paths[split] = out_dir / f"{split}.jsonl"
        write_jsonl(paths[split], recs)
    return paths


def group_by_query(records: Iterable[LabeledRecord]) -> dict[str, list[LabeledRecord]]:
    """Query -> records, preserving first-seen query order and record order."""
    groups: dict[str, list[LabeledRecord]] = {}
    for r in records:
        groups.setdefault(r.query, []).append(r)
    return groups
