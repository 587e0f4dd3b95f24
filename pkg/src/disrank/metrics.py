"""Ranking metrics: PNR, nDCG@k, GSB delta, score histograms and a latency bench."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .textmodel import BOS, EOS, RankerModel


@dataclass
class QueryGroup:
    query: str
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 1:
            raise ValueError("labels and scores must be 1-D and of equal length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 4):
            raise ValueError("labels must lie in 0..4")


@dataclass
class GsbCounts:
    good: int
    same: int
    bad: int


def pair_counts(labels, scores) -> tuple[int, int]:
    """(concordant, discordant) over ordered pairs with labels[i] > labels[j]."""
    y = np.asarray(labels)
    f = np.asarray(scores, dtype=np.float64)
    ordered = y[:, None] > y[None, :]
    conc = int((ordered & (f[:, None] > f[None, :])).sum())
    disc = int((ordered & (f[:, None] < f[None, :])).sum())
    return conc, disc


def pnr(labels, scores) -> float:
    """Concordant / discordant pair ratio for one query.

    Score ties count on neither side.  Returns ``inf`` when there are
    concordant pairs but no discordant ones, and ``nan`` (undefined) when
    both counts are zero.
    """
    if len(labels) < 2:
        raise ValueError("pnr needs at least 2 items")
    conc, disc = pair_counts(labels, scores)
    if disc == 0:
        return math.inf if conc > 0 else math.nan
    return conc / disc


def ndcg_at_k(labels, scores, k: int) -> float:
    """nDCG@k with gain 2^y - 1 and discount 1/log2(rank + 1).

    Items are ranked by descending score, ties kept in input order.  A
    group whose labels are all zero scores 0.0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 1:
        raise ValueError("ndcg needs at least 1 item")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    n = min(k, y.size)
    disc = 1.0 / np.log2(np.arange(2, n + 2))
    ideal = float(((2.0 ** np.sort(y)[::-1][:n] - 1) * disc).sum())
    if ideal == 0:
        return 0.0
    return float(((2.0 ** y[order][:n] - 1) * disc).sum()) / ideal


def gsb_delta(good: int | GsbCounts, same: int | None = None, bad: int | None = None) -> float:
    """(good - bad) / (good + same + bad)."""
    if isinstance(good, GsbCounts):
        good, same, bad = good.good, good.same, good.bad
    if min(good, same, bad) < 0:
        raise ValueError("GSB counts must be non-negative")
    n = good + same + bad
    if n == 0:
        raise ValueError("GSB counts are all zero")
    return (good - bad) / n


def aggregate_pnr(values: Iterable[float]) -> dict:
    """Mean over finite per-query PNR; infinite and undefined are counted apart."""
    vals = list(values)
    finite = sorted(v for v in vals if math.isfinite(v))
    n_inf = sum(1 for v in vals if math.isinf(v))
    n_nan = sum(1 for v in vals if math.isnan(v))
    if finite:
        mean = math.fsum(finite) / len(finite)
    else:
        mean = math.inf if n_inf else math.nan
    return {"pnr": mean, "pnr_finite": len(finite), "pnr_infinite": n_inf, "pnr_undefined": n_nan}


def pooled_pnr(groups: Sequence[QueryGroup]) -> float:
    """Concordant over discordant pairs summed across all queries.

    Unlike the per-query mean this is not pulled above 1 by queries with
    few discordant pairs, so random scores land near 1.
    """
    conc = disc = 0
    for g in groups:
        c, d = pair_counts(g.labels, g.scores)
        conc += c
        disc += d
    if disc == 0:
        return math.inf if conc else math.nan
    return conc / disc


def evaluate_groups(groups: Sequence[QueryGroup], ks: Sequence[int] = (5, 10)) -> dict:
    report = {"queries": len(groups)}
    report.update(aggregate_pnr(pnr(g.labels, g.scores) for g in groups if len(g.labels) >= 2))
    report["pnr_pooled"] = pooled_pnr(groups)
    for k in ks:
        vals = sorted(ndcg_at_k(g.labels, g.scores, k) for g in groups)
        report[f"ndcg@{k}"] = math.fsum(vals) / len(vals) if vals else math.nan
    return report


def format_report(report: dict) -> str:
    lines = []
    for key, value in report.items():
        lines.append(f"{key}={value:.6f}" if isinstance(value, float) else f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_report(report: dict, text_path: str | Path, json_path: str | Path) -> None:
    Path(text_path).write_text(format_report(report), encoding="utf-8")
    # json cannot carry inf/nan portably
    clean = {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v) for k, v in report.items()}
    Path(json_path).write_text(json.dumps(clean, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- score distribution ----------------------------------------------------


def score_histogram(scores: Sequence[float], bins: int) -> list[tuple[float, float, int]]:
    """Equal-width bins over [min, max]; one bin when all scores are equal."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("score_histogram needs at least one score")
    lo, hi = float(s.min()), float(s.max())
    if lo == hi:
        return [(lo, hi, int(s.size))]
    counts, edges = np.histogram(s, bins=bins, range=(lo, hi))
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]


def write_histogram_csv(path: str | Path, hist: Sequence[tuple[float, float, int]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in hist:
            w.writerow([repr(lo), repr(hi), c])


# --- latency ---------------------------------------------------------------


@dataclass
class BenchResult:
    mean_ms: float
    params: int


def latency_bench(
    model: RankerModel, batch: int = 48, seq_len: int = 256, iters: int = 10, warmup: int = 2, seed: int = 0
) -> BenchResult:
    """Mean wall-clock milliseconds per forward batch, after warm-up."""
    if iters < 10:
        raise ValueError("iters must be >= 10")
    if seq_len > model.config.max_seq_len or seq_len < 3:
        raise ValueError(f"seq_len must be in [3, {model.config.max_seq_len}]")
    rng = np.random.default_rng(seed)
    body = rng.integers(97, 123, size=(batch, seq_len - 2))
    seqs = [[BOS, *row.tolist(), EOS] for row in body]
    with nx.no_grad():
        for _ in range(warmup):
            model.score_batch(seqs)
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            model.score_batch(seqs)
            times.append(time.perf_counter() - t0)
    return BenchResult(mean_ms=1000.0 * sum(times) / len(times), params=model.param_count())
