"""Training and scoring loops for the three pipeline stages.

Each loop draws all of its randomness from the generator it is handed and
reports progress through a ``log`` callable that receives one finished
``key=value`` line per call.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .datagen import LabeledRecord, group_by_query
from .metrics import QueryGroup, aggregate_pnr, evaluate_groups, pnr
from .objectives import (
    Hyperparams,
    cpt_loss_from_sequences,
    cpt_targets,
    hybrid_loss,
    margin_mse_loss,
    sft_hinge_loss,
)
from .textmodel import QueryDoc, RankerModel, TokenizerError, encode_pair, score_sequences

Log = Callable[[str], None]
LOSS_MODES = ("point", "margin", "hybrid")
GAP_SAMPLE = 512


class DegenerateDataError(ValueError):
    """Training data that yields no usable examples."""


def _quiet(_: str) -> None:
    pass


def as_querydoc(r: LabeledRecord) -> QueryDoc:
    return QueryDoc(r.query, r.title, r.summary)


def bucketed_batches(lengths: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches of indices with similar lengths, to limit padding."""
    perm = rng.permutation(len(lengths))
    window = batch_size * 16
    batches = []
    lengths = np.asarray(lengths)
    for start in range(0, len(perm), window):
        chunk = perm[start : start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches += [chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _step(model: RankerModel, opt: nx.Adam, loss: nx.Tensor, clip: float) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise nx.NonFiniteError("training loss is not finite")
    nx.backward(loss)
    if clip > 0:
        nx.clip_grad_norm(opt.params, clip)
    opt.step()
    return value


# --- continued pre-training ------------------------------------------------


def train_cpt(
    model: RankerModel, records: Sequence[LabeledRecord], hp: Hyperparams, rng: np.random.Generator, log: Log = _quiet
) -> list[float]:
    """Teacher-forced title/summary generation from the query."""
    examples = []
    for r in records:
        if not r.title and not r.summary:
            continue
        try:
            examples.append(cpt_targets(as_querydoc(r), model.config.max_seq_len, truncate=True))
        except TokenizerError:
            continue
    if not examples:
        raise DegenerateDataError("no usable continued pre-training documents")
    opt = nx.Adam(model.parameters(), lr=hp.cpt_lr)
    lengths = [len(s) for s, _ in examples]
    history = []
    for epoch in range(1, hp.cpt_epochs + 1):
        total, weight = 0.0, 0
        for idx in bucketed_batches(lengths, hp.cpt_batch, rng):
            seqs = [examples[i][0] for i in idx]
            masks = [examples[i][1] for i in idx]
            loss = cpt_loss_from_sequences(model, seqs, masks)
            total += _step(model, opt, loss, hp.grad_clip) * len(idx)
            weight += len(idx)
        history.append(total / weight)
        log(f"epoch={epoch} split=cpt loss={history[-1]:.6f}")
    return history


# --- supervised fine-tuning ------------------------------------------------


def mine_triplets(
    groups: dict[str, list[LabeledRecord]], cap: int, rng: np.random.Generator
) -> list[tuple[LabeledRecord, LabeledRecord]]:
    """Up to ``cap`` random (pos, neg) pairs with a label gap of at least 1 per query."""
    out = []
    for recs in groups.values():
        pairs = [
            (i, j)
            for i in range(len(recs))
            for j in range(len(recs))
            if recs[i].label is not None and recs[j].label is not None and recs[i].label - recs[j].label >= 1
        ]
        if not pairs:
            continue
        chosen = rng.choice(len(pairs), size=min(cap, len(pairs)), replace=False)
        out += [(recs[pairs[c][0]], recs[pairs[c][1]]) for c in sorted(chosen)]
    return out


def split_validation(
    records: Sequence[LabeledRecord], n_val: int, rng: np.random.Generator
) -> tuple[list[LabeledRecord], list[LabeledRecord]]:
    """Hold out ``n_val`` whole queries (fewer if the data is small)."""
    groups = group_by_query(records)
    queries = list(groups)
    n_val = min(n_val, len(queries) // 5)
    held = {queries[i] for i in rng.permutation(len(queries))[:n_val]}
    train = [r for r in records if r.query not in held]
    val = [r for r in records if r.query in held]
    return train, val


def score_records(
    model: RankerModel, records: Sequence[LabeledRecord], max_len: int, batch_size: int = 64
) -> tuple[np.ndarray, list[int]]:
    """Model scores in input order plus the indices of records that could not be encoded."""
    seqs, kept, skipped = [], [], []
    for i, r in enumerate(records):
        try:
            seqs.append(encode_pair(as_querydoc(r), max_len))
            kept.append(i)
        except TokenizerError:
            skipped.append(i)
    scores = np.full(len(records), np.nan, dtype=np.float32)
    if seqs:
        scores[kept] = score_sequences(model, seqs, batch_size)
    return scores, skipped


def query_groups(records: Sequence[LabeledRecord], scores: np.ndarray) -> list[QueryGroup]:
    idx: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        if r.label is not None and np.isfinite(scores[i]):
            idx.setdefault(r.query, []).append(i)
    return [
        QueryGroup(q, [records[i].label for i in ii], scores[ii].astype(np.float64)) for q, ii in idx.items()
    ]


def evaluate_model(model: RankerModel, records: Sequence[LabeledRecord], max_len: int, batch_size: int = 64) -> dict:
    scores, skipped = score_records(model, records, max_len, batch_size)
    report = evaluate_groups(query_groups(records, scores))
    report["skipped"] = len(skipped)
    return report


def validation_pnr(model: RankerModel, records: Sequence[LabeledRecord], max_len: int) -> float:
    if not records:
        return math.nan
    scores, _ = score_records(model, records, max_len)
    return aggregate_pnr(pnr(g.labels, g.scores) for g in query_groups(records, scores))["pnr"]


def train_sft(
    model: RankerModel,
    records: Sequence[LabeledRecord],
    hp: Hyperparams,
    rng: np.random.Generator,
    max_len: int,
    val_records: Sequence[LabeledRecord] = (),
    log: Log = _quiet,
) -> dict:
    """Pairwise hinge fine-tuning of the decoder's ``</s>`` score."""
    groups = group_by_query(r for r in records if r.label is not None)
    encoded: dict[int, list[int]] = {}

    def enc(r: LabeledRecord) -> list[int] | None:
        key = id(r)
        if key not in encoded:
            try:
                encoded[key] = encode_pair(as_querydoc(r), max_len)
            except TokenizerError:
                encoded[key] = None
        return encoded[key]

    if not mine_triplets(groups, 1, np.random.default_rng(0)):
        raise DegenerateDataError("no (pos, neg) pairs with a label gap: every query has a single label value")
    opt = nx.Adam(model.parameters(), lr=hp.sft_lr)
    history = {"loss": [], "val_pnr": [validation_pnr(model, val_records, max_len)]}
    log(f"epoch=0 split=sft-val pnr={history['val_pnr'][0]:.6f}")
    for epoch in range(1, hp.sft_epochs + 1):
        triplets = [(enc(p), enc(n)) for p, n in mine_triplets(groups, hp.pairs_per_query, rng)]
        triplets = [t for t in triplets if t[0] is not None and t[1] is not None]
        if not triplets:
            raise DegenerateDataError("no encodable triplets")
        lengths = [max(len(p), len(n)) for p, n in triplets]
        total, weight = 0.0, 0
        for idx in bucketed_batches(lengths, hp.sft_batch, rng):
            b = len(idx)
            scores = model.score_batch([triplets[i][0] for i in idx] + [triplets[i][1] for i in idx])
            loss = sft_hinge_loss(nx.take(scores, np.arange(b)), nx.take(scores, np.arange(b, 2 * b)), hp.hinge_threshold)
            total += _step(model, opt, loss, hp.grad_clip) * b
            weight += b
        history["loss"].append(total / weight)
        history["val_pnr"].append(validation_pnr(model, val_records, max_len))
        log(f"epoch={epoch} split=sft loss={history['loss'][-1]:.6f}")
        log(f"epoch={epoch} split=sft-val pnr={history['val_pnr'][-1]:.6f}")
    return history


# --- distillation ----------------------------------------------------------


def distill_units(records: Sequence[LabeledRecord]) -> list[list[int]]:
    """Record indices grouped by query, in first-seen order."""
    by_query: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_query.setdefault(r.query, []).append(i)
    return list(by_query.values())


def query_triplets(group: Sequence[int], teacher: np.ndarray) -> list[tuple[int, int]]:
    """Every within-query pair, the higher-teacher-score record first."""
    out = []
    for a in range(len(group)):
        for b in range(a + 1, len(group)):
            i, j = group[a], group[b]
            out.append((i, j) if teacher[i] >= teacher[j] else (j, i))
    return out


def distill_batch_loss(
    model: RankerModel,
    seqs: Sequence[Sequence[int]],
    teacher: np.ndarray,
    pairs: Sequence[tuple[int, int]],
    singles: Sequence[int],
    mode: str,
    beta: float,
) -> nx.Tensor:
    """Mean per-unit loss over a batch of triplets and singleton documents.

    ``point`` is the hybrid loss with beta = 0; ``margin`` ignores singletons.
    """
    items = sorted({i for p in pairs for i in p} | set(singles))
    pos = {i: k for k, i in enumerate(items)}
    s = model.score_batch([seqs[i] for i in items])
    terms = []
    if pairs:
        ip = [pos[a] for a, _ in pairs]
        ineg = [pos[b] for _, b in pairs]
        tp = teacher[[a for a, _ in pairs]]
        tn = teacher[[b for _, b in pairs]]
        sp, sn = nx.take(s, ip), nx.take(s, ineg)
        if mode == "margin":
            loss = margin_mse_loss(tp, tn, sp, sn)
        else:
            loss = hybrid_loss(tp, tn, sp, sn, beta if mode == "hybrid" else 0.0)
        terms.append((loss, len(pairs)))
    if singles and mode != "margin":
        ss = nx.take(s, [pos[i] for i in singles])
        terms.append((nx.mse(ss, nx.Tensor(teacher[list(singles)])), len(singles)))
    if len(terms) == 1:
        return terms[0][0]
    n = sum(w for _, w in terms)
    return nx.add(nx.scale(terms[0][0], terms[0][1] / n), nx.scale(terms[1][0], terms[1][1] / n))


def score_gap(model: RankerModel, seqs, teacher: np.ndarray) -> float:
    s = score_sequences(model, seqs)
    return float(np.mean(np.abs(s.astype(np.float64) - teacher[: len(seqs)])))


def train_distill(
    model: RankerModel,
    records: Sequence[LabeledRecord],
    hp: Hyperparams,
    rng: np.random.Generator,
    max_len: int,
    mode: str = "hybrid",
    log: Log = _quiet,
) -> dict:
    """Fit student scores to teacher scores with point, margin or hybrid MSE."""
    if mode not in LOSS_MODES:
        raise ValueError(f"loss mode must be one of {LOSS_MODES}")
    usable = []
    for r in records:
        if r.score is None:
            raise ValueError("distillation records need a teacher score")
        try:
            usable.append((r, encode_pair(as_querydoc(r), max_len)))
        except TokenizerError:
            continue
    if not usable:
        raise DegenerateDataError("no scored records to distill from")
    recs = [r for r, _ in usable]
    seqs = [s for _, s in usable]
    teacher = np.array([r.score for r in recs], dtype=np.float64)
    gap_idx = np.arange(min(GAP_SAMPLE, len(seqs)))
    gap_seqs = [seqs[i] for i in gap_idx]

    groups = distill_units(recs)
    opt = nx.Adam(model.parameters(), lr=hp.kd_lr)
    history = {"loss": [], "gap": [score_gap(model, gap_seqs, teacher)]}
    log(f"epoch=0 split=kd gap={history['gap'][0]:.6f}")
    for epoch in range(1, hp.kd_epochs + 1):
        units = [g for g in groups if len(g) > 1 or mode != "margin"]
        if not units:
            raise DegenerateDataError("no distillation units for this loss")
        lengths = [max(len(seqs[i]) for i in g) for g in units]
        total, weight = 0.0, 0
        for idx in bucketed_batches(lengths, hp.kd_batch, rng):
            bp = [t for i in idx for t in query_triplets(units[i], teacher)]
            bs = [units[i][0] for i in idx if len(units[i]) == 1]
            loss = distill_batch_loss(model, seqs, teacher, bp, bs, mode, hp.beta)
            total += _step(model, opt, loss, hp.grad_clip) * len(idx)
            weight += len(idx)
        history["loss"].append(total / weight)
        history["gap"].append(score_gap(model, gap_seqs, teacher))
        log(f"epoch={epoch} split=kd loss={history['loss'][-1]:.6f} gap={history['gap'][-1]:.6f}")
    return history
