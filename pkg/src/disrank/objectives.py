"""Training objectives for continued pre-training, fine-tuning and distillation.

All losses return scalar tensors averaged over the batch.  Teacher scores
passed to the distillation losses are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .textmodel import TOKENIZER, QueryDoc, RankerModel, encode_pair, pad_batch


@dataclass
class Hyperparams:
    hinge_threshold: float = 0.1
    beta: float = 0.4
    cpt_lr: float = 1e-3
    sft_lr: float = 1e-3
    kd_lr: float = 1e-3
    cpt_batch: int = 16
    sft_batch: int = 16
    kd_batch: int = 32
    cpt_epochs: int = 1
    sft_epochs: int = 1
    kd_epochs: int = 2
    pairs_per_query: int = 8
    grad_clip: float = 1.0

    def __post_init__(self):
        if not self.hinge_threshold > 0:
            raise ValueError("hinge_threshold must be > 0")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        for name in ("cpt_lr", "sft_lr", "kd_lr"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("cpt_batch", "sft_batch", "kd_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("cpt_epochs", "sft_epochs", "kd_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 1 <= self.pairs_per_query <= 8:
            raise ValueError("pairs_per_query must be in [1, 8]")


@dataclass
class Triplet:
    query: str
    pos: QueryDoc
    neg: QueryDoc
    teacher_pos_score: float | None = None
    teacher_neg_score: float | None = None

    def __post_init__(self):
        if not (self.pos.query == self.neg.query == self.query):
            raise ValueError("triplet documents must share the query")


# --- continued pre-training ------------------------------------------------


def cpt_targets(qd: QueryDoc, max_len: int | None = None, truncate: bool = False) -> tuple[list[int], list[int]]:
    """Token sequence and a per-position target mask for next-token training.

    ``mask[j] == 1`` when token ``j`` is predicted: the separators, title,
    summary and ``</s>``.  ``<s>`` and the query bytes only condition.
    With ``truncate`` the document is shortened the same way
    :func:`encode_pair` does; otherwise an oversize sequence is an error.
    """
    if not qd.title and not qd.summary:
        raise ValueError("cpt_loss: empty title and summary leave nothing to predict")
    n_query = len(TOKENIZER.encode(qd.query))
    if truncate:
        seq = encode_pair(qd, max_len)
    else:
        seq = encode_pair(qd, 1 << 30)
        if max_len is not None and len(seq) > max_len:
            raise ValueError(f"cpt_loss: sequence of {len(seq)} tokens exceeds max_len {max_len}")
    mask = [0] * (n_query + 1) + [1] * (len(seq) - n_query - 1)
    return seq, mask


def cpt_loss_from_logits(logits: Tensor, ids: np.ndarray, target_mask: np.ndarray) -> Tensor:
    """Masked next-token cross-entropy: logits at j-1 predict token j."""
    B, T, V = logits.shape
    sliced = nx.reshape(logits, (B * T, V))
    targets = np.zeros((B, T), dtype=np.int64)
    targets[:, :-1] = ids[:, 1:]
    mask = np.zeros((B, T), dtype=np.int64)
    mask[:, :-1] = target_mask[:, 1:]
    return nx.cross_entropy(sliced, targets.reshape(-1), mask.reshape(-1))


def cpt_loss_batch(model: RankerModel, docs: Sequence[QueryDoc], truncate: bool = False) -> Tensor:
    seqs, masks = zip(*(cpt_targets(qd, model.config.max_seq_len, truncate) for qd in docs))
    return cpt_loss_from_sequences(model, seqs, masks)


def cpt_loss_from_sequences(model: RankerModel, seqs, masks) -> Tensor:
    ids, lengths = pad_batch(seqs)
    tm = np.zeros_like(ids)
    for i, m in enumerate(masks):
        tm[i, : len(m)] = m
    return cpt_loss_from_logits(model.lm_logits(ids, lengths), ids, tm)


def cpt_loss(model: RankerModel, qd: QueryDoc) -> Tensor:
    """Mean cross-entropy of generating title and summary given the query."""
    return cpt_loss_batch(model, [qd])


# --- ranking losses --------------------------------------------------------


def _vec(x) -> Tensor:
    if isinstance(x, Tensor):
        return nx.reshape(x, (1,)) if x.data.ndim == 0 else x
    return Tensor(np.atleast_1d(np.asarray(x, dtype=np.float64)))


def _const(x) -> Tensor:
    """Teacher scores never carry gradient."""
    data = x.data if isinstance(x, Tensor) else x
    return Tensor(np.atleast_1d(np.asarray(data, dtype=np.float64)))


def sft_hinge_loss(f_pos, f_neg, threshold: float = 0.1) -> Tensor:
    """``max(0, threshold - (f_pos - f_neg))`` averaged over the batch."""
    if not threshold > 0:
        raise ValueError("hinge threshold must be > 0")
    margin = nx.sub(_vec(f_pos), _vec(f_neg))
    return nx.mean(nx.relu(nx.add(nx.scale(margin, -1.0), threshold)))


def point_mse_loss(t_pos, t_neg, s_pos, s_neg) -> Tensor:
    """Squared teacher/student score error on both documents of each triplet."""
    return nx.add(nx.mse(_vec(s_pos), _const(t_pos)), nx.mse(_vec(s_neg), _const(t_neg)))


def margin_mse_loss(t_pos, t_neg, s_pos, s_neg) -> Tensor:
    """Squared error between the student's and teacher's pos-neg margins."""
    t_margin = _const(t_pos).data - _const(t_neg).data
    return nx.mse(nx.sub(_vec(s_pos), _vec(s_neg)), Tensor(t_margin))


def hybrid_loss(t_pos, t_neg, s_pos, s_neg, beta: float = 0.4) -> Tensor:
    if not beta >= 0:
        raise ValueError("beta must be >= 0")
    point = point_mse_loss(t_pos, t_neg, s_pos, s_neg)
    margin = margin_mse_loss(t_pos, t_neg, s_pos, s_neg)
    return nx.add(point, nx.scale(margin, beta))
