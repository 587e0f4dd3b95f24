import math

import numpy as np
import pytest
from gradcases import GRAD_TOL, LOSSES, loss_max_error, tiny_decoder

from disrank import numerics as nx
from disrank.numerics import Tensor
from disrank.objectives import (
    Hyperparams,
    Triplet,
    cpt_loss,
    cpt_loss_batch,
    cpt_loss_from_logits,
    cpt_targets,
    hybrid_loss,
    margin_mse_loss,
    point_mse_loss,
    sft_hinge_loss,
)
from disrank.textmodel import ModelConfig, QueryDoc, RankerModel, encode_pair, pad_batch

LN_V = math.log(259)


# --- examples ------------------------------------------------------------------


@pytest.mark.parametrize("f_pos,f_neg,expected", [(0.7, 0.5, 0.0), (0.5, 0.5, 0.1), (0.4, 0.5, 0.2)])
def test_hinge_examples(f_pos, f_neg, expected):
    assert sft_hinge_loss(f_pos, f_neg, 0.1).item() == pytest.approx(expected, abs=1e-7)


def test_point_margin_hybrid_examples():
    args = (0.8, 0.3, 0.6, 0.2)
    assert point_mse_loss(*args).item() == pytest.approx(0.05, abs=1e-7)
    assert margin_mse_loss(*args).item() == pytest.approx(0.01, abs=1e-7)
    assert hybrid_loss(*args, beta=0.4).item() == pytest.approx(0.054, abs=1e-7)


def test_zero_cases():
    assert point_mse_loss(0.8, 0.3, 0.8, 0.3).item() == 0.0
    assert margin_mse_loss(0.5, 0.0, 1.5, 1.0).item() == 0.0
    for beta in (0.0, 0.4, 3.0):
        assert hybrid_loss(0.8, 0.3, 0.8, 0.3, beta=beta).item() == 0.0


def test_losses_average_over_batch():
    t_pos, t_neg = [0.8, 0.1], [0.3, 0.0]
    s_pos, s_neg = [0.6, 0.1], [0.2, 0.0]
    assert point_mse_loss(t_pos, t_neg, s_pos, s_neg).item() == pytest.approx(0.025, abs=1e-7)
    assert sft_hinge_loss([0.4, 0.7], [0.5, 0.5]).item() == pytest.approx(0.1, abs=1e-7)


def test_validation():
    with pytest.raises(ValueError):
        sft_hinge_loss(0.0, 0.0, threshold=0.0)
    with pytest.raises(ValueError):
        hybrid_loss(0, 0, 0, 0, beta=-0.1)
    with pytest.raises(ValueError):
        Hyperparams(hinge_threshold=0)
    with pytest.raises(ValueError):
        Hyperparams(beta=-1)
    with pytest.raises(ValueError):
        Triplet("a", QueryDoc("a", "x"), QueryDoc("b", "y"))


# --- algebra -------------------------------------------------------------------


def _tuples(n=1000, seed=0):
    g = np.random.default_rng(seed)
    return g.normal(size=(n, 4)), g.normal(scale=3, size=n)


def test_hinge_properties():
    g = np.random.default_rng(0)
    for f_pos, f_neg, thr in zip(g.normal(size=500), g.normal(size=500), g.uniform(0.01, 1, 500)):
        v = sft_hinge_loss(f_pos, f_neg, thr).item()
        assert v >= 0
        if f_pos - f_neg >= thr + 1e-6:
            assert v == 0
        assert sft_hinge_loss(f_neg, f_neg, thr).item() == pytest.approx(thr, rel=1e-6)


def test_margin_shift_invariance_and_point_shift_sensitivity():
    rows, shifts = _tuples()
    with nx.precision(np.float64):
        for (tp, tn, sp, sn), c in zip(rows, shifts):
            m = margin_mse_loss(tp, tn, sp, sn).item()
            assert margin_mse_loss(tp, tn, sp + c, sn + c).item() == pytest.approx(m, rel=1e-9, abs=1e-12)
            assert margin_mse_loss(tp + c, tn + c, sp, sn).item() == pytest.approx(m, rel=1e-9, abs=1e-12)
            p = point_mse_loss(tp, tn, sp, sn).item()
            expected = (tp - sp - c) ** 2 + (tn - sn - c) ** 2
            shifted = point_mse_loss(tp, tn, sp + c, sn + c).item()
            assert shifted != p
            assert shifted == pytest.approx(expected, rel=1e-9)


def test_hybrid_beta_zero_is_point_bit_exact():
    rows, _ = _tuples(seed=1)
    for tp, tn, sp, sn in rows:
        assert hybrid_loss(tp, tn, sp, sn, beta=0.0).item() == point_mse_loss(tp, tn, sp, sn).item()


def test_hybrid_is_affine_in_beta():
    rows, _ = _tuples(seed=2)
    g = np.random.default_rng(3)
    with nx.precision(np.float64):
        for (tp, tn, sp, sn), (b0, b1) in zip(rows, g.uniform(0, 2, size=(1000, 2))):
            lhs = hybrid_loss(tp, tn, sp, sn, b1).item() - hybrid_loss(tp, tn, sp, sn, b0).item()
            rhs = (b1 - b0) * margin_mse_loss(tp, tn, sp, sn).item()
            assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


def test_teacher_scores_receive_no_gradient():
    with nx.fresh_tape():
        t_pos = Tensor([0.8], requires_grad=True)
        s_pos = Tensor([0.1], requires_grad=True)
        nx.backward(hybrid_loss(t_pos, 0.3, s_pos, 0.2))
    assert (t_pos.grad == 0).all()
    assert s_pos.grad[0] != 0


# --- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(LOSSES))
def test_ranking_loss_gradients(name):
    assert loss_max_error(name) < GRAD_TOL


def test_cpt_loss_gradients():
    assert loss_max_error("cpt") < GRAD_TOL


# --- continued pre-training masking --------------------------------------------


def test_cpt_targets_mask_query_positions():
    seq, mask = cpt_targets(QueryDoc("ab", "c", "d"))
    assert seq == encode_pair(QueryDoc("ab", "c", "d"), 99)
    assert mask == [0, 0, 0, 1, 1, 1, 1, 1]


def test_cpt_loss_needs_a_target():
    with pytest.raises(ValueError):
        cpt_loss(tiny_decoder(), QueryDoc("abc"))


def test_cpt_loss_rejects_oversize_unless_truncating():
    model = tiny_decoder(max_len=16)
    qd = QueryDoc("abc", "t" * 20, "s" * 20)
    with pytest.raises(ValueError):
        cpt_loss(model, qd)
    assert cpt_loss_batch(model, [qd], truncate=True).item() > 0


def test_uniform_logits_give_log_vocab():
    model = tiny_decoder()
    model.params["lm_head.w"].data[...] = 0
    for qd in (QueryDoc("q", "title", ""), QueryDoc("longer query", "", "sum")):
        assert cpt_loss(model, qd).item() == pytest.approx(LN_V, rel=1e-6)


def test_query_position_logits_do_not_matter():
    g = np.random.default_rng(0)
    qd = QueryDoc("query text", "title", "summary")
    seq, mask = cpt_targets(qd)
    ids, _ = pad_batch([seq])
    logits = g.normal(size=(1, len(seq), 259))
    base = cpt_loss_from_logits(Tensor(logits), ids, np.array([mask])).item()
    n_query = len("query text")
    for _ in range(5):
        bad = logits.copy()
        bad[0, :n_query] = g.normal(scale=50, size=(n_query, 259))
        assert cpt_loss_from_logits(Tensor(bad), ids, np.array([mask])).item() == base
    changed = logits.copy()
    changed[0, n_query] += g.normal(scale=5, size=259)
    assert cpt_loss_from_logits(Tensor(changed), ids, np.array([mask])).item() != base


def test_cpt_training_beats_uniform():
    g = np.random.default_rng(0)
    words = ["red", "shoe", "lamp", "desk", "tea", "cup", "blue", "oak"]
    corpus = []
    for _ in range(10):
        q = " ".join(g.choice(words, 2))
        corpus.append(QueryDoc(q, q + " " + str(g.choice(words)), " ".join(g.choice(words, 3))))
    model = RankerModel.init(ModelConfig.teacher(max_seq_len=48), np.random.default_rng(1))
    opt = nx.Adam(model.parameters(), lr=1e-3)
    for _ in range(300):
        with nx.fresh_tape():
            loss = cpt_loss_batch(model, corpus)
            nx.backward(loss)
        opt.step()
    with nx.no_grad():
        final = cpt_loss_batch(model, corpus).item()
    assert final < LN_V
    assert final < 2.0
