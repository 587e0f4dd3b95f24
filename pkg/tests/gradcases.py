"""Gradient-check cases shared by the unit tests and the acceptance suite.

Every differentiable op and every training loss gets a builder that maps
float64 input arrays to a scalar; ``gradcheck`` compares its tape gradient
with central differences.
"""

import numpy as np
from oracles import gradcheck, max_relative_error

from disrank import numerics as nx
from disrank.numerics import Tensor
from disrank.objectives import cpt_loss, hybrid_loss, margin_mse_loss, point_mse_loss, sft_hinge_loss
from disrank.textmodel import ModelConfig, QueryDoc, RankerModel

GRAD_TOL = 1e-3
POINTS = 10


def _project(out, r):
    """Scalar from a tensor-valued op via a fixed random projection."""
    return nx.total(nx.mul(out, Tensor(r)))


def _points(seed=0):
    return [np.random.default_rng((seed, p)) for p in range(POINTS)]


# each entry: name -> (make arrays from rng, indices to check, build)
def _unary(op, shape=(3, 4), out_shape=None):
    out_shape = out_shape or shape

    def make(g):
        return [g.normal(size=shape), g.normal(size=out_shape)]

    return make, [0], lambda t: _project(op(t[0]), t[1].data)


def _binary(op, sa=(3, 4), sb=(3, 4), out_shape=None):
    out_shape = out_shape or np.broadcast_shapes(sa, sb)

    def make(g):
        return [g.normal(size=sa), g.normal(size=sb), g.normal(size=out_shape)]

    return make, [0, 1], lambda t: _project(op(t[0], t[1]), t[2].data)


def _matmul_batched():
    def make(g):
        return [g.normal(size=(2, 3, 4)), g.normal(size=(2, 4, 5)), g.normal(size=(2, 3, 5))]

    return make, [0, 1], lambda t: _project(nx.matmul(t[0], t[1]), t[2].data)


def _layer_norm():
    def make(g):
        return [g.normal(size=(3, 6)), 1 + 0.3 * g.normal(size=6), g.normal(size=6), g.normal(size=(3, 6))]

    return make, [0, 1, 2], lambda t: _project(nx.layer_norm(t[0], t[1], t[2]), t[3].data)


def _embedding():
    ids = np.array([[0, 2, 2], [4, 1, 0]])

    def make(g):
        return [g.normal(size=(5, 3)), g.normal(size=(2, 3, 3))]

    return make, [0], lambda t: _project(nx.embedding_lookup(t[0], ids), t[1].data)


def _gather_rows():
    def make(g):
        return [g.normal(size=(3, 4, 2)), g.normal(size=(3, 2))]

    return make, [0], lambda t: _project(nx.gather_rows(t[0], [3, 0, 1]), t[1].data)


def _take():
    def make(g):
        return [g.normal(size=5), g.normal(size=4)]

    return make, [0], lambda t: _project(nx.take(t[0], [4, 1, 1, 0]), t[1].data)


def _rowdot():
    def make(g):
        return [g.normal(size=(2, 3, 4)), g.normal(size=4), g.normal(size=(2, 3))]

    return make, [0, 1], lambda t: _project(nx.rowdot(t[0], t[1]), t[2].data)


def _cross_entropy():
    targets = np.array([[1, 0, 3], [2, 2, 4]])
    mask = np.array([[1, 0, 1], [1, 1, 1]])

    def make(g):
        return [2 * g.normal(size=(2, 3, 5))]

    return make, [0], lambda t: nx.cross_entropy(t[0], targets, mask)


def _mse():
    def make(g):
        return [g.normal(size=(4,)), g.normal(size=(4,))]

    return make, [0, 1], lambda t: nx.mse(t[0], t[1])


OPS = {
    "add": _binary(nx.add),
    "add_broadcast": _binary(nx.add, (3, 4), (4,)),
    "sub": _binary(nx.sub, (3, 4), (1, 4)),
    "mul": _binary(nx.mul),
    "scale": _unary(lambda a: nx.scale(a, -1.7)),
    "relu": _unary(nx.relu),
    "gelu": _unary(nx.gelu),
    "reshape": _unary(lambda a: nx.reshape(a, (2, 6)), shape=(3, 4), out_shape=(2, 6)),
    "transpose": _unary(lambda a: nx.transpose(a, (2, 0, 1)), shape=(2, 3, 4), out_shape=(4, 2, 3)),
    "softmax": _unary(nx.softmax),
    "sum": _unary(lambda a: nx.scale(nx.total(a), 1.0)),
    "mean": _unary(nx.mean),
    "matmul": _binary(nx.matmul, (3, 4), (4, 2), (3, 2)),
    "matmul_batched": _matmul_batched(),
    "layer_norm": _layer_norm(),
    "embedding_lookup": _embedding(),
    "gather_rows": _gather_rows(),
    "take": _take(),
    "rowdot": _rowdot(),
    "cross_entropy": _cross_entropy(),
    "mse": _mse(),
}


def tiny_decoder(seed=0, max_len=32):
    cfg = ModelConfig("decoder", d_model=8, n_layers=1, n_heads=2, d_ff=16, max_seq_len=max_len)
    return RankerModel.init(cfg, np.random.default_rng(seed), std=0.3)


def _score_points(seed):
    g = np.random.default_rng(seed)
    return [g.normal(size=(10, 4)) for _ in range(10)]


LOSSES = {
    "hinge": lambda t: sft_hinge_loss(t[2], t[3], 0.1),
    "point": lambda t: point_mse_loss(t[0].data, t[1].data, t[2], t[3]),
    "margin": lambda t: margin_mse_loss(t[0].data, t[1].data, t[2], t[3]),
    "hybrid": lambda t: hybrid_loss(t[0].data, t[1].data, t[2], t[3], 0.4),
}


def cpt_gradcheck(seed, coords=4):
    """Tape gradients of the CPT loss against central differences on model weights."""
    qd = QueryDoc("ab", "cde", "fg")
    with nx.precision(np.float64):
        model = tiny_decoder(seed)
        with nx.fresh_tape():
            nx.backward(cpt_loss(model, qd))
        g = np.random.default_rng(seed)
        worst = 0.0
        for name, p in model.params.items():
            if name == "head.w" or name == "head.b":
                continue  # not on the language-model path
            flat = p.data.reshape(-1)
            picked = g.choice(flat.size, size=min(coords, flat.size), replace=False)
            num = np.zeros(flat.size)
            for c in picked:
                orig = flat[c]
                vals = []
                for x in (orig + 1e-4, orig - 1e-4):
                    flat[c] = x
                    with nx.no_grad():
                        vals.append(cpt_loss(model, qd).item())
                flat[c] = orig
                num[c] = (vals[0] - vals[1]) / 2e-4
            worst = max(worst, max_relative_error(p.grad, num, picked))
    return worst


def op_max_error(name, seed):
    make, wrt, build = OPS[name]
    return max(gradcheck(build, make(g), wrt) for g in _points(seed))


def loss_max_error(name):
    if name == "cpt":
        return max(cpt_gradcheck(seed) for seed in range(POINTS))
    worst = 0.0
    for i, pts in enumerate(_score_points(len(name))):
        arrays = [pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3]]
        worst = max(worst, gradcheck(LOSSES[name], arrays, [2, 3], seed=i))
    return worst
