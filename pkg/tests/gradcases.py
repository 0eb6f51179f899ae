"""Finite-difference cases for every differentiable op, shared by the unit and acceptance suites."""

import numpy as np
import scipy.sparse as sp

from liftseg import autodiff as ad
from liftseg.losses import LossWeights, bce_loss, dice_loss, hungarian, loss_stage1, matching_cost, objectness_loss

TOL = 1e-4


def _away_from_zero(r, shape, gap=0.1):
    x = r.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def op_cases(seed=0):
    """(name, fn(*tensors) -> Tensor, input arrays)."""
    r = np.random.default_rng(seed)
    A = lambda *s: r.normal(size=s)
    pos = lambda *s: r.uniform(0.5, 2.0, size=s)
    ids = np.array([0, 2, 2, 1, 0, 2])
    S = sp.random(5, 4, density=0.5, random_state=seed, format="csr")
    mask = r.uniform(size=(3, 4)) > 0.4
    mask[:, 0] = True
    r_t1 = r.uniform(size=(3, 7))
    cases = [
        ("add_broadcast", lambda a, b: a + b, [A(3, 4), A(4)]),
        ("sub", lambda a, b: a - b, [A(3, 4), A(3, 1)]),
        ("mul", lambda a, b: a * b, [A(3, 4), A(1, 4)]),
        ("div", lambda a, b: a / b, [A(3, 4), pos(3, 4)]),
        ("neg_scalar_ops", lambda a: 2.0 - 3.0 * a / 4.0, [A(5)]),
        ("power", lambda a: ad.power(a, 3.0), [A(4, 2)]),
        ("exp", ad.exp, [A(3, 3)]),
        ("log", ad.log, [pos(6)]),
        ("sqrt", ad.sqrt, [pos(6)]),
        ("relu", ad.relu, [_away_from_zero(r, (4, 5))]),
        ("gelu", ad.gelu, [A(4, 5)]),
        ("sigmoid", ad.sigmoid, [A(4, 5) * 3]),
        ("softplus", ad.softplus, [A(4, 5) * 3]),
        ("tanh", ad.tanh, [A(4, 5)]),
        ("sum_axis", lambda a: ad.tsum(a, axis=0), [A(3, 4)]),
        ("sum_keepdims", lambda a: ad.tsum(a, axis=1, keepdims=True), [A(3, 4)]),
        ("mean", lambda a: ad.mean(a, axis=-1), [A(3, 4)]),
        ("max", lambda a: ad.tmax(a, axis=1), [A(3, 6)]),
        ("reshape", lambda a: ad.reshape(a, (2, 6)), [A(3, 4)]),
        ("transpose", lambda a: ad.transpose(a, (1, 0, 2)), [A(2, 3, 4)]),
        ("getitem", lambda a: a[1:, ::2], [A(3, 4)]),
        ("take_rows", lambda a: ad.take_rows(a, np.array([2, 0, 2, 1])), [A(3, 4)]),
        ("segment_mean", lambda a: ad.segment_mean(a, ids, 4), [A(6, 3)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [A(3, 2), A(3, 4)]),
        ("matmul", ad.matmul, [A(3, 4), A(4, 2)]),
        ("matmul_batched", ad.matmul, [A(2, 3, 4), A(2, 4, 5)]),
        ("const_matmul_sparse", lambda x: ad.const_matmul(S, x), [A(4, 3)]),
        ("softmax", lambda a: ad.softmax(a, axis=-1), [A(3, 5)]),
        ("log_softmax", lambda a: ad.log_softmax(a, axis=-1), [A(3, 5)]),
        ("masked_fill_softmax", lambda a: ad.softmax(ad.masked_fill(a, ~mask, -1e30), axis=-1), [A(3, 4)]),
        ("layer_norm", ad.layer_norm, [A(4, 6), pos(6), A(6)]),
        ("l2_normalize", ad.l2_normalize, [A(4, 5)]),
        ("linear", ad.linear, [A(3, 4), A(4, 2), A(2)]),
        ("dice_loss", lambda p: dice_loss(ad.sigmoid(p), (r_t1 > 0.5).astype(float)), [A(3, 7)]),
        ("bce_loss", lambda h: bce_loss(h, (r_t1 > 0.5).astype(float)), [A(3, 7) * 2]),
        ("objectness_loss", lambda z: objectness_loss(z, np.array([0, 1, 1])), [A(3, 2)]),
    ]
    return cases


def check_case(fn, inputs, seed=0, h=1e-5):
    """Max relative error between backprop and central differences over all inputs."""
    r = np.random.default_rng(seed + 99)
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    probe = None

    def scalar():
        nonlocal probe
        out = fn(*[ad.Tensor(a) for a in arrays])
        if probe is None:
            probe = r.normal(size=np.shape(out.data))
        return float(np.sum(out.data * probe))

    scalar()
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    ad.backward(ad.tsum(out * probe))
    worst = 0.0
    for leaf, a in zip(leaves, arrays):
        num = ad.numeric_grad(scalar, a, h=h)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        worst = max(worst, ad.rel_error(ana, num))
    return worst


def stage1_instance(seed=0, n=30, q=4, m=2):
    r = np.random.default_rng(seed)
    heat = r.normal(0, 2, (q, n))
    logits = r.normal(size=(q, 2))
    T = np.zeros((m, n), bool)
    for j in range(m):
        T[j, r.choice(n, size=int(r.integers(5, 15)), replace=False)] = True
    return heat, logits, T


def check_stage1(seed=0):
    heat, logits, T = stage1_instance(seed)
    w = LossWeights()
    # the matching is piecewise constant in the inputs; check it does not flip under the probe steps
    match = hungarian(matching_cost(heat, logits, T, w))

    def f(h, z):
        out = {"heatmaps": h, "logits": z}
        loss, terms = loss_stage1(out, T, w)
        assert terms["match"].pairs == match.pairs
        return loss

    return check_case(f, [heat, logits], seed)
