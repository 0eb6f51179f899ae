import numpy as np
import pytest

from liftseg import autodiff as ad
from liftseg.geometry import PointCloud
from liftseg.losses import LossWeights, loss_stage1
from liftseg.network import ModelConfig, forward, init_params, prepare_cloud

from gradcases import TOL, check_case, check_stage1, op_cases

CASES = op_cases(0)


@pytest.mark.parametrize("name,fn,inputs", CASES, ids=[c[0] for c in CASES])
def test_op_gradient(name, fn, inputs):
    assert check_case(fn, inputs) < TOL


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_loss_stage1_gradient(seed):
    assert check_stage1(seed) < TOL


def test_full_network_gradient():
    r = np.random.default_rng(4)
    cloud = PointCloud(r.uniform(0, 1, (40, 3)), r.uniform(0, 1, (40, 3)))
    cfg = ModelConfig(feature_dim=8, levels=2, decoder_layers=1, heads=2, fourier_bands=2, base_voxel=0.25)
    params = init_params(cfg, seed=1)
    ctx = prepare_cloud(cloud, cfg)
    T = np.zeros((2, 40), bool)
    T[0, :15] = True
    T[1, 20:30] = True
    names = ["bb0.in.w", "dec0.1.cross.q.w", "mask.2.w", "obj.w", "heatmap_scale", "bb1.msg.b"]

    def loss_of(P):
        out = forward(ctx, P, cfg, 4, seed=0, with_aux=True)
        loss, _ = loss_stage1(out, T, LossWeights())
        for h, z in out["aux"]:
            loss = loss + loss_stage1({"heatmaps": h, "logits": z}, T, LossWeights())[0]
        return loss

    P = params.tensors()
    ad.backward(loss_of(P))
    for name in names:
        arr = params.arrays[name]
        flat = np.arange(arr.size)[:6]
        num = ad.numeric_grad(lambda: float(loss_of({k: ad.Tensor(v) for k, v in params.arrays.items()}).data),
                              arr, h=1e-6, index=flat)
        ana = P[name].grad.reshape(-1)[flat]
        assert ad.rel_error(ana, num.reshape(-1)[flat]) < TOL, name


def test_backward_accumulates_shared_use():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * x + x
    ad.backward(ad.tsum(y))
    assert np.allclose(x.grad, [3.0, 5.0])


def test_constants_get_no_grad():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    c = ad.Tensor(np.ones(3))
    ad.backward(ad.tsum(x * c))
    assert c.grad is None and np.allclose(x.grad, 1)


def test_unbroadcast_shapes():
    g = np.ones((2, 3, 4))
    assert ad.unbroadcast(g, (4,)).shape == (4,)
    assert np.allclose(ad.unbroadcast(g, (3, 1)), 8)


def test_stable_helpers():
    x = np.array([-800.0, 0.0, 800.0])
    assert np.allclose(ad.sigmoid_np(x), [0.0, 0.5, 1.0])
    assert np.allclose(ad.softplus_np(x), [0.0, np.log(2), 800.0])
    assert np.all(np.isfinite(ad.softmax(ad.Tensor(np.array([[1000.0, -1000.0]]))).data))


def test_l2_normalize_zero_row():
    x = ad.Tensor(np.zeros((1, 3)), requires_grad=True)
    out = ad.l2_normalize(x)
    ad.backward(ad.tsum(out))
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(x.grad))


def test_masked_fill_blocks_gradient():
    x = ad.Tensor(np.ones((2, 2)), requires_grad=True)
    m = np.array([[True, False], [False, False]])
    ad.backward(ad.tsum(ad.masked_fill(x, m, 0.0)))
    assert x.grad.tolist() == [[0.0, 1.0], [1.0, 1.0]]
