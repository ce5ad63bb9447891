"""Central finite-difference checks for every differentiable operation (float64)."""

from __future__ import annotations

import numpy as np
import pytest

from oracles import gradcheck
from stngrasp import functional as F
from stngrasp.nn import ResidualBlock
from stngrasp.stn import (
    affine_grid,
    bilinear_sample,
    compose_tensor,
    rotation_tensor,
    scale_translation_tensor,
    to_affine,
    translation_tensor,
)

TOL = 1e-4
rng = np.random.default_rng(1234)


def away_from_zero(shape):
    x = rng.normal(size=shape)
    return np.sign(x) * (0.05 + np.abs(x))


def distinct(shape):
    return rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.normal(size=shape) * 1e-3


def _residual(stride, cin, cout):
    block = ResidualBlock(cin, cout, stride=stride, rng=np.random.default_rng(5))
    names = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"]
    if block.shortcut is not None:
        names += ["shortcut.weight", "shortcut.bias"]
    arrays = [dict(block.named_parameters())[n].data.copy() for n in names]
    arrays = [a + rng.normal(size=a.shape) * 0.05 for a in arrays]

    def op(x, *ps):
        mods = [block.conv1, block.conv1, block.conv2, block.conv2, block.shortcut, block.shortcut]
        for mod, attr, p in zip(mods, ["weight", "bias"] * 3, ps):
            setattr(mod, attr, p)
        return block(x)

    return op, [rng.normal(size=(2, cin, 6, 6))] + arrays


def _cases():
    res1 = _residual(1, 3, 3)
    res2 = _residual(2, 2, 4)
    grid = rng.uniform(-0.95, 0.95, size=(5, 4, 2))
    return [
        ("conv2d", lambda x, w, b: F.conv2d(x, w, b, stride=1, pad=1),
         [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)]),
        ("conv2d_stride2", lambda x, w, b: F.conv2d(x, w, b, stride=2, pad=0),
         [rng.normal(size=(1, 2, 7, 7)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        ("dense", F.dense, [rng.normal(size=(3, 5)), rng.normal(size=(4, 5)), rng.normal(size=4)]),
        ("relu", F.relu, [away_from_zero((3, 4))]),
        ("relu_path", lambda x, w: F.relu(F.conv2d(x, w, None, pad=1)).mean(),
         [rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3))]),
        ("max_pool2d", lambda x: F.max_pool2d(x, 2), [distinct((2, 2, 4, 6))]),
        ("max_pool2d_stride1", lambda x: F.max_pool2d(x, 2, 1), [distinct((1, 2, 3, 3))]),
        ("avg_pool2d", lambda x: F.avg_pool2d(x, 2), [rng.normal(size=(1, 2, 5, 4))]),
        ("bilinear_sample", bilinear_sample, [rng.normal(size=(1, 3, 7, 7)), grid]),
        ("bilinear_sample_batched_grid", bilinear_sample,
         [rng.normal(size=(2, 2, 6, 5)), rng.uniform(-1.1, 1.1, size=(2, 3, 3, 2))]),
        ("affine_grid", lambda a: affine_grid(a, 4, 5), [rng.normal(size=(2, 3))]),
        ("affine_grid_batched", lambda a: affine_grid(a, 3, 3), [rng.normal(size=(3, 2, 3))]),
        ("grid_then_sample", lambda x, a: bilinear_sample(x, affine_grid(a, 4, 4)),
         [rng.normal(size=(1, 2, 6, 6)), np.array([[0.7, 0.2, 0.1], [-0.15, 0.6, -0.05]]) + rng.normal(size=(2, 3)) * 0.01]),
        ("residual_block", res1[0], res1[1]),
        ("residual_block_projection", res2[0], res2[1]),
        ("bce", lambda s: F.binary_cross_entropy(s, np.array([[1.0], [0.0], [1.0], [0.0]])),
         [rng.uniform(0.1, 0.9, size=(4, 1))]),
        ("masked_mse", lambda p: F.masked_mse(p, np.ones((2, 4)), np.array([[1, 1, 0, 0], [1, 0, 1, 0]])),
         [rng.normal(size=(2, 4))]),
        ("tanh", F.tanh, [rng.normal(size=(3, 3))]),
        ("sigmoid", F.sigmoid, [rng.normal(size=(3, 3)) * 3]),
        ("exp_log_sqrt", lambda x: F.log(F.sqrt(F.exp(x) + 1.0)), [rng.normal(size=(4,))]),
        ("sin_cos", lambda x: F.sin(x) * F.cos(x * 2.0), [rng.normal(size=(5,))]),
        ("atan2", F.atan2, [rng.normal(size=(6,)), rng.normal(size=(6,))]),
        ("add_broadcast", lambda a, b: a + b, [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        ("mul_broadcast", lambda a, b: a * b, [rng.normal(size=(2, 3, 4)), rng.normal(size=(3, 1))]),
        ("div", lambda a, b: a / b, [rng.normal(size=(3,)), rng.uniform(0.5, 2, size=(3,))]),
        ("mean_sum", lambda x: F.mean(x, axis=1) + F.sum(x, axis=0)[:3], [rng.normal(size=(3, 3))]),
        ("matmul_batched", F.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        ("reshape_transpose", lambda x: F.transpose(F.reshape(x, (3, 4)), (1, 0)), [rng.normal(size=(2, 6))]),
        ("getitem_concat_stack", lambda x: F.concat([F.stack([x[0] * x[1], x[1, ::-1]], axis=0), F.reshape(x[:, 1], (2, 1)) + 1.0], axis=1),
         [rng.normal(size=(2, 3))]),
        ("transform_chain", lambda tx, th, s: compose_tensor(
            scale_translation_tensor(s, s * 0.5, tx * 0.3, 0.1), compose_tensor(rotation_tensor(th), translation_tensor(tx, th))),
         [rng.normal(size=(3,)), rng.normal(size=(3,)), rng.uniform(0.5, 1.5, size=(3,))]),
        ("to_affine", lambda h: to_affine(compose_tensor(translation_tensor(h, h), rotation_tensor(h))),
         [rng.normal(size=(2,))]),
    ]


CASES = _cases()


@pytest.mark.parametrize("name,op,arrays", CASES, ids=[c[0] for c in CASES])
def test_gradient_matches_finite_differences(name, op, arrays):
    err = gradcheck(op, arrays)
    assert err <= TOL, f"{name}: relative error {err:.2e}"
