"""Reverse-mode autograd on numpy, checked against central differences.

A small conv -> relu -> dense -> sigmoid stack is differentiated with
``backward`` and compared, parameter by parameter, with a finite-difference
estimate of the same scalar loss.

    python demos/demo_autograd.py
"""

import argparse

import numpy as np

from stngrasp import functional as F
from stngrasp.nn import Conv2d, Dense
from stngrasp.tensor import Tensor, no_grad


def loss_of(conv, dense, x, y):
    h = F.relu(conv(x))
    score = F.sigmoid(dense(F.flatten(h)))
    return F.binary_cross_entropy(score, y)


def finite_difference(param, f, h=1e-6):
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    conv = Conv2d(3, 4, 3, stride=1, pad=1, rng=rng)
    dense = Dense(4 * 6 * 6, 1, rng=rng)
    x = Tensor(rng.normal(size=(2, 3, 6, 6)))
    y = np.array([[1.0], [0.0]])

    loss = loss_of(conv, dense, x, y)
    params = conv.parameters() + dense.parameters()
    loss.backward(params)
    print(f"loss = {loss.item():.6f}")

    def scalar():
        with no_grad():
            return loss_of(conv, dense, x, y).item()

    for name, p in zip(["conv.weight", "conv.bias", "dense.weight", "dense.bias"], params):
        fd = finite_difference(p, scalar)
        rel = np.linalg.norm(p.grad - fd) / max(np.linalg.norm(fd), 1e-12)
        print(f"{name:13s} shape={str(p.shape):15s} relative error {rel:.2e}")


if __name__ == "__main__":
    main()
