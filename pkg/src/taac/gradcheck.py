"""Finite-difference checks for every hand-written backward pass.

Each case draws a random float64 point, forms a scalar objective (a random
projection of the layer output, or the loss itself) and compares analytic
gradients for the input and every parameter against central differences.
"""

from __future__ import annotations

import numpy as np

from .classifier import Vpm, VpmConfig
from .nn_core import (batchnorm_backward, batchnorm_forward, conv1d_backward, conv1d_forward,
                      cross_entropy, fc_backward, fc_forward, gradient_check)
from .sdae import Sdae, SdaeConfig, loss_ortho, loss_recon

TOLERANCE = 1e-4
# conv biases ahead of train-mode batchnorm have an exactly zero gradient;
# their difference quotients are pure roundoff (~1e-11)
ZERO_ATOL = 1e-9


def _check_all(f, args: dict, grads: dict) -> float:
    """Max error over every named argument; ``f(**args)`` is the objective."""
    worst = 0.0
    for name, x in args.items():
        def g(v, name=name):
            return f(**{**args, name: v})
        worst = max(worst, gradient_check(g, x, grads[name]))
    return worst


def check_fc(rng) -> float:
    x, W, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    R = rng.normal(size=(4, 3))
    dx, dW, db = fc_backward(R, x, W)
    return _check_all(lambda x, W, b: (R * fc_forward(x, W, b)).sum(), {"x": x, "W": W, "b": b},
                      {"x": dx, "W": dW, "b": db})


def check_conv1d(rng, stride=1, padding=1) -> float:
    x, w, b = rng.normal(size=(2, 2, 11)), rng.normal(size=(3, 2, 3)), rng.normal(size=3)
    y, cols = conv1d_forward(x, w, b, stride, padding)
    R = rng.normal(size=y.shape)
    dx, dw, db = conv1d_backward(R, cols, x.shape, w, stride, padding)
    return _check_all(lambda x, w, b: (R * conv1d_forward(x, w, b, stride, padding)[0]).sum(),
                      {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def check_batchnorm(rng, mode="train") -> float:
    x = rng.normal(size=(4, 3, 5)) * 2 + 1
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, size=3)

    def f(x, gamma, beta):
        return (R * batchnorm_forward(x, gamma, beta, mode, rm.copy(), rv.copy())[0]).sum()

    y, cache = batchnorm_forward(x, gamma, beta, mode, rm.copy(), rv.copy())
    R = rng.normal(size=y.shape)
    dx, dg, db = batchnorm_backward(R, cache, gamma)
    return _check_all(f, {"x": x, "gamma": gamma, "beta": beta}, {"x": dx, "gamma": dg, "beta": db})


def check_cross_entropy(rng) -> float:
    z = rng.normal(size=(6, 2)) * 2
    y = rng.integers(0, 2, 6)
    _, g = cross_entropy(z, y, 0.1)
    return gradient_check(lambda z: cross_entropy(z, y, 0.1)[0], z, g)


def check_loss_ortho(rng, all_pairs=False) -> float:
    vd, vnd = rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
    _, gd, gn = loss_ortho(vd, vnd, all_pairs)
    return _check_all(lambda vd, vnd: loss_ortho(vd, vnd, all_pairs)[0], {"vd": vd, "vnd": vnd},
                      {"vd": gd, "vnd": gn})


def check_loss_recon(rng) -> float:
    vd, vnd, x = rng.normal(size=(4, 7)), rng.normal(size=(4, 7)), rng.normal(size=(4, 7))
    _, g = loss_recon(vd, vnd, x)
    return _check_all(lambda vd, vnd: loss_recon(vd, vnd, x)[0], {"vd": vd, "vnd": vnd}, {"vd": g, "vnd": g})


def _model_check(model, loss, backward, x) -> float:
    """Input and parameter gradients of ``loss(model)``, in float64."""
    params = [p for p in model.params() if not p.is_buffer]
    model.zero_grad()
    dx = backward(x)
    grads = {p.name: p.grad.copy() for p in params}
    worst = gradient_check(lambda v: loss(v), x, dx, zero_atol=ZERO_ATOL)
    for p in params:
        base = p.value

        def f(v, p=p):
            p.value = v
            try:
                return loss(x)
            finally:
                p.value = base
        worst = max(worst, gradient_check(f, base, grads[p.name], zero_atol=ZERO_ATOL))
    return worst


def check_classifier(rng) -> float:
    """Whole CNN head in train mode (batch statistics), dropout off."""
    vpm = Vpm(VpmConfig(L=64, channels=(2, 3), kernel=5, pool=4, dropout=0.0),
              seed=int(rng.integers(1 << 30))).astype(np.float64)
    vpm.train()
    x = rng.normal(size=(4, 64))
    y = rng.integers(0, 2, 4)

    def loss(v):
        return cross_entropy(vpm.forward(v), y)[0]

    def backward(v):
        _, g = cross_entropy(vpm.forward(v), y)
        return vpm.backward(g)

    return _model_check(vpm, loss, backward, x)


def check_sdae(rng) -> float:
    """Autoencoder under the weighted ortho + recon objective, dropout off."""
    sd = Sdae(SdaeConfig(L=12, h1=8, h2=8, latent=4, segments=2, dropout=0.0),
              seed=int(rng.integers(1 << 30))).astype(np.float64)
    x = rng.normal(size=(3, 12))

    def parts(v):
        p = sd.forward(v)
        lo, god, gon = loss_ortho(p.v_d, p.v_nd)
        lr, gr = loss_recon(p.v_d, p.v_nd, v)
        return lo + lr, god + gr, gon + gr, gr

    def backward(v):
        _, gd, gn, gr = parts(v)
        # recon also depends on x directly through the residual
        return sd.backward(gd, gn) - gr

    return _model_check(sd, lambda v: parts(v)[0], backward, x)


CASES = {
    "fc": check_fc,
    "conv1d": check_conv1d,
    "conv1d_stride2": lambda rng: check_conv1d(rng, stride=2, padding=2),
    "batchnorm_train": check_batchnorm,
    "batchnorm_eval": lambda rng: check_batchnorm(rng, "eval"),
    "cross_entropy": check_cross_entropy,
    "loss_ortho": check_loss_ortho,
    "loss_ortho_all_pairs": lambda rng: check_loss_ortho(rng, True),
    "loss_recon": check_loss_recon,
    "classifier": check_classifier,
    "sdae": check_sdae,
}


def run_gradient_suite(points: int = 10, seed: int = 0, cases=None) -> dict[str, float]:
    """Worst relative error per case over ``points`` random points."""
    out = {}
    for name in cases or CASES:
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        out[name] = max(CASES[name](rng) for _ in range(points))
    return out
