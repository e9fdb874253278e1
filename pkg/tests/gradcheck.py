"""Central finite-difference checks shared by the unit and acceptance tests."""

import numpy as np

from trapnet import nn_core
from trapnet.nn_core import Architecture

H = 1e-5
# below this magnitude the comparison is absolute: central differences carry
# ~1e-11 of float roundoff, which would dominate a relative error near zero
FLOOR = 1e-6


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x, h=H):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def random_network(rng, max_hidden=32):
    depth = int(rng.integers(1, 3))
    hidden = tuple(int(rng.integers(2, max_hidden + 1)) for _ in range(depth))
    arch = Architecture(int(rng.integers(2, 9)), hidden, int(rng.integers(2, 6)))
    params = nn_core.init_model(arch, int(rng.integers(2**31)))
    # non-zero biases so every layer's bias gradient is exercised
    layers = [(w, rng.normal(0, 0.1, b.shape)) for w, b in params.layers]
    return nn_core.ModelParams(arch, layers)


def _away_from_kinks(params, rng, batch, margin=1e-3):
    # a difference step straddling a ReLU kink measures a one-sided slope;
    # redraw inputs until every pre-activation is clear of zero
    for _ in range(1000):
        x = rng.uniform(0, 1, (batch, params.arch.input_dim))
        if all(np.min(np.abs(z)) > margin for z in nn_core.forward(params, x).pre[:-1]):
            return x
    raise RuntimeError("could not draw inputs away from ReLU kinks")


def check_network(params, rng, batch=3):
    """Max relative error over param, xent-input and detection-input gradients."""
    arch = params.arch
    x = _away_from_kinks(params, rng, batch)
    y = rng.integers(0, arch.num_classes, batch)
    errors = []

    analytic = nn_core.grad_params(params, x, y)
    for li, (w, b) in enumerate(params.layers):
        for pi, p in enumerate((w, b)):
            def loss(v, li=li, pi=pi):
                layers = [list(lb) for lb in params.layers]
                layers[li][pi] = v
                return nn_core.mean_xent(nn_core.ModelParams(arch, [tuple(lb) for lb in layers]), x, y)

            errors.append(rel_error(analytic[li][pi], numeric_grad(loss, p)))

    g = nn_core.grad_input_xent(params, x, y)
    num = numeric_grad(lambda v: float(np.sum(nn_core.xent_loss(nn_core.logits(params, v), y))), x)
    errors.append(rel_error(g, num))

    h = nn_core.hidden(params, x)
    keep = np.linalg.norm(h, axis=1) > 0
    if np.any(keep):
        phi = np.abs(rng.normal(size=arch.hidden_dim)) + 0.1
        xk = x[keep]
        g = nn_core.grad_input_detection(params, xk, phi)
        num = numeric_grad(lambda v: float(np.sum(nn_core.cosine(nn_core.hidden(params, v), phi))), xk)
        errors.append(rel_error(g, num))
    return max(errors)
