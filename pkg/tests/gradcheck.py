"""Central finite-difference oracles shared by the unit and acceptance tests."""

import numpy as np

from pcqa.autoencoder import (Autoencoder, _apply, adaptive_mse_loss, conv3d, conv3d_backward,
                              conv3d_transpose, conv3d_transpose_backward, focal_loss_grad,
                              init_params, relu, sigmoid)

H = 1e-5


def rel_err(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-300)
    return float(np.linalg.norm(a - n) / denom)


def numeric_grad(f, x, h=H):
    """Central differences of scalar f() w.r.t. every entry of x (perturbed in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_conv(rng, transpose=False):
    """Relative errors of (dx, dW, db) for L = <conv(x), R>."""
    if transpose:
        x = rng.normal(size=(2, 2, 2, 2))
        w = rng.normal(size=(2, 3, 5, 5, 5))
        fwd, bwd = conv3d_transpose, conv3d_transpose_backward
    else:
        x = rng.normal(size=(2, 6, 6, 6))
        w = rng.normal(size=(3, 2, 5, 5, 5))
        fwd, bwd = conv3d, conv3d_backward
    b = rng.normal(size=3)
    r = rng.normal(size=fwd(x, w, b).shape)

    def f():
        return float(np.sum(fwd(x, w, b) * r))

    dx, dw, db = bwd(x, w, r)
    return [rel_err(dx, numeric_grad(f, x)), rel_err(dw, numeric_grad(f, w)),
            rel_err(db, numeric_grad(f, b))]


def check_activations(rng):
    x = rng.normal(size=200) * 3
    x = x[np.abs(x) > 1e-3]  # keep away from the ReLU kink
    errs = []
    for fn, deriv in ((relu, lambda v: (v > 0).astype(float)),
                      (sigmoid, lambda v: sigmoid(v) * (1 - sigmoid(v)))):
        num = (fn(x + H) - fn(x - H)) / (2 * H)
        errs.append(rel_err(deriv(x), num))
    return errs


def check_focal(rng, alpha=0.75, gamma=2.0):
    a = (rng.random((4, 4, 4)) < 0.4).astype(float)
    b = rng.uniform(0.05, 0.95, (4, 4, 4))
    _, g = focal_loss_grad(a, b, alpha, gamma)
    num = numeric_grad(lambda: focal_loss_grad(a, b, alpha, gamma)[0], b)
    return rel_err(g, num)


def check_adaptive_mse(rng, beta=0.01):
    a = np.where(rng.random((4, 4, 4)) < 0.5, 1.0, rng.random((4, 4, 4)))
    b = rng.random((4, 4, 4))
    _, g = adaptive_mse_loss(a, b, beta)
    num = numeric_grad(lambda: adaptive_mse_loss(a, b, beta)[0], b)
    return rel_err(g, num)


def check_network(loss, seed=0, channels=(2, 2, 2), size=8):
    """Per-array relative errors of all parameter gradients of a float64 toy network."""
    rng = np.random.default_rng(seed)
    params = init_params(channels, "binary" if loss == "focal" else "tdf", seed, np.float64)
    if loss == "focal":
        x = (rng.random((1, size, size, size)) < 0.3).astype(float)

        def lossfn(out):
            return focal_loss_grad(x, out)
    else:
        x = np.minimum(rng.random((1, size, size, size)) * 1.5, 1.0)

        def lossfn(out):
            return adaptive_mse_loss(x, out)
    # non-zero biases so that every unit sees a generic operating point
    for layer in params.layers:
        layer.bias[:] = rng.normal(scale=0.1, size=layer.bias.shape)
    net = Autoencoder(params)
    _, g = lossfn(net.forward(x))
    grads = net.backward(g)

    layers = params.layers
    errs = []
    prefix = x
    for i, (layer, (dw, db)) in enumerate(zip(layers, grads)):
        # perturbing layer i leaves the activations before it unchanged
        def f(h=prefix, rest=layers[i:]):
            for l in rest:
                h = _apply(l, h)
            return lossfn(h)[0]

        errs.append(rel_err(dw, numeric_grad(f, layer.weight)))
        errs.append(rel_err(db, numeric_grad(f, layer.bias)))
        prefix = _apply(layer, prefix)
    return errs
