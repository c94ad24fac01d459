"""Central finite-difference checks for every kernel and a miniature network.

All checks run in float64. A check passes when the maximum relative error
between analytic and numeric gradients is below ``THRESHOLD``; entries
whose analytic and numeric magnitudes are both under ``FLOOR`` are skipped.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import net, nn

THRESHOLD = 1e-4
FLOOR = 1e-8
STEP = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error < THRESHOLD


def numeric_gradient(f, x, h=STEP):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = (np.abs(a) >= floor) | (np.abs(n) >= floor)
    if not keep.any():
        return 0.0
    a, n = a[keep], n[keep]
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a), np.abs(n))))


def _projected(forward, weights):
    # scalar objective sum(out * weights) turns any kernel into a loss
    return lambda: float(np.sum(forward() * weights))


def _check(name, forward, backward, inputs, rng):
    """``forward()`` returns the output; ``backward(dout)`` returns grads aligned with ``inputs``."""
    start = time.perf_counter()
    out = forward()
    weights = rng.standard_normal(out.shape)
    analytic = backward(weights)
    loss = _projected(forward, weights)
    worst = 0.0
    for x, g in zip(inputs, analytic):
        worst = max(worst, max_relative_error(g, numeric_gradient(loss, x)))
    return CheckResult(name, worst, time.perf_counter() - start)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


class _Conv:
    """Conv kernel hooks; ``perturb`` offsets the analytic gradients (fault injection)."""

    def __init__(self, perturb=0.0):
        self.perturb = perturb

    def backward(self, dout, cache):
        dx, dw, db = nn.conv2d_backward(dout, cache)
        if self.perturb:
            dx, dw, db = dx + self.perturb, dw + self.perturb, db + self.perturb
        return dx, dw, db


def kernel_checks(seed=0, conv_perturb=0.0):
    rng = np.random.default_rng(seed)
    conv = _Conv(conv_perturb)
    results = []

    for label, (shape, fshape, stride, pad, groups) in {
        "conv2d": ((2, 5, 5, 2), (3, 3, 3, 2), 1, 0, 1),
        "conv2d[stride2,pad1]": ((1, 7, 6, 3), (4, 3, 2, 3), 2, 1, 1),
        "conv2d[groups2]": ((2, 5, 5, 4), (6, 3, 3, 2), 1, 1, 2),
    }.items():
        x = rng.standard_normal(shape)
        w = rng.standard_normal(fshape)
        b = rng.standard_normal(fshape[0])

        def fwd(x=x, w=w, b=b, stride=stride, pad=pad, groups=groups):
            return nn.conv2d(x, nn.ConvParams(w, b, stride, stride, pad, pad, groups))

        def bwd(d, x=x, w=w, b=b, stride=stride, pad=pad, groups=groups):
            _, cache = nn.conv2d_forward(x, nn.ConvParams(w, b, stride, stride, pad, pad, groups))
            return conv.backward(d, cache)

        results.append(_check(label, fwd, bwd, (x, w, b), rng))

    for label, (shape, k, s) in {
        "maxpool2d": ((2, 6, 6, 3), 2, 2),
        "maxpool2d[3x3,stride2]": ((1, 7, 7, 2), 3, 2),
    }.items():
        x = rng.permutation(np.prod(shape)).reshape(shape) * 0.01 + rng.standard_normal(shape) * 1e-4
        results.append(_check(
            label,
            lambda x=x, k=k, s=s: nn.maxpool2d(x, k, k, s, s),
            lambda d, x=x, k=k, s=s: (nn.maxpool2d_backward(d, nn.maxpool2d_forward(x, k, k, s, s)[1]),),
            (x,), rng,
        ))

    x = _away_from_zero(rng, (3, 7))
    results.append(_check("relu", lambda: nn.relu(x),
                          lambda d: (nn.relu_backward(d, nn.relu_forward(x)[1]),), (x,), rng))

    for label, params in {
        "lrn": nn.LrnParams(),
        "lrn[radius1,alpha0.5]": nn.LrnParams(depth_radius=1, bias=1.5, alpha=0.5, beta=0.75),
    }.items():
        x = rng.standard_normal((2, 3, 3, 12)) * 3.0
        results.append(_check(label, lambda x=x, p=params: nn.lrn(x, p),
                              lambda d, x=x, p=params: (nn.lrn_backward(d, nn.lrn_forward(x, p)[1]),),
                              (x,), rng))

    x, w, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
    results.append(_check("linear", lambda: nn.linear(x, w, b),
                          lambda d: nn.linear_backward(d, nn.linear_forward(x, w, b)[1]), (x, w, b), rng))

    x = rng.standard_normal((4, 6))
    results.append(_check(
        "dropout",
        lambda: nn.dropout(x, 0.5, "train", np.random.default_rng(7)),
        lambda d: (nn.dropout_backward(d, nn.dropout_forward(x, 0.5, "train", np.random.default_rng(7))[1]),),
        (x,), rng,
    ))

    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    start = time.perf_counter()
    probs, _ = nn.softmax_xent(logits, labels)
    analytic = nn.softmax_xent_backward(probs, labels)
    numeric = numeric_gradient(lambda: nn.softmax_xent(logits, labels)[1], logits)
    results.append(CheckResult("softmax_xent", max_relative_error(analytic, numeric),
                               time.perf_counter() - start))
    return results


def network_check(seed=0, conv_perturb=0.0):
    """End-to-end loss gradient of the miniature network w.r.t. every parameter and the input."""
    start = time.perf_counter()
    with nn.float64_mode():
        spec = net.build_mini()
        rng = np.random.default_rng(seed)
        params = net.init_params(spec, rng)
        for name in params:
            if name.endswith(".b"):
                params[name] += 0.1 * rng.standard_normal(params[name].shape)
        batch = rng.standard_normal((3, *spec.input_shape))
        labels = np.array([0, 1, 2])

    def loss():
        logits, _ = net.forward_trace(spec, params, batch, "train", np.random.default_rng(seed + 1))
        return nn.softmax_xent(logits, labels)[1]

    logits, caches = net.forward_trace(spec, params, batch, "train", np.random.default_rng(seed + 1))
    probs, _ = nn.softmax_xent(logits, labels)
    dlogits = nn.softmax_xent_backward(probs, labels)
    grads = net.backward(caches, dlogits)
    dx = net.input_gradient(caches, dlogits)
    if conv_perturb:
        for name in grads:
            if name.startswith("conv"):
                grads[name] = grads[name] + conv_perturb
        dx = dx + conv_perturb
    worst = max_relative_error(dx, numeric_gradient(loss, batch))
    for name, p in params.items():
        worst = max(worst, max_relative_error(grads[name], numeric_gradient(loss, p)))
    return CheckResult("network[mini]", worst, time.perf_counter() - start)


def run_suite(seed=0, conv_perturb=0.0):
    return kernel_checks(seed, conv_perturb) + [network_check(seed, conv_perturb)]
