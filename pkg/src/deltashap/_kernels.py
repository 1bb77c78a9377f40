"""Compiled numerical kernels for the logistic and MLP models.

Parameters travel as one flat float64 vector.

* linear (``ARCH_LINEAR``): a ``(d + 1, out)`` matrix in row-major order,
  the last row being the bias. Flat index of (feature j, output o) is
  ``j * out + o``.
* MLP (``ARCH_MLP``): ``W1 (d, H)``, ``b1 (H)``, ``W2 (H, out)``, ``b2 (out)``
  concatenated in that order.

``out == 1`` means a binary sigmoid head with labels in {0, 1}; ``out >= 2``
is a softmax head.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ARCH_LINEAR = 0
ARCH_MLP = 1

ACT_SOFTPLUS = 0
ACT_RELU = 1

SCHEDULE_CONSTANT = 0
SCHEDULE_DECAYING = 1


@njit(cache=True)
def _softplus(t):
    if t > 0.0:
        return t + math.log1p(math.exp(-t))
    return math.log1p(math.exp(t))


@njit(cache=True)
def _sigmoid(t):
    if t >= 0.0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


@njit(cache=True)
def _head_loss_grad(z, y, out, dz):
    """Unclamped loss of logits ``z`` for label ``y``; writes dloss/dz into ``dz``."""
    if out == 1:
        p = _sigmoid(z[0])
        dz[0] = p - y
        return _softplus(-z[0]) if y == 1 else _softplus(z[0])
    zmax = z[0]
    for o in range(1, out):
        if z[o] > zmax:
            zmax = z[o]
    s = 0.0
    for o in range(out):
        s += math.exp(z[o] - zmax)
    lse = zmax + math.log(s)
    for o in range(out):
        dz[o] = math.exp(z[o] - lse)
    dz[y] -= 1.0
    return lse - z[y]


@njit(cache=True)
def _head_loss(z, y, out):
    if out == 1:
        return _softplus(-z[0]) if y == 1 else _softplus(z[0])
    zmax = z[0]
    for o in range(1, out):
        if z[o] > zmax:
            zmax = z[o]
    s = 0.0
    for o in range(out):
        s += math.exp(z[o] - zmax)
    return zmax + math.log(s) - z[y]


@njit(cache=True)
def _predict_class(z, out):
    if out == 1:
        return 1 if z[0] > 0.0 else 0
    best = 0
    for o in range(1, out):
        if z[o] > z[best]:
            best = o
    return best


# --- forward passes -------------------------------------------------------


@njit(cache=True)
def _linear_logits(theta, x, d, out, z):
    for o in range(out):
        z[o] = theta[d * out + o]
    for j in range(d):
        xj = x[j]
        if xj != 0.0:
            base = j * out
            for o in range(out):
                z[o] += theta[base + o] * xj


@njit(cache=True)
def _mlp_forward(theta, x, d, hidden, out, act, a, h, z):
    b1 = d * hidden
    w2 = b1 + hidden
    b2 = w2 + hidden * out
    for u in range(hidden):
        a[u] = theta[b1 + u]
    for j in range(d):
        xj = x[j]
        base = j * hidden
        for u in range(hidden):
            a[u] += theta[base + u] * xj
    for u in range(hidden):
        if act == ACT_SOFTPLUS:
            h[u] = _softplus(a[u])
        else:
            h[u] = a[u] if a[u] > 0.0 else 0.0
    for o in range(out):
        z[o] = theta[b2 + o]
    for u in range(hidden):
        hu = h[u]
        base = w2 + u * out
        for o in range(out):
            z[o] += theta[base + o] * hu


@njit(cache=True)
def logits(theta, X, arch, d, hidden, out, act):
    m = X.shape[0]
    Z = np.empty((m, out))
    z = np.empty(out)
    a = np.empty(max(hidden, 1))
    h = np.empty(max(hidden, 1))
    for r in range(m):
        if arch == ARCH_LINEAR:
            _linear_logits(theta, X[r], d, out, z)
        else:
            _mlp_forward(theta, X[r], d, hidden, out, act, a, h, z)
        for o in range(out):
            Z[r, o] = z[o]
    return Z


@njit(cache=True)
def evaluate(theta, X, y, arch, d, hidden, out, act, cap):
    """Mean per-example loss clamped at ``cap``, and accuracy."""
    m = X.shape[0]
    z = np.empty(out)
    a = np.empty(max(hidden, 1))
    h = np.empty(max(hidden, 1))
    total = 0.0
    correct = 0
    for r in range(m):
        if arch == ARCH_LINEAR:
            _linear_logits(theta, X[r], d, out, z)
        else:
            _mlp_forward(theta, X[r], d, hidden, out, act, a, h, z)
        loss = _head_loss(z, y[r], out)
        if loss > cap:
            loss = cap
        total += loss
        if _predict_class(z, out) == y[r]:
            correct += 1
    return total / m, correct / m


# --- per-example gradients ------------------------------------------------


@njit(cache=True)
def _linear_example_grad(theta, x, y, d, out, z, dz, grad):
    _linear_logits(theta, x, d, out, z)
    loss = _head_loss_grad(z, y, out, dz)
    for j in range(d):
        base = j * out
        for o in range(out):
            grad[base + o] = x[j] * dz[o]
    for o in range(out):
        grad[d * out + o] = dz[o]
    return loss


@njit(cache=True)
def _mlp_example_grad(theta, x, y, d, hidden, out, act, a, h, z, dz, dh, grad):
    _mlp_forward(theta, x, d, hidden, out, act, a, h, z)
    loss = _head_loss_grad(z, y, out, dz)
    b1 = d * hidden
    w2 = b1 + hidden
    b2 = w2 + hidden * out
    for u in range(hidden):
        acc = 0.0
        base = w2 + u * out
        for o in range(out):
            grad[base + o] = h[u] * dz[o]
            acc += theta[base + o] * dz[o]
        if act == ACT_SOFTPLUS:
            dh[u] = acc * _sigmoid(a[u])
        else:
            dh[u] = acc if a[u] > 0.0 else 0.0
    for o in range(out):
        grad[b2 + o] = dz[o]
    for j in range(d):
        base = j * hidden
        xj = x[j]
        for u in range(hidden):
            grad[base + u] = xj * dh[u]
    for u in range(hidden):
        grad[b1 + u] = dh[u]
    return loss


@njit(cache=True)
def example_loss_grad(theta, x, y, arch, d, hidden, out, act):
    """Unregularized, unclamped loss and gradient for one example."""
    grad = np.zeros(theta.shape[0])
    z = np.empty(out)
    dz = np.empty(out)
    if arch == ARCH_LINEAR:
        loss = _linear_example_grad(theta, x, y, d, out, z, dz, grad)
    else:
        a = np.empty(hidden)
        h = np.empty(hidden)
        dh = np.empty(hidden)
        loss = _mlp_example_grad(theta, x, y, d, hidden, out, act, a, h, z, dz, dh, grad)
    return loss, grad


# --- SGD ------------------------------------------------------------------


@njit(cache=True)
def sgd(theta0, X, y, steps, arch, d, hidden, out, act, lam, schedule, alpha, c):
    """``steps`` single-example updates cycling the rows of ``X`` in order.

    Step ``t`` (1-based) uses ``alpha`` for the constant schedule and
    ``min(c / t, alpha)`` for the decaying one.
    """
    theta = theta0.copy()
    m = X.shape[0]
    if m == 0 or steps == 0:
        return theta
    P = theta.shape[0]
    grad = np.zeros(P)
    z = np.empty(out)
    dz = np.empty(out)
    hh = max(hidden, 1)
    a = np.empty(hh)
    h = np.empty(hh)
    dh = np.empty(hh)
    for t in range(1, steps + 1):
        r = (t - 1) % m
        if arch == ARCH_LINEAR:
            _linear_example_grad(theta, X[r], y[r], d, out, z, dz, grad)
        else:
            _mlp_example_grad(theta, X[r], y[r], d, hidden, out, act, a, h, z, dz, dh, grad)
        if schedule == SCHEDULE_CONSTANT:
            step = alpha
        else:
            step = c / t
            if step > alpha:
                step = alpha
        for q in range(P):
            theta[q] -= step * (grad[q] + 2.0 * lam * theta[q])
    return theta


# --- full-batch solvers for the regularized linear model ------------------


@njit(cache=True)
def linear_objective(theta, X, y, d, out, lam):
    m = X.shape[0]
    z = np.empty(out)
    total = 0.0
    for r in range(m):
        _linear_logits(theta, X[r], d, out, z)
        total += _head_loss(z, y[r], out)
    reg = 0.0
    for q in range(theta.shape[0]):
        reg += theta[q] * theta[q]
    return total / m + lam * reg


@njit(cache=True)
def _linear_grad_hess(theta, X, y, d, out, lam, want_hess):
    m = X.shape[0]
    P = theta.shape[0]
    g = np.zeros(P)
    H = np.zeros((P, P)) if want_hess else np.zeros((1, 1))
    z = np.empty(out)
    p = np.empty(out)
    xt = np.empty(d + 1)
    total = 0.0
    for r in range(m):
        for j in range(d):
            xt[j] = X[r, j]
        xt[d] = 1.0
        _linear_logits(theta, X[r], d, out, z)
        total += _head_loss_grad(z, y[r], out, p)
        for j in range(d + 1):
            for o in range(out):
                g[j * out + o] += xt[j] * p[o]
        if want_hess:
            if out == 1:
                s = _sigmoid(z[0])
                w = s * (1.0 - s)
                for i in range(d + 1):
                    for j in range(d + 1):
                        H[i, j] += w * xt[i] * xt[j]
            else:
                # p currently holds probs minus one-hot; rebuild probabilities
                p[y[r]] += 1.0
                for i in range(d + 1):
                    for a_ in range(out):
                        for j in range(d + 1):
                            xx = xt[i] * xt[j]
                            for b_ in range(out):
                                cov = -p[a_] * p[b_]
                                if a_ == b_:
                                    cov += p[a_]
                                H[i * out + a_, j * out + b_] += cov * xx
    reg = 0.0
    for q in range(P):
        g[q] = g[q] / m + 2.0 * lam * theta[q]
        reg += theta[q] * theta[q]
    if want_hess:
        for i in range(P):
            for j in range(P):
                H[i, j] /= m
            H[i, i] += 2.0 * lam
    return total / m + lam * reg, g, H


@njit(cache=True)
def linear_grad(theta, X, y, d, out, lam):
    f, g, _ = _linear_grad_hess(theta, X, y, d, out, lam, False)
    return f, g


@njit(cache=True)
def newton(theta0, X, y, d, out, lam, tol, max_iter):
    """Damped Newton with Armijo backtracking; returns (theta, iterations, grad_norm)."""
    theta = theta0.copy()
    gnorm = np.inf
    for it in range(max_iter):
        f, g, H = _linear_grad_hess(theta, X, y, d, out, lam, True)
        gnorm = np.sqrt(np.sum(g * g))
        if not np.isfinite(f) or gnorm <= tol:
            return theta, it, gnorm
        step = np.linalg.solve(H, g)
        slope = np.sum(g * step)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = linear_objective(cand, X, y, d, out, lam)
            if fc <= f - 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if t < 1e-12:
            return theta, it, gnorm
        theta = cand
    f, g = linear_grad(theta, X, y, d, out, lam)
    return theta, max_iter, np.sqrt(np.sum(g * g))


@njit(cache=True)
def gradient_descent(theta0, X, y, d, out, lam, step, tol, max_iter):
    theta = theta0.copy()
    gnorm = np.inf
    for it in range(max_iter):
        f, g = linear_grad(theta, X, y, d, out, lam)
        gnorm = np.sqrt(np.sum(g * g))
        if not np.isfinite(f) or gnorm <= tol:
            return theta, it, gnorm
        theta = theta - step * g
    f, g = linear_grad(theta, X, y, d, out, lam)
    return theta, max_iter, np.sqrt(np.sum(g * g))
