"""Independent reference computations shared by unit and acceptance tests."""

from __future__ import annotations

import numpy as np

from tvsd import autodiff as ad
from tvsd.autodiff import Tensor


def rvq_frozen_loss(rvq, h: Tensor, codes: np.ndarray, w: Tensor, cb_w: float = 1.0, commit_w: float = 0.25):
    """Builds the RVQ training objective with every stop-gradient target frozen at the current point.

    Returns ``(frozen_fn, real_fn)``.  ``frozen_fn`` is an ordinary differentiable function, so
    central differences apply to it; at the freeze point its analytic gradient must equal the
    module's (which uses stop-gradients and a straight-through output).
    """
    books = rvq.books.data
    z0 = h.data @ rvq.down.data
    residuals, r = [], z0.copy()
    for s in range(books.shape[0]):
        residuals.append(r.copy())
        r = r - books[s][codes[..., s]]
    zq0 = sum(books[s][codes[..., s]] for s in range(books.shape[0]))
    hq0 = zq0 @ rvq.up.data
    h0 = h.data.copy()
    S, C, cd = books.shape

    def frozen_fn():
        flat = rvq.books.reshape(S * C, cd)
        codebook = None
        for s in range(S):
            term = ad.mse_loss(ad.embedding_lookup(flat, s * C + codes[..., s]), Tensor(residuals[s]))
            codebook = term if codebook is None else codebook + term
        upfit = ad.mse_loss(ad.matmul(Tensor(zq0), rvq.up), Tensor(h0))
        commit = ad.mse_loss(ad.matmul(h, rvq.down), Tensor(zq0)) + ad.mse_loss(h, Tensor(hq0))
        st = h + Tensor(hq0 - h0)
        return ad.scale(codebook + upfit, cb_w) + ad.scale(commit, commit_w) + ad.mul(st, w).sum()

    def real_fn():
        q = rvq(h, codes=codes, codebook_weight=cb_w, commitment_weight=commit_w)
        return q.aux + ad.mul(q.h_q, w).sum()

    return frozen_fn, real_fn


def rvq_grad_check(rvq, h: Tensor, codes: np.ndarray, w: Tensor, tolerance: float = 1e-4):
    """Finite-difference check of the frozen objective plus agreement with the module gradient."""
    frozen_fn, real_fn = rvq_frozen_loss(rvq, h, codes, w)
    params = dict(rvq.named_parameters())
    params["h"] = h
    report = ad.grad_check(frozen_fn, params, tolerance=tolerance)
    names = list(params)
    g_real = ad.backward(real_fn(), [params[n] for n in names])
    g_frozen = ad.backward(frozen_fn(), [params[n] for n in names])
    agree = max(float(np.max(np.abs(a - b))) for a, b in zip(g_real, g_frozen))
    return report, agree


def gaussian_sample_stats(xs: np.ndarray) -> tuple[float, float]:
    return float(xs.mean()), float(xs.std())


def angular(tau):
    tau = np.asarray(tau, dtype=np.float64)
    return np.cos(np.pi * tau / 2), np.sin(np.pi * tau / 2)


def gaussian_oracle_velocity(mean: float, std: float):
    """Exact velocity for data N(mean, std^2 I): Bayes posterior mean of x0, converted to v."""

    def fn(h, tau):
        a, s = angular(tau)
        var = std * std
        x0 = mean + a * var * (h - a * mean) / (a * a * var + s * s)
        return (a * h - x0) / s

    return fn


def reference_ddim(velocity_fn, xi: np.ndarray, L: int) -> np.ndarray:
    """Textbook deterministic sampler written from scratch for cross-checking."""
    h = xi.copy()
    for n in range(L, 0, -1):
        a, s = angular(n / L)
        a1, s1 = angular((n - 1) / L)
        v = velocity_fn(h, n / L)
        x0 = a * h - s * v
        eps = s * h + a * v
        h = a1 * x0 + s1 * eps
    return h
