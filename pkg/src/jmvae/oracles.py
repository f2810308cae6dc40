"""Independent reference computations used by the self-test and test suite.

Everything here works on 1-D latents by dense quadrature on a grid, never
through the Monte Carlo estimators it is meant to check.
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .dists import log_prob


def _gauss_logpdf(z: np.ndarray, mean: float, var: float) -> np.ndarray:
    return -0.5 * (np.log(2 * np.pi * var) + (z - mean) ** 2 / var)


def _grid(mean: float, var: float, n: int, width: float) -> tuple[np.ndarray, float]:
    sd = np.sqrt(var)
    z = np.linspace(mean - width * sd, mean + width * sd, n)
    return z, z[1] - z[0]


def _decoder_loglik(decoder, z: np.ndarray, target_row: np.ndarray) -> np.ndarray:
    zs = z.reshape(-1, 1).astype(np.float32)
    tgt = np.repeat(np.asarray(target_row, dtype=np.float32)[None], len(zs), axis=0)
    return np.asarray(log_prob(decoder(zs), tgt).data, dtype=np.float64)


def log_marginal_1d(decoder, q_mean: float, q_var: float, target_row, n: int = 4001, width: float = 12.0) -> float:
    """``log ∫ N(z; q_mean, q_var) p(target | z) dz`` for a 1-D latent."""
    z, dz = _grid(q_mean, q_var, n, width)
    return float(logsumexp(_gauss_logpdf(z, q_mean, q_var) + _decoder_loglik(decoder, z, target_row)) + np.log(dz))


def expected_loglik_1d(decoder, q_mean: float, q_var: float, target_row, n: int = 4001, width: float = 12.0) -> float:
    """``∫ N(z; q_mean, q_var) log p(target | z) dz`` (the Jensen side)."""
    z, dz = _grid(q_mean, q_var, n, width)
    w = np.exp(_gauss_logpdf(z, q_mean, q_var)) * dz
    return float(np.sum(w * _decoder_loglik(decoder, z, target_row)) / np.sum(w))


def log_marginal_hier_1d(model, decoder, q2_mean: float, q2_var: float, target_row,
                         n_outer: int = 301, n_inner: int = 301, width: float = 10.0) -> float:
    """``log ∫ q(z2) ∫ p(z1|z2) p(target|z1) dz1 dz2`` with 1-D ``z1``, ``z2``."""
    z2, dz2 = _grid(q2_mean, q2_var, n_outer, width)
    p1 = model.prior_z1(z2.reshape(-1, 1).astype(np.float32))
    m1 = p1.mean.data[:, 0].astype(np.float64)
    v1 = p1.var.data[:, 0].astype(np.float64)
    inner = np.empty(n_outer)
    for i in range(n_outer):
        z1, dz1 = _grid(m1[i], v1[i], n_inner, width)
        inner[i] = logsumexp(_gauss_logpdf(z1, m1[i], v1[i]) + _decoder_loglik(decoder, z1, target_row)) + np.log(dz1)
    return float(logsumexp(_gauss_logpdf(z2, q2_mean, q2_var) + inner) + np.log(dz2))


def chain_stationary_1d(model, w_row, x_grid: np.ndarray, n_z: int = 801, width: float = 10.0) -> np.ndarray:
    """Stationary density of the complement kernel on ``x_grid`` (1-D ``x`` and ``z``).

    Builds ``K[i, j] ≈ ∫ N(x_j; mu_dec(z), 1) q(z | x_i, w) dz · dx`` and returns
    the left eigenvector for eigenvalue 1, normalised to a density.
    """
    x_grid = np.asarray(x_grid, dtype=np.float64)
    dx = x_grid[1] - x_grid[0]
    xs = x_grid.reshape(-1, 1).astype(np.float32)
    ws = np.repeat(np.asarray(w_row, dtype=np.float32)[None], len(xs), axis=0)
    q = model.enc_joint(xs, ws)
    qm = q.mean.data[:, 0].astype(np.float64)
    qv = q.var.data[:, 0].astype(np.float64)
    K = np.empty((len(x_grid), len(x_grid)))
    for i in range(len(x_grid)):
        z, dz = _grid(qm[i], qv[i], n_z, width)
        wz = np.exp(_gauss_logpdf(z, qm[i], qv[i])) * dz
        mu = model.dec_x(z.reshape(-1, 1).astype(np.float32)).mean.data[:, 0].astype(np.float64)
        dens = np.exp(_gauss_logpdf(x_grid[None, :], mu[:, None], 1.0))
        K[i] = wz @ dens * dx
    K /= K.sum(axis=1, keepdims=True)
    vals, vecs = np.linalg.eig(K.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    pi = np.abs(pi) / np.abs(pi).sum()
    return pi / dx
