"""Oracle suite run by ``jmvae selftest``: gradients, KL, estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import oracles
from .dists import DiagGaussian, kl_diag_gaussians, kl_to_std_normal
from .infer import cond_loglik, nested_loglik_samples
from .models import ModelSpec, make_model

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# op -> (input factory, kwargs); factories take (rng, n, d)
def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


PRIMITIVE_CASES = {
    "matmul": (lambda r, n, d: [r.normal(size=(n, d)), r.normal(size=(d, 3))], {}),
    "add": (lambda r, n, d: [r.normal(size=(n, d)), r.normal(size=(d,))], {}),
    "sub": (lambda r, n, d: [r.normal(size=(n, d)), r.normal(size=(1, d))], {}),
    "mul": (lambda r, n, d: [r.normal(size=(n, d)), r.normal(size=(n, d))], {}),
    "div": (lambda r, n, d: [r.normal(size=(n, d)), _pos(r, (n, d))], {}),
    "scale": (lambda r, n, d: [r.normal(size=(n, d))], {"c": -1.7}),
    "neg": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "exp": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "log": (lambda r, n, d: [_pos(r, (n, d))], {}),
    "sqrt": (lambda r, n, d: [_pos(r, (n, d))], {}),
    "square": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "relu": (lambda r, n, d: [_away_from_zero(r, (n, d))], {}),
    "sigmoid": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "softplus": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "softmax": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "concat": (lambda r, n, d: [r.normal(size=(n, d)), r.normal(size=(n, 2))], {}),
    "slice": (lambda r, n, d: [r.normal(size=(n, d + 2))], {"start": 1, "stop": 3}),
    "sum": (lambda r, n, d: [r.normal(size=(n, d))], {"axis": -1}),
    "mean": (lambda r, n, d: [r.normal(size=(n, d))], {}),
    "clip": (lambda r, n, d: [_away_from_zero(r, (n, d))], {"lo": -0.7, "hi": 0.9}),
}


def primitive_gradient_error(op: str, rng: np.random.Generator, n: int, d: int) -> float:
    """Finite-difference error of one primitive composed with a random linear read-out."""
    make, kwargs = PRIMITIVE_CASES[op]
    with dc.precision(np.float64):
        inputs = {f"in{i}": dc.parameter(a.astype(np.float64)) for i, a in enumerate(make(rng, n, d))}
        probe_out = dc.primitive_forward(op, *inputs.values(), **kwargs)
        weights = rng.normal(size=probe_out.shape) if probe_out.shape else rng.normal()

        def f():
            out = dc.primitive_forward(op, *inputs.values(), **kwargs)
            return dc.sum(dc.mul(out, np.asarray(weights, dtype=np.float64)))

        if op == "clip":  # keep probes off the clip boundaries
            a = inputs["in0"].data
            a[np.abs(a - kwargs["lo"]) < 1e-3] += 1e-2
            a[np.abs(a - kwargs["hi"]) < 1e-3] -= 1e-2
        return dc.finite_diff_check(f, inputs, eps=1e-5)


TINY_ARCHS = {
    "arch_joint": "(D6R, D5R)-D5R",
    "arch_enc_x": "D5R",
    "arch_enc_w": "D4R",
    "arch_dec_x": "D5R",
    "arch_dec_w": "D4R",
    "arch_prior": "D4R",
    "arch_top": "D3-D4R",
}


def bound_gradient_error(kind: str, seed: int, beta: float = 0.7, **spec_kw) -> float:
    """Finite-difference error of a full bound on a tiny model with frozen noise."""
    rng = np.random.default_rng(seed)
    n, x_dim, w_dim = 4, 6, 3
    with dc.precision(np.float64):
        spec = ModelSpec(kind, x_dim, w_dim, latent_dim=2, archs=TINY_ARCHS, seed=seed, **spec_kw)
        model = make_model(spec).astype(np.float64)
        for t in model.params().values():  # non-zero biases exercise every path
            if t.name.endswith(".b"):
                t.data[:] = rng.normal(scale=0.1, size=t.shape)
        x = (rng.random((n, x_dim)) < 0.5).astype(np.float64)
        w = np.eye(w_dim)[rng.integers(0, w_dim, n)]
        eps = model.sample_noise(rng, n, 1, dtype=np.float64)
        return dc.finite_diff_check(lambda: model.bound(x, w, beta, eps).loss, model.params(), eps=1e-5)


def random_gaussian(rng: np.random.Generator, d: int) -> DiagGaussian:
    return DiagGaussian(
        dc.Tensor(rng.normal(size=(1, d)), dtype=np.float64),
        dc.Tensor(rng.uniform(0.3, 2.0, size=(1, d)), dtype=np.float64),
    )


def kl_monte_carlo(q: DiagGaussian, p: DiagGaussian | None, n: int, rng: np.random.Generator):
    """Mean and standard error of ``log q(z) - log p(z)`` with ``z ~ q``."""
    qm, qv = q.mean.data[0], q.var.data[0]
    z = qm + np.sqrt(qv) * rng.standard_normal((n, len(qm)))
    log_q = -0.5 * np.sum(np.log(2 * np.pi * qv) + (z - qm) ** 2 / qv, axis=1)
    if p is None:
        log_p = -0.5 * np.sum(np.log(2 * np.pi) + z**2, axis=1)
    else:
        pm, pv = p.mean.data[0], p.var.data[0]
        log_p = -0.5 * np.sum(np.log(2 * np.pi * pv) + (z - pm) ** 2 / pv, axis=1)
    diff = log_q - log_p
    return float(diff.mean()), float(diff.std(ddof=1) / np.sqrt(n))


def kl_checks(n_pairs: int, n_samples: int, seed: int = 0, dim: int = 8) -> tuple[int, float]:
    """Count of pairs within 3 standard errors (both KL kinds) and worst z-score."""
    rng = np.random.default_rng(seed)
    ok, worst = 0, 0.0
    for _ in range(n_pairs):
        q, p = random_gaussian(rng, dim), random_gaussian(rng, dim)
        a1 = float(kl_to_std_normal(q).data[0])
        m1, s1 = kl_monte_carlo(q, None, n_samples, rng)
        a2 = float(kl_diag_gaussians(q, p).data[0])
        m2, s2 = kl_monte_carlo(q, p, n_samples, rng)
        z = max(abs(a1 - m1) / s1, abs(a2 - m2) / s2)
        worst = max(worst, z)
        ok += z <= 3.0
    return ok, worst


def toy_estimator_model(kind: str, seed: int = 0):
    """A 1-D latent model over 1-D Gaussian ``x`` and 2-way ``w`` with random weights."""
    archs = {"arch_joint": "(D8R, D8R)", "arch_enc_x": "D8R", "arch_enc_w": "D8R", "arch_dec_x": "D8R",
             "arch_dec_w": "D8R", "arch_prior": "D8R", "arch_top": "D4-D8R"}
    spec = ModelSpec(kind, 1, 2, x_kind="fixed_gaussian", latent_dim=1, archs=archs, seed=seed)
    return make_model(spec)


def estimator_checks(replications: int = 2000, seed: int = 0) -> list[CheckResult]:
    results = []
    w_row = np.array([0.0, 1.0], dtype=np.float32)
    x_row = np.array([0.8], dtype=np.float32)

    kl_model = toy_estimator_model("jmvae_kl", seed)
    q = kl_model.enc_w(w_row[None])
    quad = oracles.log_marginal_1d(kl_model.dec_x, float(q.mean.data[0, 0]), float(q.var.data[0, 0]), x_row)
    est = cond_loglik(kl_model, np.repeat(x_row[None], replications, 0), np.repeat(w_row[None], replications, 0),
                      "x", n_samples=10, seed=seed)
    rep_se = float(est.per_item.std(ddof=1) / np.sqrt(replications))
    results.append(CheckResult("single-level estimate <= quadrature", est.value <= quad + 3 * rep_se,
                               f"estimate {est.value:.4f} vs log-marginal {quad:.4f} (se {rep_se:.4f})"))

    h_model = toy_estimator_model("jmvae_h", seed)
    _, q2 = h_model.encode(x_row[None], w_row[None])
    m2, v2 = float(q2.mean.data[0, 0]), float(q2.var.data[0, 0])
    quad_h = oracles.log_marginal_hier_1d(h_model, h_model.dec_x, m2, v2, x_row, n_outer=151, n_inner=151)
    q2_rep = DiagGaussian(dc.Tensor(np.full((replications, 1), m2, np.float32)),
                          dc.Tensor(np.full((replications, 1), v2, np.float32)))
    samples = nested_loglik_samples(h_model, h_model.dec_x, q2_rep, np.repeat(x_row[None], replications, 0),
                                    10, seed, np.arange(replications))
    per_rep = samples.mean(axis=1)
    nested = float(per_rep.mean())
    se = float(per_rep.std(ddof=1) / np.sqrt(replications))
    results.append(CheckResult("nested estimate <= quadrature", nested <= quad_h + 3 * se,
                               f"estimate {nested:.4f} vs log-marginal {quad_h:.4f} (se {se:.4f})"))
    return results


def run_selftest(seed: int = 0, quick: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for op in PRIMITIVE_CASES:
        n, d = int(rng.integers(1, 5)), int(rng.integers(2, 5))
        err = primitive_gradient_error(op, rng, n, d)
        results.append(CheckResult(f"gradient {op}", err < GRAD_TOL, f"max rel error {err:.2e}"))
    for kind in ("vae", "jmvae", "jmvae_kl", "jmvae_h", "cvae"):
        err = bound_gradient_error(kind, seed)
        results.append(CheckResult(f"gradient bound {kind}", err < GRAD_TOL, f"max rel error {err:.2e}"))
    n_pairs, n_samples = (5, 20000) if quick else (50, 100000)
    ok, worst = kl_checks(n_pairs, n_samples, seed)
    results.append(CheckResult("KL vs Monte Carlo", ok == n_pairs, f"{ok}/{n_pairs} within 3 se, worst z {worst:.2f}"))
    q = random_gaussian(rng, 8)
    zero = float(kl_diag_gaussians(q, q).data[0]) == 0.0 and float(
        kl_to_std_normal(DiagGaussian(dc.Tensor(np.zeros((1, 8))), dc.Tensor(np.ones((1, 8))))).data[0]) == 0.0
    results.append(CheckResult("KL zero at coincidence", zero, "exact"))
    results.extend(estimator_checks(500 if quick else 10000, seed))
    return results
