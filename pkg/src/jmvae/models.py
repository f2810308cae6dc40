"""The five model variants and their variational lower bounds.

Every bound returns the *loss* (negated bound, batch mean) together with
per-example reconstruction and divergence terms.  ``beta`` is the warm-up
weight applied to divergences; the encoder-matching KLs of JMVAE-kl are
weighted by ``beta`` too unless ``warmup_scope == "prior"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .dists import DiagGaussian, StdNormal, kl_diag_gaussians, kl_to_std_normal, log_prob, rsample
from .errors import ConfigError, NumericsError, ShapeError, UnsupportedOperation
from .nets import Network, build, canonical_arch, derive_seed

MODEL_KINDS = ("vae", "jmvae", "jmvae_kl", "jmvae_h", "cvae")
DIVERGENCE_TERMS = ("kl", "kl_x", "kl_w", "kl_z1")

DEFAULT_ARCHS = {
    "arch_joint": "(D512R-D512R, D512R-D512R)",
    "arch_enc_x": "D512R-D512R",
    "arch_enc_w": "D512R-D512R",
    "arch_dec_x": "D512R-D512R",
    "arch_dec_w": "D512R-D512R",
    "arch_prior": "D512R-D512R",
    "arch_top": "D64-D512R-D512R",
}

# architecture keys each kind actually uses
USED_ARCHS = {
    "vae": ("arch_enc_x", "arch_dec_x"),
    "jmvae": ("arch_joint", "arch_dec_x", "arch_dec_w"),
    "jmvae_kl": ("arch_joint", "arch_dec_x", "arch_dec_w", "arch_enc_x", "arch_enc_w"),
    "jmvae_h": ("arch_joint", "arch_top", "arch_prior", "arch_dec_x", "arch_dec_w"),
    "cvae": ("arch_joint", "arch_dec_x", "arch_dec_w"),
}


@dataclass
class ModelSpec:
    kind: str
    x_dim: int
    w_dim: int
    x_kind: str = "bernoulli"
    w_kind: str = "categorical"
    latent_dim: int = 64
    archs: dict = field(default_factory=lambda: dict(DEFAULT_ARCHS))
    seed: int = 0
    kl_coef: float = 1.0
    warmup_scope: str = "all"
    cvae_direction: str = "x|w"

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.warmup_scope not in ("all", "prior"):
            raise ConfigError(f"warmup_scope must be 'all' or 'prior', got {self.warmup_scope!r}")
        if self.cvae_direction not in ("x|w", "w|x"):
            raise ConfigError(f"cvae_direction must be 'x|w' or 'w|x', got {self.cvae_direction!r}")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be positive")
        archs = dict(DEFAULT_ARCHS)
        archs.update(self.archs)
        self.archs = {k: canonical_arch(v) for k, v in archs.items()}


@dataclass
class Bound:
    loss: Tensor
    terms: dict[str, np.ndarray]

    def summary(self) -> dict[str, float]:
        out = {"loss": float(self.loss.data)}
        out.update({k: float(np.mean(v)) for k, v in self.terms.items()})
        return out


def _as_noise_stack(eps, shape) -> np.ndarray:
    e = np.asarray(eps)
    if e.shape == shape:
        e = e[None]
    if e.ndim != 3 or e.shape[1:] != shape:
        raise ShapeError(f"noise shape {np.shape(eps)} does not match {shape}")
    return e


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"divergence weight must lie in [0, 1], got {beta}")


def _check_finite(loss: Tensor) -> Tensor:
    if not np.isfinite(loss.data):
        raise NumericsError("non-finite loss")
    return loss


def _finish(rec: list[Tensor], divs: list[tuple[Tensor, float]], terms: dict) -> Bound:
    """Assemble ``-mean(sum(rec) - sum(weight * div))``."""
    total = rec[0]
    for r in rec[1:]:
        total = total + r
    for d, weight in divs:
        if weight != 0.0:
            total = total - dc.scale(d, weight)
    loss = _check_finite(dc.neg(dc.mean(total)))
    return Bound(loss, {k: np.array(v.data, dtype=np.float64) for k, v in terms.items()})


def _mc_average(values: list[Tensor]) -> Tensor:
    total = values[0]
    for v in values[1:]:
        total = total + v
    return total if len(values) == 1 else dc.scale(total, 1.0 / len(values))


class Model:
    kind = ""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.networks: dict[str, Network] = {}
        self._build()

    def _net(self, name: str, arch_key: str, inputs, head: str, out_dim: int) -> Network:
        net = build(self.spec.archs[arch_key], inputs, head, out_dim, derive_seed(self.spec.seed, name))
        self.networks[name] = net
        return net

    def _build(self) -> None:
        raise NotImplementedError

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def params(self) -> dict[str, Tensor]:
        return {f"{n}/{p}": t for n, net in self.networks.items() for p, t in net.params.items()}

    def astype(self, dtype) -> "Model":
        for t in self.params().values():
            t.data = t.data.astype(dtype)
        return self

    def divergence_weights(self, beta: float) -> dict[str, float]:
        extra = self.spec.kl_coef * (beta if self.spec.warmup_scope == "all" else 1.0)
        return {"kl": beta, "kl_z1": beta, "kl_x": extra, "kl_w": extra}

    def noise_shapes(self, n: int) -> tuple[tuple[int, int], ...]:
        return ((n, self.latent_dim),)

    def sample_noise(self, rng: np.random.Generator, n: int, samples: int = 1, dtype=np.float32):
        out = tuple(rng.standard_normal((samples,) + s).astype(dtype) for s in self.noise_shapes(n))
        return out if len(out) > 1 else out[0]

    def bound(self, x, w, beta: float, eps) -> Bound:
        raise NotImplementedError


class VAEModel(Model):
    """Single-modality VAE over ``x``."""

    kind = "vae"

    def _build(self):
        s = self.spec
        self.encoder = self._net("enc_x", "arch_enc_x", s.x_dim, "gaussian", s.latent_dim)
        self.decoder = self._net("dec_x", "arch_dec_x", s.latent_dim, s.x_kind, s.x_dim)

    def bound(self, x, w, beta, eps):
        return elbo_vae(self, x, beta, eps)


class JMVAEModel(Model):
    kind = "jmvae"

    def _build(self):
        s = self.spec
        self.enc_joint = self._net("enc_joint", "arch_joint", (s.x_dim, s.w_dim), "gaussian", s.latent_dim)
        self.dec_x = self._net("dec_x", "arch_dec_x", s.latent_dim, s.x_kind, s.x_dim)
        self.dec_w = self._net("dec_w", "arch_dec_w", s.latent_dim, s.w_kind, s.w_dim)

    def bound(self, x, w, beta, eps):
        return elbo_jmvae(self, x, w, beta, eps)


class JMVAEklModel(JMVAEModel):
    kind = "jmvae_kl"

    def _build(self):
        super()._build()
        s = self.spec
        self.enc_x = self._net("enc_x", "arch_enc_x", s.x_dim, "gaussian", s.latent_dim)
        self.enc_w = self._net("enc_w", "arch_enc_w", s.w_dim, "gaussian", s.latent_dim)

    def bound(self, x, w, beta, eps):
        return elbo_jmvae_kl(self, x, w, beta, eps)


class JMVAEhModel(Model):
    """Two stochastic layers; ``z2`` is read from a tail on the joint trunk."""

    kind = "jmvae_h"

    def _build(self):
        s = self.spec
        d = s.latent_dim
        self.enc_joint = self._net("enc_joint", "arch_joint", (s.x_dim, s.w_dim), "gaussian", d)
        self.enc_top = self._net("enc_top", "arch_top", self.enc_joint.feature_dim, "gaussian", d)
        self.prior_z1 = self._net("prior_z1", "arch_prior", d, "gaussian", d)
        self.dec_x = self._net("dec_x", "arch_dec_x", d, s.x_kind, s.x_dim)
        self.dec_w = self._net("dec_w", "arch_dec_w", d, s.w_kind, s.w_dim)

    def noise_shapes(self, n):
        return ((n, self.latent_dim), (n, self.latent_dim))

    def encode(self, x, w) -> tuple[DiagGaussian, DiagGaussian]:
        """Return ``(q(z1|x,w), q(z2|x,w))``."""
        q1, h1 = self.enc_joint.forward_with_features(x, w)
        return q1, self.enc_top(h1)

    def bound(self, x, w, beta, eps):
        return elbo_jmvae_h(self, x, w, beta, eps)


class CVAEModel(Model):
    """Conditional VAE; ``cvae_direction`` picks target|condition."""

    kind = "cvae"

    def _build(self):
        s = self.spec
        self.enc_joint = self._net("enc_joint", "arch_joint", (s.x_dim, s.w_dim), "gaussian", s.latent_dim)
        if s.cvae_direction == "x|w":
            self.decoder = self._net("dec_x", "arch_dec_x", s.latent_dim + s.w_dim, s.x_kind, s.x_dim)
        else:
            self.decoder = self._net("dec_w", "arch_dec_w", s.latent_dim + s.x_dim, s.w_kind, s.w_dim)

    @property
    def target(self) -> str:
        return self.spec.cvae_direction[0]

    def decode(self, z, cond):
        return self.decoder(dc.concat(dc.as_tensor(z), dc.as_tensor(cond, z if isinstance(z, Tensor) else None)))

    def bound(self, x, w, beta, eps):
        return elbo_cvae(self, x, w, beta, eps)


_KIND_CLASSES = {
    "vae": VAEModel,
    "jmvae": JMVAEModel,
    "jmvae_kl": JMVAEklModel,
    "jmvae_h": JMVAEhModel,
    "cvae": CVAEModel,
}


def make_model(spec: ModelSpec) -> Model:
    return _KIND_CLASSES[spec.kind](spec)


# --------------------------------------------------------------------- bounds


def _reconstruct(q: DiagGaussian, eps, decoders) -> tuple[list[Tensor], dict[str, Tensor]]:
    """Monte Carlo reconstruction terms averaged over the leading noise axis."""
    stack = _as_noise_stack(eps, q.mean.shape)
    per_sample = {name: [] for name, _, _ in decoders}
    for e in stack:
        z = rsample(q, e)
        for name, dec, value in decoders:
            per_sample[name].append(log_prob(dec(z), value))
    recs = {name: _mc_average(v) for name, v in per_sample.items()}
    return list(recs.values()), recs


def elbo_vae(model: VAEModel, x, beta: float, eps) -> Bound:
    _check_beta(beta)
    q = model.encoder(x)
    rec, terms = _reconstruct(q, eps, [("rec_x", model.decoder, x)])
    kl = kl_to_std_normal(q)
    terms["kl"] = kl
    return _finish(rec, [(kl, beta)], terms)


def elbo_jmvae(model: JMVAEModel, x, w, beta: float, eps) -> Bound:
    _check_beta(beta)
    q = model.enc_joint(x, w)
    rec, terms = _reconstruct(q, eps, [("rec_x", model.dec_x, x), ("rec_w", model.dec_w, w)])
    kl = kl_to_std_normal(q)
    terms["kl"] = kl
    return _finish(rec, [(kl, beta)], terms)


def elbo_jmvae_kl(model: JMVAEklModel, x, w, beta: float, eps) -> Bound:
    _check_beta(beta)
    q = model.enc_joint(x, w)
    rec, terms = _reconstruct(q, eps, [("rec_x", model.dec_x, x), ("rec_w", model.dec_w, w)])
    weights = model.divergence_weights(beta)
    kl = kl_to_std_normal(q)
    kl_x = kl_diag_gaussians(q, model.enc_x(x))
    kl_w = kl_diag_gaussians(q, model.enc_w(w))
    terms.update(kl=kl, kl_x=kl_x, kl_w=kl_w)
    return _finish(rec, [(kl, beta), (kl_x, weights["kl_x"]), (kl_w, weights["kl_w"])], terms)


def elbo_jmvae_h(model: JMVAEhModel, x, w, beta: float, eps) -> Bound:
    _check_beta(beta)
    eps1, eps2 = eps
    q1, q2 = model.encode(x, w)
    stack1 = _as_noise_stack(eps1, q1.mean.shape)
    stack2 = _as_noise_stack(eps2, q2.mean.shape)
    if len(stack1) != len(stack2):
        raise ShapeError("both stochastic layers need the same number of noise samples")
    rec_x, rec_w, kl_z1 = [], [], []
    for e1, e2 in zip(stack1, stack2):
        z1 = rsample(q1, e1)
        z2 = rsample(q2, e2)
        rec_x.append(log_prob(model.dec_x(z1), x))
        rec_w.append(log_prob(model.dec_w(z1), w))
        kl_z1.append(kl_diag_gaussians(q1, model.prior_z1(z2)))
    terms = {"rec_x": _mc_average(rec_x), "rec_w": _mc_average(rec_w)}
    terms["kl_z1"] = _mc_average(kl_z1)
    terms["kl"] = kl_to_std_normal(q2)
    divs = [(terms["kl_z1"], beta), (terms["kl"], beta)]
    return _finish([terms["rec_x"], terms["rec_w"]], divs, terms)


def elbo_cvae(model: CVAEModel, x, w, beta: float, eps) -> Bound:
    _check_beta(beta)
    target, cond = (x, w) if model.target == "x" else (w, x)
    q = model.enc_joint(x, w)
    stack = _as_noise_stack(eps, q.mean.shape)
    recs = []
    for e in stack:
        z = rsample(q, e)
        recs.append(log_prob(model.decode(z, cond), target))
    rec = _mc_average(recs)
    kl = kl_to_std_normal(q)
    terms = {f"rec_{model.target}": rec, "kl": kl}
    return _finish([rec], [(kl, beta)], terms)


def prior(model: Model) -> StdNormal:
    return StdNormal(model.latent_dim)


def require_kind(model: Model, *kinds: str) -> None:
    if model.kind not in kinds:
        raise UnsupportedOperation(f"operation not available for model kind {model.kind!r}")
