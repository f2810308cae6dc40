"""Missing-modality complement, conditional log-likelihood, latent diagnostics.

All randomness is drawn from per-item streams seeded by ``(seed, item_id,
stream)``, so results do not depend on how test items are batched.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dists import Bernoulli, Categorical, DiagGaussian, FixedVarGaussian, log_prob
from .errors import ConfigError, InputError, UnsupportedOperation
from .models import CVAEModel, JMVAEhModel, Model

CHAIN_KINDS = ("jmvae", "jmvae_h")

# stream ids
_INIT, _CHAIN, _SAMPLE, _INNER = 0, 1, 2, 3


class ItemStreams:
    """One generator per item; draws are stacked into batch arrays."""

    def __init__(self, seed: int, item_ids, stream: int):
        self.rngs = [np.random.default_rng([int(seed), int(i), stream]) for i in item_ids]

    def normal(self, d: int) -> np.ndarray:
        return np.stack([r.standard_normal(d) for r in self.rngs]).astype(np.float32)

    def uniform(self, d: int) -> np.ndarray:
        return np.stack([r.random(d) for r in self.rngs])


def sample_from(dist, streams: ItemStreams) -> np.ndarray:
    """Draw one value per row of ``dist`` using the item streams."""
    mean = dist.mean.data
    d = mean.shape[-1]
    if isinstance(dist, Bernoulli):
        return (streams.uniform(d) < mean).astype(np.float32)
    if isinstance(dist, Categorical):
        u = streams.uniform(1)
        p = mean.astype(np.float64)
        k = (np.cumsum(p, axis=-1) < u * p.sum(axis=-1, keepdims=True)).sum(axis=-1)
        return np.eye(d, dtype=np.float32)[np.minimum(k, d - 1)]
    if isinstance(dist, FixedVarGaussian):
        return (mean + streams.normal(d)).astype(np.float32)
    if isinstance(dist, DiagGaussian):
        return (mean + np.sqrt(dist.var.data) * streams.normal(d)).astype(np.float32)
    raise TypeError(f"cannot sample {type(dist).__name__}")


def _require(model: Model, kinds, what: str) -> None:
    if model.kind not in kinds:
        raise UnsupportedOperation(f"{what} is not available for model kind {model.kind!r}")


def _decoder(model: Model, modality: str):
    return model.dec_x if modality == "x" else model.dec_w


def _other(modality: str) -> str:
    if modality not in ("x", "w"):
        raise InputError(f"modality must be 'x' or 'w', got {modality!r}")
    return "w" if modality == "x" else "x"


def _pair(missing: str, estimate, observed):
    return (estimate, observed) if missing == "x" else (observed, estimate)


# ----------------------------------------------------------------- complement


@dataclass
class ComplementTrajectory:
    """Chain states; entry 0 is the initialisation (latent ``None``)."""

    missing: str
    steps: list[tuple[int, np.ndarray, np.ndarray | None]]
    final_mean: np.ndarray

    @property
    def T(self) -> int:
        return len(self.steps) - 1

    @property
    def final(self) -> np.ndarray:
        return self.steps[-1][1]


def _chain_latent(model: Model, x, w, streams: ItemStreams):
    """One kernel draw: the latent feeding the decoders, and the one recorded."""
    if isinstance(model, JMVAEhModel):
        _, q2 = model.encode(x, w)
        z2 = sample_from(q2, streams)
        z1 = sample_from(model.prior_z1(z2), streams)
        return z1, z2
    z = sample_from(model.enc_joint(x, w), streams)
    return z, z


def _init_missing(model: Model, missing: str, n: int, mode: str, seed: int, item_ids) -> np.ndarray:
    dim = model.spec.x_dim if missing == "x" else model.spec.w_dim
    if mode == "zero":
        return np.zeros((n, dim), dtype=np.float32)
    if mode != "prior":
        raise ConfigError(f"unknown init mode {mode!r}")
    streams = ItemStreams(seed, item_ids, _INIT)
    z = streams.normal(model.latent_dim)
    if isinstance(model, JMVAEhModel):
        z = sample_from(model.prior_z1(z), streams)
    return sample_from(_decoder(model, missing)(z), streams)


def complement(
    model: Model,
    observed: np.ndarray,
    missing: str,
    T: int,
    init: str = "zero",
    seed: int = 0,
    item_ids=None,
) -> ComplementTrajectory:
    """Fill in the ``missing`` modality by iterating ``z ~ q(z|x,w)``, ``x ~ p(x|z)``."""
    _require(model, CHAIN_KINDS, "iterative complement")
    _other(missing)
    if T < 1:
        raise ConfigError("T must be >= 1")
    observed = np.asarray(observed, dtype=np.float32)
    n = len(observed)
    item_ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    est = _init_missing(model, missing, n, init, seed, item_ids)
    steps = [(0, est, None)]
    streams = ItemStreams(seed, item_ids, _CHAIN)
    dec = _decoder(model, missing)
    for t in range(1, T + 1):
        z_dec, z_rec = _chain_latent(model, *_pair(missing, est, observed), streams)
        dist = dec(z_dec)
        est = sample_from(dist, streams)
        steps.append((t, est, z_rec))
    return ComplementTrajectory(missing, steps, dist.mean.data.copy())


# ---------------------------------------------------------------- estimators


@dataclass
class CllEstimate:
    value: float
    n_samples: int
    stderr: float
    per_item: np.ndarray = field(repr=False)
    per_item_se: np.ndarray = field(repr=False)
    nested: bool = False

    @property
    def note(self) -> str:
        if self.nested:
            return "nested two-level estimate; may be underestimated relative to single-level estimates"
        return ""


def _aggregate(samples: np.ndarray, n: int, nested: bool = False) -> CllEstimate:
    """``samples`` is (items, N) of per-sample log-likelihoods (or inner means)."""
    per_item = samples.mean(axis=1)
    ddof = 1 if samples.shape[1] > 1 else 0
    per_item_se = np.sqrt(samples.var(axis=1, ddof=ddof) / samples.shape[1])
    stderr = float(np.sqrt(np.sum(per_item_se**2)) / len(per_item))
    return CllEstimate(float(per_item.mean()), n, stderr, per_item, per_item_se, nested)


def _ll_under(dec_dist, target) -> np.ndarray:
    return np.asarray(log_prob(dec_dist, target).data, dtype=np.float64)


def loglik_samples(decoder, q: DiagGaussian, target, n_samples: int, seed: int, item_ids) -> np.ndarray:
    """``log p(target | z_l)`` for ``z_l ~ q``; shape (items, n_samples)."""
    streams = ItemStreams(seed, item_ids, _SAMPLE)
    lls = [_ll_under(decoder(sample_from(q, streams)), target) for _ in range(n_samples)]
    return np.stack(lls, axis=1)


def nested_loglik_samples(model: JMVAEhModel, decoder, q2: DiagGaussian, target, n_samples: int, seed: int,
                          item_ids) -> np.ndarray:
    """Inner means over ``z1 ~ p(z1|z2_l)`` for ``z2_l ~ q2``; shape (items, n_samples)."""
    outer, inner = ItemStreams(seed, item_ids, _SAMPLE), ItemStreams(seed, item_ids, _INNER)
    means = []
    for _ in range(n_samples):
        p1 = model.prior_z1(sample_from(q2, outer))
        lls = [_ll_under(decoder(sample_from(p1, inner)), target) for _ in range(n_samples)]
        means.append(np.mean(lls, axis=0))
    return np.stack(means, axis=1)


def _conditioning_latent(model: Model, target_modality: str, target, cond, T, init, seed, item_ids):
    """Posterior over the latent given only the conditioning modality."""
    if model.kind == "jmvae_kl":
        return model.enc_w(cond) if target_modality == "x" else model.enc_x(cond)
    traj = complement(model, cond, target_modality, T, init, seed, item_ids)
    x, w = _pair(target_modality, traj.final, cond)
    if isinstance(model, JMVAEhModel):
        return model.encode(x, w)[1]
    return model.enc_joint(x, w)


def _batched(n: int, batch: int):
    for start in range(0, n, batch):
        yield slice(start, min(n, start + batch))


def cond_loglik(
    model: Model,
    target: np.ndarray,
    conditioning: np.ndarray,
    target_modality: str = "x",
    n_samples: int = 10,
    seed: int = 0,
    T: int = 10,
    init: str = "zero",
    item_ids=None,
    batch: int = 1000,
) -> CllEstimate:
    """Monte Carlo lower-bound estimate of ``log p(target | conditioning)``.

    Averages ``log p(target | z)`` over ``n_samples`` draws of ``z``: from the
    unimodal encoder (JMVAE-kl), from the joint encoder at the end of a
    length-``T`` complement chain (JMVAE), or from the prior (CVAE).
    JMVAE-h is routed to :func:`cond_loglik_hier`.
    """
    if n_samples < 1:
        raise ConfigError("number of samples must be >= 1")
    _other(target_modality)
    if model.kind == "jmvae_h":
        return cond_loglik_hier(model, target, conditioning, target_modality, n_samples, seed, T, init, item_ids, batch)
    _require(model, ("jmvae", "jmvae_kl", "cvae"), "conditional log-likelihood")
    if isinstance(model, CVAEModel) and model.target != target_modality:
        raise UnsupportedOperation(f"this CVAE generates {model.target!r}, not {target_modality!r}")
    target = np.asarray(target, dtype=np.float32)
    conditioning = np.asarray(conditioning, dtype=np.float32)
    n = len(target)
    item_ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    dec = _decoder(model, target_modality) if not isinstance(model, CVAEModel) else None
    rows = []
    for sl in _batched(n, batch):
        ids, tgt, cond = item_ids[sl], target[sl], conditioning[sl]
        if isinstance(model, CVAEModel):
            streams = ItemStreams(seed, ids, _SAMPLE)
            lls = [_ll_under(model.decode(streams.normal(model.latent_dim), cond), tgt) for _ in range(n_samples)]
            rows.append(np.stack(lls, axis=1))
        else:
            q = _conditioning_latent(model, target_modality, tgt, cond, T, init, seed, ids)
            rows.append(loglik_samples(dec, q, tgt, n_samples, seed, ids))
    return _aggregate(np.concatenate(rows), n_samples)


def cond_loglik_hier(
    model: JMVAEhModel,
    target: np.ndarray,
    conditioning: np.ndarray,
    target_modality: str = "x",
    n_samples: int = 10,
    seed: int = 0,
    T: int = 10,
    init: str = "zero",
    item_ids=None,
    batch: int = 1000,
) -> CllEstimate:
    """Two-level estimate: ``z2 ~ q(z2|.)``, ``z1 ~ p(z1|z2)``, mean ``log p(target|z1)``.

    ``n_samples`` draws at each level.  The result is flagged ``nested``: it
    bounds the single-level estimate from below.
    """
    _require(model, ("jmvae_h",), "hierarchical conditional log-likelihood")
    if n_samples < 1:
        raise ConfigError("number of samples must be >= 1")
    target = np.asarray(target, dtype=np.float32)
    conditioning = np.asarray(conditioning, dtype=np.float32)
    n = len(target)
    item_ids = np.arange(n) if item_ids is None else np.asarray(item_ids)
    dec = _decoder(model, target_modality)
    rows = []
    for sl in _batched(n, batch):
        ids, tgt, cond = item_ids[sl], target[sl], conditioning[sl]
        q2 = _conditioning_latent(model, target_modality, tgt, cond, T, init, seed, ids)
        rows.append(nested_loglik_samples(model, dec, q2, tgt, n_samples, seed, ids))
    return _aggregate(np.concatenate(rows), n_samples, nested=True)


# ------------------------------------------------------------------- latents


def extract_latent(
    model: Model,
    x: np.ndarray | None = None,
    w: np.ndarray | None = None,
    T: int = 10,
    seed: int = 0,
    init: str = "zero",
    item_ids=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance given whichever modalities are present.

    Chain-based models complete a missing modality with ``T`` iterations
    first.  JMVAE-h reports the top stochastic layer.
    """
    if x is None and w is None:
        raise InputError("at least one modality must be given")
    if model.kind == "vae":
        if x is None:
            raise InputError("a VAE needs x")
        q = model.encoder(x)
    elif model.kind == "cvae":
        if x is None or w is None:
            raise InputError("a CVAE encoder needs both modalities")
        q = model.enc_joint(x, w)
    elif model.kind == "jmvae_kl" and (x is None or w is None):
        q = model.enc_x(x) if w is None else model.enc_w(w)
    else:
        if x is None or w is None:
            missing = "x" if x is None else "w"
            observed = w if x is None else x
            traj = complement(model, observed, missing, T, init, seed, item_ids)
            x, w = _pair(missing, traj.final, observed)
        q = model.encode(x, w)[1] if isinstance(model, JMVAEhModel) else model.enc_joint(x, w)
    return q.mean.data.copy(), q.var.data.copy()


def collapse_score(means: np.ndarray, labels: np.ndarray) -> float:
    """Between-class share of total scatter, in [0, 1]; 0 means fully collapsed."""
    means = np.asarray(means, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise InputError("need at least 2 classes with at least 2 points each")
    centre = means.mean(axis=0)
    total = float(np.sum((means - centre) ** 2))
    if total <= 0.0:
        return 0.0
    between = sum(
        c * float(np.sum((means[labels == k].mean(axis=0) - centre) ** 2)) for k, c in zip(classes, counts)
    )
    return float(min(max(between / total, 0.0), 1.0))


# ------------------------------------------------------------ modality shift


def predict_w(model: Model, x: np.ndarray) -> np.ndarray:
    """Mean of ``p(w|z)`` at the mean of ``q(z|x)`` (JMVAE-kl)."""
    _require(model, ("jmvae_kl",), "label prediction from x alone")
    return model.dec_w(model.enc_x(x).mean).mean.data


def relabel(src: int, dst: int) -> Callable[[np.ndarray], np.ndarray]:
    """Edit that turns one-hot label ``src`` into ``dst`` and leaves others alone."""

    def edit(w: np.ndarray) -> np.ndarray:
        out = w.copy()
        rows = out[:, src] == 1
        out[rows, src] = 0
        out[rows, dst] = 1
        return out

    return edit


def modality_shift(
    model: Model,
    x: np.ndarray,
    edit: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray | None = None,
    clamp: bool = True,
) -> np.ndarray:
    """Return ``x + x'_mean - x_mean`` where the means are decoded from ``q(z|w)``.

    ``w`` defaults to the one-hot argmax of ``p(w|z)`` inferred from ``x``.
    """
    _require(model, ("jmvae_kl",), "modality shift")
    x = np.asarray(x, dtype=np.float32)
    if w is None:
        probs = predict_w(model, x)
        w = np.eye(probs.shape[-1], dtype=np.float32)[probs.argmax(axis=-1)]
    w_new = np.asarray(edit(np.asarray(w, dtype=np.float32)), dtype=np.float32)
    x_mean = model.dec_x(model.enc_w(w).mean).mean.data
    x_new_mean = model.dec_x(model.enc_w(w_new).mean).mean.data
    out = x + (x_new_mean - x_mean)
    if clamp and model.spec.x_kind == "bernoulli":
        out = np.clip(out, 0.0, 1.0)
    return out


# ---------------------------------------------------------------- generation


def generate(
    model: Model,
    classes: int,
    per_class: int,
    T: int = 10,
    seed: int = 0,
    init: str = "zero",
) -> np.ndarray:
    """Mean images for ``per_class`` draws of each one-hot label, row-major by class.

    JMVAE-kl decodes ``z ~ q(z|w)``; chain models report the final decoder
    mean of a length-``T`` complement; a CVAE decodes prior draws.  A plain
    VAE ignores the label and decodes prior draws.
    """
    ids = np.arange(classes * per_class)
    w = np.repeat(np.eye(classes, dtype=np.float32), per_class, axis=0)
    streams = ItemStreams(seed, ids, _SAMPLE)
    if model.kind in CHAIN_KINDS:
        return complement(model, w, "x", T, init, seed, ids).final_mean
    if model.kind == "jmvae_kl":
        return model.dec_x(sample_from(model.enc_w(w), streams)).mean.data
    z = streams.normal(model.latent_dim)
    if isinstance(model, CVAEModel):
        if model.target != "x":
            raise UnsupportedOperation("this CVAE generates labels, not images")
        return model.decode(z, w).mean.data
    return model.decoder(z).mean.data
