"""Training loop: Adam, linear KL warm-up, dynamic binarization, checkpoints.

Config files are flat UTF-8 ``key = value`` lines (``#`` starts a comment).
Checkpoints are little-endian binaries::

    b"JMVL" | u16 version | u32 manifest length | manifest (JSON, UTF-8)
    | tensor payloads (float32, row-major, in manifest order) | sha256 trailer
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import BimodalDataset, ToySpec, binarize, epoch_seed, load_mnist_splits, make_toy
from .errors import ConfigError, FormatError, NumericsError
from .models import DEFAULT_ARCHS, DIVERGENCE_TERMS, Model, ModelSpec, make_model

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"JMVL"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    model: str = "jmvae"
    arch_joint: str = DEFAULT_ARCHS["arch_joint"]
    arch_enc_x: str = DEFAULT_ARCHS["arch_enc_x"]
    arch_enc_w: str = DEFAULT_ARCHS["arch_enc_w"]
    arch_dec_x: str = DEFAULT_ARCHS["arch_dec_x"]
    arch_dec_w: str = DEFAULT_ARCHS["arch_dec_w"]
    arch_prior: str = DEFAULT_ARCHS["arch_prior"]
    arch_top: str = DEFAULT_ARCHS["arch_top"]
    latent_dim: int = 64
    lr: float = 1e-3
    epochs: int = 2000
    warmup_epochs: int = 200
    batch_size: int = 100
    seed: int = 0
    mc_samples: int = 1
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    train_size: int = 50000
    warmup_scope: str = "all"
    kl_coef: float = 1.0
    cvae_direction: str = "x|w"
    toy_clusters: int = 2
    toy_x_dim: int = 1
    toy_items: int = 2000
    toy_seed: int = 0
    # evaluation / generation
    eval_n: int = 10
    eval_t: int = 10
    eval_items: int = 0
    init_mode: str = "zero"
    gen_samples: int = 8
    latent_inputs: str = "w"
    shift_from: int = 3
    shift_to: int = 8
    shift_items: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.warmup_epochs < 1:
            raise ConfigError("warmup_epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1 or self.mc_samples < 1:
            raise ConfigError("batch_size and mc_samples must be >= 1")
        if self.dataset not in ("mnist", "toy"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.eval_n < 1 or self.eval_t < 1:
            raise ConfigError("eval_n and eval_t must be >= 1")
        if self.init_mode not in ("zero", "prior"):
            raise ConfigError(f"init_mode must be 'zero' or 'prior', got {self.init_mode!r}")
        if self.latent_inputs not in ("both", "x", "w"):
            raise ConfigError("latent_inputs must be one of both, x, w")
        self.model_spec(1, 1)  # validates kind, archs and scopes

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_dict().items())

    def archs(self) -> dict[str, str]:
        return {k: getattr(self, k) for k in DEFAULT_ARCHS}

    def model_spec(self, x_dim: int, w_dim: int, x_kind: str = "bernoulli", w_kind: str = "categorical") -> ModelSpec:
        return ModelSpec(
            kind=self.model, x_dim=x_dim, w_dim=w_dim, x_kind=x_kind, w_kind=w_kind,
            latent_dim=self.latent_dim, archs=self.archs(), seed=self.seed,
            kl_coef=self.kl_coef, warmup_scope=self.warmup_scope, cvae_direction=self.cvae_direction,
        )


def _coerce(key: str, raw, typ: str):
    try:
        if typ == "int":
            if isinstance(raw, str):
                return int(raw.strip())
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw)
        if typ == "float":
            return float(raw)
        return str(raw).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {typ}") from None


def parse_config_text(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in TrainConfig.keys():
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = value
    return out


def load_config(path=None, overrides=None, base: dict | None = None) -> TrainConfig:
    """File values, then ``overrides``, then validation."""
    values = dict(base or {})
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"{path}: not UTF-8") from e
        values.update(parse_config_text(text))
    values.update(parse_overrides(overrides))
    return TrainConfig.from_mapping(values)


# ------------------------------------------------------------------ schedule


def warmup_weight(epoch: int, n_t: int) -> float:
    """Linear KL warm-up: ``min(epoch / n_t, 1)`` for 1-based epochs."""
    if epoch < 1:
        raise ValueError("epochs are 1-based")
    if n_t < 1:
        raise ValueError("warm-up length must be >= 1")
    return min(epoch / n_t, 1.0)


# ---------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **kw) -> "AdamState":
        state = cls(**kw)
        for name, p in params.items():
            arr = p.data if isinstance(p, dc.Tensor) else p
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1**t)
    inv_bc2 = 1.0 / (1.0 - b2**t)
    for name, p in params.items():
        arr = p.data if isinstance(p, dc.Tensor) else p
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        arr -= (step_size * m / (np.sqrt(v * inv_bc2) + state.eps)).astype(arr.dtype)
    return params, state


# ---------------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    config: TrainConfig
    model: Model
    adam: AdamState
    epoch: int
    dims: dict

    def manifest(self) -> dict:
        return {
            "format": CHECKPOINT_VERSION,
            "kind": self.model.kind,
            "archs": {k: self.model.spec.archs[k] for k in sorted(self.model.spec.archs)},
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "dims": self.dims,
            "adam": {"step": self.adam.step, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps},
        }


def _tensor_blocks(ckpt: Checkpoint):
    for name, p in ckpt.model.params().items():
        yield "param:" + name, p.data
    for name in ckpt.model.params():
        yield "adam_m:" + name, ckpt.adam.m.get(name, np.zeros_like(ckpt.model.params()[name].data))
        yield "adam_v:" + name, ckpt.adam.v.get(name, np.zeros_like(ckpt.model.params()[name].data))


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    manifest = ckpt.manifest()
    index, payloads, offset = [], [], 0
    for name, arr in _tensor_blocks(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest["tensors"] = index
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(head)) + head + b"".join(payloads)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(ckpt))
    os.replace(tmp, path)
    return path


def parse_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 10 + 32:
        raise FormatError("checkpoint too short", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    body, trailer = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise FormatError("checksum mismatch", len(buf) - 32)
    version, hlen = struct.unpack("<HI", buf[4:10])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if 10 + hlen > len(body):
        raise FormatError("truncated manifest", len(body))
    manifest = json.loads(body[10:10 + hlen].decode("utf-8"))
    payload = body[10 + hlen:]

    config = TrainConfig.from_mapping(manifest["config"])
    dims = manifest["dims"]
    model = make_model(config.model_spec(**dims))
    params = model.params()
    adam_cfg = manifest["adam"]
    adam = AdamState(step=adam_cfg["step"], beta1=adam_cfg["beta1"], beta2=adam_cfg["beta2"], eps=adam_cfg["eps"])
    seen = set()
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise FormatError(f"tensor {entry['name']} runs past the payload", 10 + hlen + start)
        arr = np.frombuffer(payload[start:stop], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        kind, name = entry["name"].split(":", 1)
        if name not in params:
            raise FormatError(f"unknown tensor {name!r}", 10 + hlen + start)
        if arr.shape != params[name].shape:
            raise FormatError(f"shape mismatch for {name!r}", 10 + hlen + start)
        if kind == "param":
            params[name].data = arr
        elif kind == "adam_m":
            adam.m[name] = arr
        elif kind == "adam_v":
            adam.v[name] = arr
        seen.add(entry["name"])
    missing = [n for n in params if "param:" + n not in seen]
    if missing:
        raise FormatError(f"missing parameters {missing[:3]}", len(body))
    return Checkpoint(config, model, adam, manifest["epoch"], dims)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------- data


def load_dataset(config: TrainConfig) -> tuple[BimodalDataset, BimodalDataset]:
    """(train, test) for the configured dataset."""
    if config.dataset == "toy":
        toy = make_toy(ToySpec(config.toy_clusters, config.toy_x_dim, config.toy_items, config.toy_seed))
        return toy.subset("train"), toy.subset("test")
    return load_mnist_splits(config.data_dir, config.train_size)


def dataset_dims(ds: BimodalDataset) -> dict:
    return {"x_dim": ds.x_dim, "w_dim": ds.w_dim, "x_kind": ds.x_kind, "w_kind": ds.w_kind}


# ---------------------------------------------------------------------- loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    wall_times: list[float]


def metric_columns(model: Model) -> list[str]:
    recs = {
        "vae": ["rec_x"],
        "cvae": ["rec_" + model.spec.cvae_direction[0]],
    }.get(model.kind, ["rec_x", "rec_w"])
    divs = {"jmvae_kl": ["kl", "kl_x", "kl_w"], "jmvae_h": ["kl", "kl_z1"]}.get(model.kind, ["kl"])
    return ["epoch", "beta", "loss"] + recs + divs


def _format(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(
    config: TrainConfig,
    dataset: BimodalDataset | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
) -> TrainResult:
    """Fit ``config.model`` on ``dataset`` (the configured training split if None).

    With ``out_dir`` a ``metrics.csv`` is appended per epoch and
    ``model.ckpt`` rewritten after every epoch, so the last good state
    survives a numerics failure.
    """
    if dataset is None:
        dataset = load_dataset(config)[0]
    dims = dataset_dims(dataset)
    if resume is not None:
        # only the horizon and data location may change; anything else would fork the run
        if resume.config.replace(epochs=config.epochs, data_dir=config.data_dir) != config:
            raise ConfigError("resume config differs from the checkpoint beyond epochs/data_dir")
        ckpt = resume
        ckpt.config = config
    else:
        model = make_model(config.model_spec(**dims))
        ckpt = Checkpoint(config, model, AdamState.for_params(model.params()), 0, dims)
    model = ckpt.model
    params = model.params()
    columns = metric_columns(model)
    binary_x = dataset.x_kind == "bernoulli"

    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        if ckpt.epoch == 0:
            csv_path.write_text(",".join(columns) + "\n")

    n = len(dataset)
    metrics, wall = [], []
    for epoch in range(ckpt.epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        beta = warmup_weight(epoch, config.warmup_epochs)
        shuffle_rng, bin_rng, noise_rng = (np.random.default_rng(s) for s in epoch_seed(config.seed, epoch).spawn(3))
        order = shuffle_rng.permutation(n)
        x_epoch = binarize(dataset.x, bin_rng) if binary_x else dataset.x
        sums = {c: 0.0 for c in columns[2:]}
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, wb = x_epoch[idx], dataset.w[idx]
            eps = model.sample_noise(noise_rng, len(idx), config.mc_samples)
            with dc.Tape():
                bound = model.bound(xb, wb, beta, eps)
                grads = dc.backward(bound.loss, params)
            for term in DIVERGENCE_TERMS:
                if term in bound.terms and bound.terms[term].min() < 0:
                    raise NumericsError(f"negative divergence {term} at epoch {epoch}")
            adam_step(params, grads, ckpt.adam, config.lr)
            sums["loss"] += float(bound.loss.data) * len(idx)
            for c in columns[3:]:
                sums[c] += float(bound.terms[c].sum())
        row = {"epoch": epoch, "beta": beta}
        row.update({c: sums[c] / n for c in columns[2:]})
        if not all(np.isfinite(v) for v in row.values()):
            raise NumericsError(f"non-finite epoch metrics at epoch {epoch}")
        ckpt.epoch = epoch
        metrics.append(row)
        wall.append(time.perf_counter() - t0)
        if out_dir is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_format(row[c]) for c in columns])
            save_checkpoint(ckpt, out_dir / "model.ckpt")
        log.info("epoch %d beta %.3f loss %.4f", epoch, beta, row["loss"])
    return TrainResult(ckpt, metrics, wall)
