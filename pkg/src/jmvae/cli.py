"""``jmvae`` command line: train, eval, generate, complement, latent, shift, selftest.

Exit codes: 0 success, 1 configuration error, 2 numerics error (including a
failed self-test), 3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, infer
from .data import binarize
from .errors import FormatError, JMVAEError, NumericsError
from .pgm import pgm_bytes, tile
from .train import TrainConfig, load_checkpoint, load_config, load_dataset, train

log = logging.getLogger("jmvae")

VERBS = ("train", "eval", "generate", "complement", "latent", "shift", "selftest")
NEEDS_CHECKPOINT = ("eval", "generate", "complement", "latent", "shift")
EVAL_BINARIZE_SEED = 123
CORRUPT_ENV = "JMVAE_CORRUPT_BACKWARD"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jmvae", description=__doc__.splitlines()[0])
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[], dest="overrides",
                   help="override a config key (repeatable)")
    p.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=INT")
    p.add_argument("--checkpoint", metavar="PATH", help="trained model (eval/generate/complement/latent/shift)")
    return p


class Run:
    """Collects artifacts so the manifest can list their digests."""

    def __init__(self, verb: str, out: Path, config: TrainConfig):
        self.verb, self.out, self.config = verb, out, config
        self.artifacts: dict[str, str] = {}
        self.extra: dict = {}
        self.started = _dt.datetime.now(_dt.timezone.utc)
        self.t0 = time.perf_counter()

    def write(self, name: str, data: bytes) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        self.artifacts[name] = hashlib.sha256(data).hexdigest()
        return path

    def record(self, name: str) -> None:
        self.artifacts[name] = hashlib.sha256((self.out / name).read_bytes()).hexdigest()

    def finish(self) -> None:
        self.write("config.txt", self.config.to_text().encode())
        manifest = {
            "verb": self.verb,
            "code_version": __version__,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "started": self.started.isoformat(),
            "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "wall_seconds": time.perf_counter() - self.t0,
            "artifacts": dict(sorted(self.artifacts.items())),
            **self.extra,
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _is_image(x_dim: int) -> bool:
    return x_dim == 28 * 28


def _test_items(config: TrainConfig, ckpt):
    """Test split (binarised with a fixed seed for Bernoulli images)."""
    test = load_dataset(config)[1]
    if config.eval_items:
        test = test.take(config.eval_items)
    x = binarize(test.x, EVAL_BINARIZE_SEED) if test.x_kind == "bernoulli" else test.x
    return test, x.astype(np.float32), test.w.astype(np.float32)


# ---------------------------------------------------------------------- verbs


def cmd_train(run: Run, args) -> None:
    resume = load_checkpoint(args.checkpoint) if args.checkpoint else None
    result = train(run.config, out_dir=run.out, resume=resume)
    run.record("metrics.csv")
    run.record("model.ckpt")
    run.extra["epoch_wall_seconds"] = result.wall_times


def _directions(model) -> list[str]:
    if model.kind == "cvae":
        return [model.target]
    if model.kind == "vae":
        raise JMVAEError("a VAE has no conditional direction to evaluate")
    return ["x", "w"]


def cmd_eval(run: Run, ckpt) -> None:
    cfg, model = run.config, ckpt.model
    _, x, w = _test_items(cfg, ckpt)
    rows = []
    for target in _directions(model):
        tgt, cond = (x, w) if target == "x" else (w, x)
        est = infer.cond_loglik(model, tgt, cond, target, cfg.eval_n, cfg.seed, cfg.eval_t, cfg.init_mode)
        T = cfg.eval_t if model.kind in infer.CHAIN_KINDS else 0
        direction = "w->x" if target == "x" else "x->w"
        rows.append([model.kind, direction, cfg.eval_n, T, _fmt(est.value), _fmt(est.stderr), len(tgt),
                     int(est.nested)])
        print(f"{model.kind} {direction}: {est.value:.4f} (se {est.stderr:.4f}, N={cfg.eval_n}, T={T})")
    run.write("eval.csv", csv_bytes(["model", "direction", "N", "T", "estimate", "stderr", "items", "nested"], rows))


def _images_or_csv(run: Run, name: str, images: np.ndarray, rows: int, cols: int) -> None:
    if _is_image(images.shape[-1]):
        run.write(name + ".pgm", pgm_bytes(tile(images, rows, cols)))
    else:
        header = ["row", "col"] + [f"x{i}" for i in range(images.shape[-1])]
        data = [[i // cols, i % cols] + [_fmt(v) for v in img] for i, img in enumerate(images)]
        run.write(name + ".csv", csv_bytes(header, data))


def cmd_generate(run: Run, ckpt) -> None:
    cfg = run.config
    classes = ckpt.dims["w_dim"]
    images = infer.generate(ckpt.model, classes, cfg.gen_samples, cfg.eval_t, cfg.seed, cfg.init_mode)
    _images_or_csv(run, "samples", images, classes, cfg.gen_samples)


def cmd_complement(run: Run, ckpt) -> None:
    cfg = run.config
    classes = ckpt.dims["w_dim"]
    w = np.repeat(np.eye(classes, dtype=np.float32), cfg.gen_samples, axis=0)
    traj = infer.complement(ckpt.model, w, "x", cfg.eval_t, cfg.init_mode, cfg.seed)
    for t, x_t, _ in traj.steps:
        _images_or_csv(run, f"frame_{t:03d}", x_t, classes, cfg.gen_samples)
    _images_or_csv(run, "final_mean", traj.final_mean, classes, cfg.gen_samples)


def cmd_latent(run: Run, ckpt) -> None:
    cfg = run.config
    test, x, w = _test_items(cfg, ckpt)
    has_x, has_w = cfg.latent_inputs in ("both", "x"), cfg.latent_inputs in ("both", "w")
    mu, var = infer.extract_latent(ckpt.model, x if has_x else None, w if has_w else None,
                                   cfg.eval_t, cfg.seed, cfg.init_mode)
    d = mu.shape[1]
    header = ["item", "class"] + [f"mu{i}" for i in range(d)] + [f"var{i}" for i in range(d)] + ["has_x", "has_w"]
    rows = [[i, int(test.labels[i])] + [_fmt(v) for v in mu[i]] + [_fmt(v) for v in var[i]] + [int(has_x), int(has_w)]
            for i in range(len(mu))]
    run.write("latent.csv", csv_bytes(header, rows))
    score = infer.collapse_score(mu, test.labels)
    print(f"collapse score ({cfg.latent_inputs} given): {score:.4f}")


def cmd_shift(run: Run, ckpt) -> None:
    cfg, model = run.config, ckpt.model
    test = load_dataset(cfg)[1]
    ids = np.flatnonzero(test.labels == cfg.shift_from)[: cfg.shift_items]
    if len(ids) == 0:
        raise JMVAEError(f"no test items with class {cfg.shift_from}")
    x = test.x[ids].astype(np.float32)
    edited = infer.modality_shift(model, x, infer.relabel(cfg.shift_from, cfg.shift_to))
    before = infer.predict_w(model, x).argmax(axis=1)
    after = infer.predict_w(model, edited).argmax(axis=1)
    _images_or_csv(run, "shift", np.concatenate([x, edited]), 2, len(ids))
    rows = [[int(i), cfg.shift_from, cfg.shift_to, int(b), int(a)] for i, b, a in zip(ids, before, after)]
    run.write("shift.csv", csv_bytes(["item", "from", "to", "pred_before", "pred_after"], rows))
    print(f"shift {cfg.shift_from}->{cfg.shift_to}: {np.mean(after == cfg.shift_to):.3f} re-encoded as {cfg.shift_to}")


def cmd_selftest(run: Run) -> bool:
    from . import diffcore
    from .selftest import run_selftest

    corrupt = os.environ.get(CORRUPT_ENV)  # an op name, or any other value for matmul
    if corrupt and corrupt not in diffcore.BACKWARD:
        corrupt = "matmul"
    ctx = diffcore.corrupted_backward(corrupt) if corrupt else None
    if ctx is not None:
        ctx.__enter__()
    try:
        results = run_selftest(run.config.seed)
    finally:
        if ctx is not None:
            ctx.__exit__(None, None, None)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    run.write("selftest.txt", ("\n".join(lines) + "\n").encode())
    return all(r.passed for r in results)


# ----------------------------------------------------------------------- main


def _resolve_config(args) -> tuple[TrainConfig, object]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    ckpt = None
    base = None
    if args.checkpoint and args.verb in NEEDS_CHECKPOINT + ("train",):
        ckpt = load_checkpoint(args.checkpoint)
        base = ckpt.config.to_dict()
    elif args.verb in NEEDS_CHECKPOINT:
        raise JMVAEError(f"{args.verb} needs --checkpoint")
    return load_config(args.config, overrides, base), ckpt


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        config, ckpt = _resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        run = Run(args.verb, out, config)
        status = 0
        if args.verb == "train":
            cmd_train(run, args)
        elif args.verb == "selftest":
            status = 0 if cmd_selftest(run) else 2
        else:
            {"eval": cmd_eval, "generate": cmd_generate, "complement": cmd_complement,
             "latent": cmd_latent, "shift": cmd_shift}[args.verb](run, ckpt)
        run.finish()
        return status
    except NumericsError as e:
        print(f"jmvae: numerics error: {e}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as e:
        print(f"jmvae: I/O error: {e}", file=sys.stderr)
        return 3
    except JMVAEError as e:
        print(f"jmvae: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
