import numpy as np
import pytest

from jmvae import diffcore as dc
from jmvae.errors import ConfigError, FormatError, NumericsError, ParseError
from jmvae.models import MODEL_KINDS
from jmvae.train import (
    AdamState,
    TrainConfig,
    adam_step,
    checkpoint_bytes,
    load_checkpoint,
    load_config,
    load_dataset,
    parse_checkpoint,
    parse_config_text,
    save_checkpoint,
    train,
    warmup_weight,
)

TOY_ARCHS = {
    "arch_joint": "(D16R, D16R)",
    "arch_enc_x": "D16R",
    "arch_enc_w": "D16R",
    "arch_dec_x": "D16R",
    "arch_dec_w": "D16R",
    "arch_prior": "D16R",
    "arch_top": "D4-D16R",
}


def toy_config(model="jmvae", **kw):
    base = dict(model=model, dataset="toy", latent_dim=2, epochs=5, warmup_epochs=2, batch_size=50,
                toy_items=600, seed=3, **TOY_ARCHS)
    base.update(kw)
    return TrainConfig(**base)


# ----------------------------------------------------------------- warm-up


def test_warmup_values():
    assert warmup_weight(1, 200) == 0.005
    assert warmup_weight(200, 200) == 1.0
    assert warmup_weight(2000, 200) == 1.0


def test_warmup_monotone_and_saturated():
    for n_t in (1, 3, 10):
        ws = [warmup_weight(e, n_t) for e in range(1, 40)]
        assert all(a <= b for a, b in zip(ws, ws[1:]))
        assert all(w == 1.0 for w in ws[n_t - 1:])
    with pytest.raises(ValueError):
        warmup_weight(0, 10)


# -------------------------------------------------------------------- Adam


def test_adam_zero_gradient():
    p = {"a": np.array([1.0, -2.0])}
    st = AdamState.for_params(p)
    st.m["a"][:] = 0.5
    st.v["a"][:] = 0.25
    adam_step(p, {"a": np.zeros(2)}, st, 1e-3)
    # m and v shrink by beta1/beta2; the update direction stays m-driven
    np.testing.assert_allclose(st.m["a"], 0.45)
    np.testing.assert_allclose(st.v["a"], 0.24975)
    p2 = {"a": np.array([1.0, -2.0])}
    st2 = AdamState.for_params(p2)
    adam_step(p2, {"a": np.zeros(2)}, st2, 1e-3)
    np.testing.assert_array_equal(p2["a"], [1.0, -2.0])
    assert st2.step == 1


@pytest.mark.parametrize("g", [3.0, -0.01, 250.0])
def test_adam_first_step_is_lr(g):
    p = {"a": np.array([0.0])}
    st = AdamState.for_params(p)
    adam_step(p, {"a": np.array([g])}, st, 1e-3)
    # m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
    expected = -1e-3 * g / (abs(g) + 1e-8)
    assert p["a"][0] == pytest.approx(expected, rel=1e-12)
    assert np.sign(p["a"][0]) == -np.sign(g)


def test_adam_non_finite_gradient_names_parameter():
    p = {"enc/mu.W": np.zeros(2)}
    with pytest.raises(NumericsError, match="enc/mu.W"):
        adam_step(p, {"enc/mu.W": np.array([0.0, np.nan])}, AdamState.for_params(p), 1e-3)


def test_adam_updates_tensors_in_place():
    t = dc.parameter(np.ones(3, np.float32))
    adam_step({"t": t}, {"t": np.ones(3, np.float32)}, AdamState.for_params({"t": t}), 0.1)
    assert t.data.dtype == np.float32 and np.allclose(t.data, 0.9)


# ------------------------------------------------------------------ config


def test_config_text_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\nmodel = jmvae_kl\nlatent_dim = 8  # inline\nlr=0.01\n")
    cfg = load_config(path, ["epochs=3", "arch_dec_x = D32R - D32R"])
    assert (cfg.model, cfg.latent_dim, cfg.lr, cfg.epochs) == ("jmvae_kl", 8, 0.01, 3)
    assert cfg.arch_dec_x == "D32R - D32R"
    assert cfg.model_spec(4, 2).archs["arch_dec_x"] == "D32R-D32R"
    assert load_config(None, None, cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("bogus = 1\n", []),
        ("model = jmvae\nmodel = vae\n", []),
        ("just words\n", []),
        ("", ["nope=1"]),
        ("", ["epochs"]),
        ("", ["epochs=0"]),
        ("", ["epochs=two"]),
        ("", ["lr=0"]),
        ("", ["warmup_epochs=0"]),
        ("", ["model=gan"]),
        ("", ["arch_joint=D5Q"]),
    ],
)
def test_config_errors(tmp_path, text, overrides):
    path = tmp_path / "c.cfg"
    path.write_text(text)
    with pytest.raises(ParseError if "D5Q" in str(overrides) else ConfigError):
        load_config(path, overrides)


def test_config_round_trip_through_text():
    cfg = toy_config(lr=3e-4)
    assert load_config(None, None, parse_config_text(cfg.to_text())) == cfg


# -------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip_bytes_and_outputs(tmp_path):
    res = train(toy_config("jmvae_h", epochs=2))
    ckpt = res.checkpoint
    path = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    loaded = load_checkpoint(path)
    assert checkpoint_bytes(loaded) == path.read_bytes()
    assert loaded.epoch == 2 and loaded.adam.step == ckpt.adam.step
    probe_x = np.linspace(-2, 2, 8, dtype=np.float32)[:, None]
    probe_w = np.eye(2, dtype=np.float32)[np.arange(8) % 2]
    a = ckpt.model.encode(probe_x, probe_w)[1].mean.data
    b = loaded.model.encode(probe_x, probe_w)[1].mean.data
    assert a.tobytes() == b.tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    buf = checkpoint_bytes(train(toy_config(epochs=1)).checkpoint)
    with pytest.raises(FormatError) as e:
        parse_checkpoint(b"XXXX" + buf[4:])
    assert e.value.offset == 0
    flipped = bytearray(buf)
    flipped[len(buf) // 2] ^= 1
    with pytest.raises(FormatError, match="checksum"):
        parse_checkpoint(bytes(flipped))
    with pytest.raises(FormatError):
        parse_checkpoint(buf[:20])


# ------------------------------------------------------------------- train


def test_training_is_deterministic(tmp_path):
    cfg = toy_config("jmvae_kl")
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    for name in ("model.ckpt", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = toy_config("jmvae")
    straight = train(cfg, out_dir=tmp_path / "a")
    part = train(cfg.replace(epochs=2), out_dir=tmp_path / "b")
    resumed = train(cfg, out_dir=tmp_path / "b", resume=part.checkpoint)
    assert checkpoint_bytes(resumed.checkpoint) == checkpoint_bytes(straight.checkpoint)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_metrics_csv_layout(tmp_path):
    train(toy_config("jmvae_kl", epochs=3), out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,beta,loss,rec_x,rec_w,kl,kl_x,kl_w"
    assert len(lines) == 4
    rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    np.testing.assert_array_equal(rows[:, 1], [0.5, 1.0, 1.0])
    assert np.all(rows[:, 5:] >= 0)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_loss_decreases_over_20_epochs(kind):
    res = train(toy_config(kind, epochs=20, toy_items=1000, warmup_epochs=1))
    losses = [m["loss"] for m in res.metrics]
    assert losses[-1] < losses[0]
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 3


def test_jmvae_kl_extra_divergence_shrinks():
    from jmvae.dists import kl_diag_gaussians

    cfg = toy_config("jmvae_kl", epochs=20, toy_items=1000)
    test = load_dataset(cfg)[1]
    init = train(cfg.replace(epochs=1)).checkpoint.model  # nearly untrained reference
    trained = train(cfg).checkpoint.model

    def kl_w(m):
        return float(np.mean(kl_diag_gaussians(m.enc_joint(test.x, test.w), m.enc_w(test.w)).data))

    from jmvae.models import make_model
    fresh = make_model(cfg.model_spec(1, 2, "fixed_gaussian"))
    assert kl_w(trained) < kl_w(fresh)
    assert kl_w(trained) < kl_w(init)


def test_numerics_error_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    import jmvae.train as tr

    cfg = toy_config(epochs=3)
    real = tr.adam_step
    calls = {"n": 0}
    per_epoch = -(-480 // cfg.batch_size)

    def flaky(params, grads, state, lr):
        calls["n"] += 1
        if calls["n"] > 2 * per_epoch:
            grads = {k: np.full_like(g, np.nan) for k, g in grads.items()}
        return real(params, grads, state, lr)

    monkeypatch.setattr(tr, "adam_step", flaky)
    with pytest.raises(NumericsError):
        train(cfg, out_dir=tmp_path)
    assert load_checkpoint(tmp_path / "model.ckpt").epoch == 2
    assert len((tmp_path / "metrics.csv").read_text().splitlines()) == 3


def test_resume_rejects_changed_hyperparameters():
    part = train(toy_config(epochs=1))
    with pytest.raises(ConfigError):
        train(toy_config(lr=0.01), resume=part.checkpoint)
