import json
import os
import subprocess
import sys
import tempfile

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from desk_runs import DATA_DIR, have_mnist
from jmvae.cli import main
from jmvae.errors import FormatError
from jmvae.pgm import pgm_bytes, read_pgm, tile, to_gray8, write_pgm

TOY = ["--set", "dataset=toy", "--set", "epochs=2", "--set", "latent_dim=2", "--set", "toy_items=300",
       "--set", "batch_size=50", "--set", "eval_items=40", "--set", "eval_t=3", "--set", "eval_n=4"]
SMALL = ["--set", "arch_joint=(D16R, D16R)", "--set", "arch_enc_x=D16R", "--set", "arch_enc_w=D16R",
         "--set", "arch_dec_x=D16R", "--set", "arch_dec_w=D16R", "--set", "arch_prior=D16R",
         "--set", "arch_top=D4-D16R"]

needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found in {DATA_DIR}")


# ---------------------------------------------------------------------- pgm


def test_pgm_header_and_payload():
    buf = pgm_bytes(np.array([[0.0, 1.0, 0.5]]))
    assert buf == b"P5\n3 1\n255\n" + bytes([0, 255, 128])


@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip(img):
    assert read_pgm_bytes(pgm_bytes(img)).tobytes() == img.tobytes()


def read_pgm_bytes(buf):
    with tempfile.NamedTemporaryFile(suffix=".pgm") as fh:
        fh.write(buf)
        fh.flush()
        return read_pgm(fh.name)


def test_pgm_comments_and_errors(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[1, 2]]
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "p2.pgm")
    write_pgm(tmp_path / "t.pgm", np.zeros((3, 3)))
    (tmp_path / "t.pgm").write_bytes((tmp_path / "t.pgm").read_bytes()[:-2])
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "t.pgm")


def test_gray8_clips_and_rounds():
    np.testing.assert_array_equal(to_gray8([-1.0, 0.0, 0.5, 1.0, 2.0]), [0, 0, 128, 255, 255])


def test_tile_layout():
    imgs = np.arange(6)[:, None] * np.ones((6, 4))
    grid = tile(imgs, 2, 3, side=2, pad=1)
    assert grid.shape == (7, 10)
    assert grid[1, 1] == 0 and grid[1, 4] == 1 and grid[4, 7] == 5
    assert np.all(grid[0] == 0) and np.all(grid[:, 3] == 0)


# ---------------------------------------------------------------------- cli


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert main(["train", "--out", str(out), "--seed", "4", "--set", "model=jmvae_kl", *TOY, *SMALL]) == 0
    return out


def test_train_writes_artifacts_and_manifest(toy_run):
    for name in ("model.ckpt", "metrics.csv", "config.txt", "manifest.json"):
        assert (toy_run / name).exists()
    man = json.loads((toy_run / "manifest.json").read_text())
    assert man["verb"] == "train" and man["seed"] == 4 and man["config"]["model"] == "jmvae_kl"
    assert len(man["epoch_wall_seconds"]) == 2
    assert set(man["artifacts"]) >= {"model.ckpt", "metrics.csv", "config.txt"}


def test_config_echo_reproduces_run(toy_run, tmp_path):
    assert main(["train", "--out", str(tmp_path), "--config", str(toy_run / "config.txt")]) == 0
    for name in ("model.ckpt", "metrics.csv"):
        assert (tmp_path / name).read_bytes() == (toy_run / name).read_bytes()


def test_eval_csv_and_rerun_identical(toy_run, tmp_path):
    args = ["eval", "--checkpoint", str(toy_run / "model.ckpt")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "eval.csv").read_text()
    assert a == (tmp_path / "b" / "eval.csv").read_text()
    lines = a.splitlines()
    assert lines[0] == "model,direction,N,T,estimate,stderr,items,nested"
    assert [ln.split(",")[:4] for ln in lines[1:]] == [["jmvae_kl", "w->x", "4", "0"], ["jmvae_kl", "x->w", "4", "0"]]
    assert all(int(ln.split(",")[6]) == 40 for ln in lines[1:])


@pytest.mark.parametrize("verb, artifact", [("generate", "samples.csv"), ("latent", "latent.csv"),
                                            ("shift", "shift.csv")])
def test_other_verbs_on_toy(toy_run, tmp_path, verb, artifact):
    args = [verb, "--checkpoint", str(toy_run / "model.ckpt"), "--set", "shift_from=0", "--set", "shift_to=1"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_complement_frames_on_chain_model(tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "model=jmvae", *TOY, *SMALL]) == 0
    assert main(["complement", "--checkpoint", str(tmp_path / "model.ckpt"), "--out", str(tmp_path / "c")]) == 0
    names = sorted(p.name for p in (tmp_path / "c").glob("frame_*"))
    assert names == [f"frame_{t:03d}.csv" for t in range(4)]
    assert (tmp_path / "c" / "final_mean.csv").exists()


def test_exit_codes(toy_run, tmp_path):
    assert main(["train", "--out", str(tmp_path), "--set", "epochs=0"]) == 1
    assert main(["eval", "--out", str(tmp_path)]) == 1
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "missing.ckpt")]) == 3
    bad = tmp_path / "bad.ckpt"
    buf = bytearray((toy_run / "model.ckpt").read_bytes())
    buf[-40] ^= 0xFF
    bad.write_bytes(bytes(buf))
    assert main(["eval", "--out", str(tmp_path), "--checkpoint", str(bad)]) == 3
    assert main(["train", "--out", str(tmp_path), "--set", "model=jmvae", "--set", "lr=1e30", *TOY, *SMALL]) == 2


def test_selftest_passes_and_detects_corruption(tmp_path):
    env_ok = subprocess.run([sys.executable, "-m", "jmvae", "selftest", "--out", str(tmp_path / "ok")],
                            capture_output=True, text=True)
    assert env_ok.returncode == 0, env_ok.stdout + env_ok.stderr
    assert "FAIL" not in env_ok.stdout and "PASS gradient matmul" in env_ok.stdout
    env = dict(os.environ, JMVAE_CORRUPT_BACKWARD="softplus")
    bad = subprocess.run([sys.executable, "-m", "jmvae", "selftest", "--out", str(tmp_path / "bad")],
                         capture_output=True, text=True, env=env)
    assert bad.returncode == 2
    assert "FAIL gradient softplus" in bad.stdout
    assert (tmp_path / "bad" / "selftest.txt").exists()


@needs_mnist
def test_generate_mnist_grid(tmp_path):
    train = ["train", "--out", str(tmp_path), "--set", "dataset=mnist", "--set", f"data_dir={DATA_DIR}",
             "--set", "train_size=300", "--set", "epochs=1", "--set", "latent_dim=2", *SMALL]
    assert main(train) == 0
    gen = ["generate", "--checkpoint", str(tmp_path / "model.ckpt"), "--set", "gen_samples=8"]
    assert main([*gen, "--out", str(tmp_path / "a")]) == 0
    assert main([*gen, "--out", str(tmp_path / "b")]) == 0
    buf = (tmp_path / "a" / "samples.pgm").read_bytes()
    assert buf == (tmp_path / "b" / "samples.pgm").read_bytes()
    h, w = 10 * 29 + 1, 8 * 29 + 1
    assert buf.startswith(f"P5\n{w} {h}\n255\n".encode())
    assert read_pgm(tmp_path / "a" / "samples.pgm").shape == (h, w)
