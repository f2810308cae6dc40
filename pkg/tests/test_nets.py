import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jmvae import diffcore as dc
from jmvae.dists import Categorical, DiagGaussian
from jmvae.errors import ParseError, ShapeError, UnsupportedLayer
from jmvae.nets import Layer, build, canonical_arch, parse_arch


def test_parse_chain():
    spec = parse_arch("D512R-D512R")
    assert spec.branches is None
    assert spec.layers == (Layer(512, True), Layer(512, True))


def test_parse_two_branch_group():
    spec = parse_arch("(D512R-D512R, D512R-D512R)")
    assert spec.layers == ()
    assert [len(b) for b in spec.branches] == [2, 2]
    net = build(spec, (784, 10), "gaussian", 64, seed=0)
    assert net.feature_dim == 1024


def test_parse_linear_atom():
    assert parse_arch("D64").layers == (Layer(64, False),)


def test_group_then_chain_and_batchnorm_token():
    spec = parse_arch("(D8R, D4BR)-D16R-D2")
    assert spec.branches[1] == (Layer(4, True, True),)
    assert [a.units for a in spec.layers] == [16, 2]
    with pytest.raises(UnsupportedLayer):
        build(spec, (3, 3), "gaussian", 2, seed=0)


@pytest.mark.parametrize(
    "text, canon",
    [
        ("D512R-D512R", "D512R-D512R"),
        (" ( D8R -D8R ,D4 ) - D2R ", "(D8R-D8R, D4)-D2R"),
        ("d3r", None),
    ],
)
def test_render_canonical(text, canon):
    if canon is None:
        with pytest.raises(ParseError):
            parse_arch(text)
    else:
        assert canonical_arch(text) == canon
        assert canonical_arch(canon) == canon


@pytest.mark.parametrize(
    "text, pos",
    [
        ("", 0),
        ("D", 1),
        ("D0", 1),
        ("D5-", 3),
        ("D5X", 2),
        ("((D5, D5), D5)", 1),
        ("(D5, )", 5),
        ("(, D5)", 1),
        ("(D5)", 3),
        ("D5-(D5, D5)", 3),
        ("(D5, D5", 7),
    ],
)
def test_parse_errors_carry_position(text, pos):
    with pytest.raises(ParseError) as e:
        parse_arch(text)
    assert e.value.position == pos


ALPHABET = "D0123456789RB(),- xQ"


def test_parser_fuzz_10k():
    rng = np.random.default_rng(0)
    ok = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 16))
        text = "".join(rng.choice(list(ALPHABET), size=n))
        try:
            spec = parse_arch(text)
        except ParseError as e:
            assert 0 <= e.position <= len(text)
            continue
        ok += 1
        assert canonical_arch(spec.render()) == spec.render()
    assert ok > 0


atom = st.builds(lambda k, b, r: f"D{k}{'B' if b else ''}{'R' if r else ''}",
                 st.integers(1, 999), st.booleans(), st.booleans())
chain = st.lists(atom, min_size=1, max_size=4).map("-".join)


@given(st.one_of(chain, st.tuples(chain, chain, st.none() | chain).map(
    lambda t: f"({t[0]}, {t[1]})" + (f"-{t[2]}" if t[2] else ""))))
def test_round_trip_on_grammar(text):
    assert parse_arch(text).render() == text


# --------------------------------------------------------------------- build


def test_mnist_encoder_and_label_decoder_shapes():
    q = build("(D512R-D512R, D512R-D512R)", (784, 10), "gaussian", 64, seed=0)
    dist = q(np.zeros((3, 784), np.float32), np.zeros((3, 10), np.float32))
    assert isinstance(dist, DiagGaussian) and dist.mean.shape == dist.var.shape == (3, 64)
    assert np.all(dist.var.data > 0)
    p = build("D512R-D512R", 64, "categorical", 10, seed=0)
    out = p(np.zeros((2, 64), np.float32))
    assert isinstance(out, Categorical)
    np.testing.assert_allclose(out.mean.data.sum(1), 1.0, atol=1e-6)


def test_degenerate_net_depends_only_on_biases():
    net = build("D1", 1, "gaussian", 1, seed=3)
    assert net.params["t0.W"].shape == (1, 1)
    for k in ("t0.b", "mu.b", "var.b"):
        assert net.params[k].data.tolist() == [0.0]
    net.params["mu.b"].data[:] = 0.25
    assert net(np.zeros((1, 1), np.float32)).mean.data[0, 0] == 0.25
    net.params["mu.W"].data[:] = 7.0  # weights see only zeros
    assert net(np.zeros((1, 1), np.float32)).mean.data[0, 0] == 0.25


@pytest.mark.parametrize("batch", [1, 7, 64])
@pytest.mark.parametrize("head, dim", [("gaussian", 5), ("bernoulli", 9), ("categorical", 4), ("fixed_gaussian", 2)])
def test_output_shapes(batch, head, dim):
    net = build("(D6R, D3)-D4R", (5, 2), head, dim, seed=1)
    out = net(np.ones((batch, 5), np.float32), np.ones((batch, 2), np.float32))
    assert out.mean.shape == (batch, dim)


def test_same_seed_identical_different_seed_differs():
    a, b, c = (build("D8R-D8R", 4, "gaussian", 2, seed=s) for s in (5, 5, 6))
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params if k.endswith("W"))


def test_glorot_bounds():
    net = build("D300R", 500, "bernoulli", 200, seed=0)
    limit = np.sqrt(6 / (500 + 300))
    W = net.params["t0.W"].data
    assert np.abs(W).max() <= limit and np.abs(W).max() > 0.9 * limit


def test_build_errors():
    with pytest.raises(ShapeError):
        build("(D4, D4)", 3, "gaussian", 2, seed=0)
    net = build("D4", 3, "gaussian", 2, seed=0)
    with pytest.raises(ShapeError):
        net(np.zeros((2, 5), np.float32))


def test_features_expose_last_hidden_layer():
    net = build("D6R-D5R", 3, "gaussian", 2, seed=0)
    dist, h = net.forward_with_features(np.ones((4, 3), np.float32))
    assert h.shape == (4, 5) and np.all(h.data >= 0)
    np.testing.assert_array_equal(net.head_from(h).mean.data, dist.mean.data)


def test_network_gradients_float64():
    rng = np.random.default_rng(0)
    with dc.precision(np.float64):
        net = build("(D5R, D4R)-D3R", (3, 2), "gaussian", 2, seed=0)
        x, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        f = lambda: dc.sum(dc.add(net(x, w).mean, dc.log(net(x, w).var)))  # noqa: E731
        assert dc.finite_diff_check(f, net.params) < 1e-4
