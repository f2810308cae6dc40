"""Architecture strings and MLP networks with distribution heads.

Grammar (whitespace is ignored)::

    arch   := group ("-" chain)? | chain
    group  := "(" chain "," chain ")"
    chain  := atom ("-" atom)*
    atom   := "D" digits "B"? "R"?

``DkR`` is a k-unit linear layer followed by ReLU and ``Dk`` the same layer
without activation.  A leading ``(I, J)`` runs ``I`` and ``J`` on two separate
inputs and concatenates their last layers.  ``B`` marks batch normalisation;
it parses but :func:`build` refuses it.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .dists import VAR_FLOOR, Bernoulli, Categorical, DiagGaussian, FixedVarGaussian
from .errors import ParseError, ShapeError, UnsupportedLayer

HEAD_KINDS = ("gaussian", "bernoulli", "categorical", "fixed_gaussian")


@dataclass(frozen=True)
class Layer:
    units: int
    relu: bool = False
    batchnorm: bool = False

    def render(self) -> str:
        return f"D{self.units}{'B' if self.batchnorm else ''}{'R' if self.relu else ''}"


@dataclass(frozen=True)
class ArchSpec:
    layers: tuple[Layer, ...] = ()
    branches: tuple[tuple[Layer, ...], tuple[Layer, ...]] | None = None

    @property
    def n_inputs(self) -> int:
        return 2 if self.branches else 1

    def render(self) -> str:
        parts = []
        if self.branches:
            left, right = ("-".join(a.render() for a in b) for b in self.branches)
            parts.append(f"({left}, {right})")
        parts.extend(a.render() for a in self.layers)
        return "-".join(parts)

    def __str__(self) -> str:
        return self.render()


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self.pos += 1

    def _peek(self) -> str:
        self._skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def _expect(self, ch: str) -> None:
        if self._peek() != ch:
            found = self._peek() or "end of input"
            raise ParseError(f"expected {ch!r}, found {found!r}", self.pos)
        self.pos += 1

    def atom(self) -> Layer:
        start = self.pos
        if self._peek() != "D":
            found = self._peek() or "end of input"
            raise ParseError(f"expected layer token 'D<k>', found {found!r}", self.pos)
        self.pos += 1
        digits_start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        digits = self.text[digits_start:self.pos]
        if not digits:
            raise ParseError("missing unit count after 'D'", digits_start)
        units = int(digits)
        if units < 1:
            raise ParseError("unit count must be at least 1", digits_start)
        bn = relu = False
        if self.pos < len(self.text) and self.text[self.pos] == "B":
            bn = True
            self.pos += 1
        if self.pos < len(self.text) and self.text[self.pos] == "R":
            relu = True
            self.pos += 1
        if self.pos < len(self.text) and self.text[self.pos].isalnum():
            raise ParseError(f"unknown token starting at {self.text[start:self.pos + 1]!r}", self.pos)
        return Layer(units, relu, bn)

    def chain(self) -> tuple[Layer, ...]:
        if self._peek() in (")", ",", "-", ""):
            raise ParseError("empty layer chain", self.pos)
        atoms = [self.atom()]
        while self._peek() == "-":
            self.pos += 1
            if self._peek() == "(":
                raise ParseError("a branch group may only appear first", self.pos)
            atoms.append(self.atom())
        return tuple(atoms)

    def arch(self) -> ArchSpec:
        branches = None
        layers: tuple[Layer, ...] = ()
        if self._peek() == "(":
            self.pos += 1
            if self._peek() == "(":
                raise ParseError("nested parentheses are not allowed", self.pos)
            left = self.chain()
            self._expect(",")
            if self._peek() == "(":
                raise ParseError("nested parentheses are not allowed", self.pos)
            right = self.chain()
            self._expect(")")
            branches = (left, right)
            if self._peek() == "-":
                self.pos += 1
                layers = self.chain()
        else:
            layers = self.chain()
        if self._peek():
            raise ParseError(f"unexpected {self._peek()!r}", self.pos)
        return ArchSpec(layers, branches)


def parse_arch(text: str) -> ArchSpec:
    """Parse an architecture string such as ``"(D512R-D512R, D512R-D512R)"``."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty architecture string", 0)
    if not text.isascii():
        bad = next(i for i, c in enumerate(text) if not c.isascii())
        raise ParseError("non-ASCII character", bad)
    return _Parser(text).arch()


def canonical_arch(text: str) -> str:
    return parse_arch(text).render()


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def derive_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class Network:
    """MLP trunk plus linear heads producing a distribution.

    Parameters live in ``params`` under names like ``"b0.l1.W"`` (branch 0,
    layer 1), ``"t0.W"`` for shared trunk layers and ``"mu.W"`` / ``"var.W"``
    for the heads.
    """

    arch: ArchSpec
    input_dims: tuple[int, ...]
    head: str
    out_dim: int
    params: dict[str, Tensor] = field(default_factory=dict)
    feature_dim: int = 0

    def _dense(self, h: Tensor, prefix: str, relu: bool) -> Tensor:
        out = dc.add(dc.matmul(h, self.params[prefix + ".W"]), self.params[prefix + ".b"])
        return dc.relu(out) if relu else out

    def features(self, *inputs) -> Tensor:
        """Deterministic output of the trunk (the last hidden layer)."""
        if len(inputs) != len(self.input_dims):
            raise ShapeError(f"expected {len(self.input_dims)} inputs, got {len(inputs)}")
        xs = []
        for x, d in zip(inputs, self.input_dims):
            x = dc.as_tensor(x)
            if x.ndim != 2 or x.shape[1] != d:
                raise ShapeError(f"input shape {x.shape} does not match declared dim {d}")
            xs.append(x)
        if self.arch.branches:
            outs = []
            for bi, (branch, x) in enumerate(zip(self.arch.branches, xs)):
                h = x
                for li, layer in enumerate(branch):
                    h = self._dense(h, f"b{bi}.l{li}", layer.relu)
                outs.append(h)
            h = dc.concat(*outs)
        else:
            h = xs[0]
        for li, layer in enumerate(self.arch.layers):
            h = self._dense(h, f"t{li}", layer.relu)
        return h

    def head_from(self, h: Tensor):
        mu = self._dense(h, "mu", False)
        if self.head == "gaussian":
            var = dc.softplus(self._dense(h, "var", False)) + VAR_FLOOR
            return DiagGaussian(mu, var)
        if self.head == "bernoulli":
            return Bernoulli(dc.sigmoid(mu))
        if self.head == "categorical":
            return Categorical(dc.softmax(mu))
        return FixedVarGaussian(mu)

    def forward_with_features(self, *inputs):
        h = self.features(*inputs)
        return self.head_from(h), h

    def __call__(self, *inputs):
        return self.forward_with_features(*inputs)[0]

    forward = __call__


def build(
    spec: ArchSpec | str,
    input_dims,
    head: str,
    out_dim: int,
    seed: int,
    dtype=None,
) -> Network:
    """Construct a network with Glorot-uniform weights and zero biases."""
    if isinstance(spec, str):
        spec = parse_arch(spec)
    if isinstance(input_dims, int):
        input_dims = (input_dims,)
    input_dims = tuple(int(d) for d in input_dims)
    if head not in HEAD_KINDS:
        raise ValueError(f"unknown head kind {head!r}")
    if len(input_dims) != spec.n_inputs:
        raise ShapeError(f"architecture takes {spec.n_inputs} inputs, got {len(input_dims)} dims")
    if any(d < 1 for d in input_dims) or out_dim < 1:
        raise ShapeError("dimensions must be positive")
    all_layers = list(spec.layers) + [a for b in (spec.branches or ()) for a in b]
    if any(a.batchnorm for a in all_layers):
        raise UnsupportedLayer("batch normalisation layers are not supported")

    dtype = dtype or dc.default_dtype()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def dense(name: str, fan_in: int, fan_out: int) -> int:
        params[name + ".W"] = dc.parameter(glorot_uniform(rng, fan_in, fan_out, dtype), name + ".W")
        params[name + ".b"] = dc.parameter(np.zeros(fan_out, dtype=dtype), name + ".b")
        return fan_out

    if spec.branches:
        width = 0
        for bi, (branch, d) in enumerate(zip(spec.branches, input_dims)):
            for li, layer in enumerate(branch):
                d = dense(f"b{bi}.l{li}", d, layer.units)
            width += d
    else:
        width = input_dims[0]
    for li, layer in enumerate(spec.layers):
        width = dense(f"t{li}", width, layer.units)
    dense("mu", width, out_dim)
    if head == "gaussian":
        dense("var", width, out_dim)
    return Network(spec, input_dims, head, out_dim, params, width)
