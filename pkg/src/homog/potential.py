"""Closed-form periodic potentials on the unit torus.

A potential is an immutable expression tree built from constants, ``sin`` and
``cos`` of ``2*pi*k.x + E(x)`` with integer wave-vectors ``k``, sums,
products, scalar multiples and integer powers.  Because every coordinate
enters through an integer frequency the represented function is exactly
1-periodic in each axis, and its gradient is available in closed form.

The module also provides grid sampling, probe-grid estimates of the
oscillation and Hölder seminorm, and multi-scale superpositions
``V_p^n(x) = sum_{k=p}^{n} U_k(x / R_k)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ResolutionError

TWO_PI = 2.0 * math.pi

# Relative spectral tail (amplitude) below which content is considered
# resolved when estimating the bandwidth of phase-modulated terms.
BANDWIDTH_TAIL_TOL = 1e-3

# Evaluate at most this many points per block when sampling grids.
_EVAL_BLOCK = 1 << 20


# ---------------------------------------------------------------------------
# Expression nodes
# ---------------------------------------------------------------------------


class Node:
    """Base class of expression nodes (all subclasses are frozen dataclasses)."""

    def value(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def children(self) -> tuple["Node", ...]:
        return ()

    def map_freqs(self, fn) -> "Node":
        """Return a copy with every wave-vector ``k`` replaced by ``fn(k)``."""
        raise NotImplementedError

    def amplitude(self) -> float:
        """Upper bound on ``sup |node|``."""
        raise NotImplementedError

    def lipschitz(self) -> float:
        """Upper bound on ``sup |grad node|`` (Euclidean norm)."""
        raise NotImplementedError

    def iter_freqs(self) -> Iterator[tuple[int, ...]]:
        for child in self.children():
            yield from child.iter_freqs()

    def to_json(self) -> dict:
        raise NotImplementedError

    def emit(self, em: "_Emitter") -> tuple[str, list[str]]:
        """Append scalar source lines computing value and gradient."""
        raise NotImplementedError


@dataclass(frozen=True)
class Const(Node):
    value_: float

    def value(self, x):
        return np.full(x.shape[:-1], float(self.value_))

    def value_and_grad(self, x):
        return self.value(x), np.zeros(x.shape)

    def map_freqs(self, fn):
        return self

    def amplitude(self):
        return abs(self.value_)

    def lipschitz(self):
        return 0.0

    def to_json(self):
        return {"op": "const", "value": float(self.value_)}

    def emit(self, em):
        return repr(float(self.value_)), ["0.0"] * em.d


@dataclass(frozen=True)
class Trig(Node):
    """``sin`` or ``cos`` of ``2*pi*freq.x + arg(x)``."""

    kind: str
    freq: tuple[int, ...]
    arg: Node | None = None

    def _phase(self, x):
        k = np.asarray(self.freq, dtype=float)
        phase = TWO_PI * (x @ k)
        if self.arg is not None:
            phase = phase + self.arg.value(x)
        return phase

    def value(self, x):
        phase = self._phase(x)
        return np.sin(phase) if self.kind == "sin" else np.cos(phase)

    def value_and_grad(self, x):
        k = np.asarray(self.freq, dtype=float)
        phase = TWO_PI * (x @ k)
        dphase = np.broadcast_to(TWO_PI * k, x.shape)
        if self.arg is not None:
            av, ag = self.arg.value_and_grad(x)
            phase = phase + av
            dphase = dphase + ag
        s, c = np.sin(phase), np.cos(phase)
        if self.kind == "sin":
            return s, c[..., None] * dphase
        return c, -s[..., None] * dphase

    def children(self):
        return () if self.arg is None else (self.arg,)

    def iter_freqs(self):
        yield self.freq
        if self.arg is not None:
            yield from self.arg.iter_freqs()

    def map_freqs(self, fn):
        arg = None if self.arg is None else self.arg.map_freqs(fn)
        return Trig(self.kind, tuple(int(v) for v in fn(self.freq)), arg)

    def amplitude(self):
        return 1.0

    def lipschitz(self):
        inner = 0.0 if self.arg is None else self.arg.lipschitz()
        return TWO_PI * math.sqrt(sum(v * v for v in self.freq)) + inner

    def to_json(self):
        return {
            "op": self.kind,
            "freq": list(self.freq),
            "arg": None if self.arg is None else self.arg.to_json(),
        }

    def emit(self, em):
        terms = [f"{float(k)!r}*{xv}" for k, xv in zip(self.freq, em.xvars) if k != 0]
        lin = f"{TWO_PI!r}*({' + '.join(terms)})" if terms else "0.0"
        dlin = [repr(TWO_PI * k) for k in self.freq]
        if self.arg is not None:
            av, ag = self.arg.emit(em)
            lin = f"{lin} + {av}"
            dlin = [f"({a} + {b})" for a, b in zip(dlin, ag)]
        ph = em.assign(lin)
        s = em.assign(f"math.sin({ph})")
        c = em.assign(f"math.cos({ph})")
        if self.kind == "sin":
            return s, [em.assign(f"{c}*{dl}") for dl in dlin]
        return c, [em.assign(f"-{s}*{dl}") for dl in dlin]


@dataclass(frozen=True)
class Add(Node):
    args: tuple[Node, ...]

    def value(self, x):
        return reduce(np.add, (a.value(x) for a in self.args))

    def value_and_grad(self, x):
        parts = [a.value_and_grad(x) for a in self.args]
        return (reduce(np.add, (p[0] for p in parts)), reduce(np.add, (p[1] for p in parts)))

    def children(self):
        return self.args

    def map_freqs(self, fn):
        return Add(tuple(a.map_freqs(fn) for a in self.args))

    def amplitude(self):
        return sum(a.amplitude() for a in self.args)

    def lipschitz(self):
        return sum(a.lipschitz() for a in self.args)

    def to_json(self):
        return {"op": "add", "args": [a.to_json() for a in self.args]}

    def emit(self, em):
        parts = [a.emit(em) for a in self.args]
        v = em.assign(" + ".join(p[0] for p in parts))
        g = [em.assign(" + ".join(p[1][j] for p in parts)) for j in range(em.d)]
        return v, g


@dataclass(frozen=True)
class Mul(Node):
    args: tuple[Node, ...]

    def value(self, x):
        return reduce(np.multiply, (a.value(x) for a in self.args))

    def value_and_grad(self, x):
        v, g = self.args[0].value_and_grad(x)
        for a in self.args[1:]:
            av, ag = a.value_and_grad(x)
            g = g * av[..., None] + v[..., None] * ag
            v = v * av
        return v, g

    def children(self):
        return self.args

    def map_freqs(self, fn):
        return Mul(tuple(a.map_freqs(fn) for a in self.args))

    def amplitude(self):
        return math.prod(a.amplitude() for a in self.args)

    def lipschitz(self):
        amps = [a.amplitude() for a in self.args]
        total = 0.0
        for i, a in enumerate(self.args):
            total += a.lipschitz() * math.prod(amps[:i] + amps[i + 1:])
        return total

    def to_json(self):
        return {"op": "mul", "args": [a.to_json() for a in self.args]}

    def emit(self, em):
        v, g = self.args[0].emit(em)
        for a in self.args[1:]:
            av, ag = a.emit(em)
            g = [em.assign(f"{gj}*{av} + {v}*{agj}") for gj, agj in zip(g, ag)]
            v = em.assign(f"{v}*{av}")
        return v, g


@dataclass(frozen=True)
class Scale(Node):
    c: float
    arg: Node

    def value(self, x):
        return self.c * self.arg.value(x)

    def value_and_grad(self, x):
        v, g = self.arg.value_and_grad(x)
        return self.c * v, self.c * g

    def children(self):
        return (self.arg,)

    def map_freqs(self, fn):
        return Scale(self.c, self.arg.map_freqs(fn))

    def amplitude(self):
        return abs(self.c) * self.arg.amplitude()

    def lipschitz(self):
        return abs(self.c) * self.arg.lipschitz()

    def to_json(self):
        return {"op": "scale", "c": float(self.c), "arg": self.arg.to_json()}

    def emit(self, em):
        v, g = self.arg.emit(em)
        c = repr(float(self.c))
        return em.assign(f"{c}*{v}"), [em.assign(f"{c}*{gj}") for gj in g]


@dataclass(frozen=True)
class Pow(Node):
    m: int
    arg: Node

    def value(self, x):
        return self.arg.value(x) ** self.m

    def value_and_grad(self, x):
        v, g = self.arg.value_and_grad(x)
        if self.m == 0:
            return np.ones_like(v), np.zeros_like(g)
        return v**self.m, (self.m * v ** (self.m - 1))[..., None] * g

    def children(self):
        return (self.arg,)

    def map_freqs(self, fn):
        return Pow(self.m, self.arg.map_freqs(fn))

    def amplitude(self):
        return self.arg.amplitude() ** self.m

    def lipschitz(self):
        if self.m == 0:
            return 0.0
        return self.m * self.arg.amplitude() ** (self.m - 1) * self.arg.lipschitz()

    def to_json(self):
        return {"op": "pow", "m": int(self.m), "arg": self.arg.to_json()}

    def emit(self, em):
        if self.m == 0:
            return "1.0", ["0.0"] * em.d
        v, g = self.arg.emit(em)
        dv = em.assign(f"{float(self.m)!r}*{v}**{self.m - 1}")
        return em.assign(f"{v}**{self.m}"), [em.assign(f"{dv}*{gj}") for gj in g]


class _Emitter:
    """Collects straight-line scalar code for :meth:`Node.emit`."""

    def __init__(self, xvars: Sequence[str], prefix: str = "t"):
        self.xvars = list(xvars)
        self.d = len(self.xvars)
        self.lines: list[str] = []
        self._prefix = prefix
        self._count = 0

    def assign(self, expr: str) -> str:
        name = f"{self._prefix}{self._count}"
        self._count += 1
        self.lines.append(f"{name} = {expr}")
        return name


def node_from_json(obj: dict, d: int | None = None) -> Node:
    """Parse one node of the JSON expression grammar.

    Raises
    ------
    ConfigError
        On unknown operators, missing fields or inconsistent dimensions.
    """
    if not isinstance(obj, dict) or "op" not in obj:
        raise ConfigError(f"expression node must be an object with 'op': {obj!r}")
    op = obj["op"]
    allowed = {
        "const": {"op", "value"},
        "sin": {"op", "freq", "arg"},
        "cos": {"op", "freq", "arg"},
        "add": {"op", "args"},
        "mul": {"op", "args"},
        "scale": {"op", "c", "arg"},
        "pow": {"op", "m", "arg"},
    }
    if op not in allowed:
        raise ConfigError(f"unknown expression operator {op!r}")
    extra = set(obj) - allowed[op]
    if extra:
        raise ConfigError(f"unexpected keys {sorted(extra)} in {op!r} node")
    try:
        if op == "const":
            return Const(_finite(obj["value"]))
        if op in ("sin", "cos"):
            freq = obj["freq"]
            if not isinstance(freq, list) or not all(_is_int(k) for k in freq):
                raise ConfigError(f"frequencies must be a list of integers, got {freq!r}")
            if d is not None and len(freq) != d:
                raise ConfigError(f"frequency {freq} has length {len(freq)}, expected {d}")
            arg = obj.get("arg")
            return Trig(op, tuple(int(k) for k in freq), None if arg is None else node_from_json(arg, d))
        if op in ("add", "mul"):
            args = obj["args"]
            if not isinstance(args, list) or not args:
                raise ConfigError(f"{op!r} needs a non-empty list of args")
            parsed = tuple(node_from_json(a, d) for a in args)
            return Add(parsed) if op == "add" else Mul(parsed)
        if op == "scale":
            return Scale(_finite(obj["c"]), node_from_json(obj["arg"], d))
        m = obj["m"]
        if not _is_int(m) or m < 0:
            raise ConfigError(f"power must be a non-negative integer, got {m!r}")
        return Pow(int(m), node_from_json(obj["arg"], d))
    except KeyError as exc:
        raise ConfigError(f"missing key {exc} in {op!r} node") from None


def _is_int(v) -> bool:
    return isinstance(v, (int, np.integer)) and not isinstance(v, bool)


def _finite(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
        raise ConfigError(f"expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v):
        raise ConfigError(f"expected a finite number, got {v!r}")
    return v


def _validate(node: Node, d: int) -> None:
    if isinstance(node, Trig):
        if node.kind not in ("sin", "cos"):
            raise ConfigError(f"unknown trig kind {node.kind!r}")
        if len(node.freq) != d:
            raise ConfigError(f"frequency {node.freq} does not match dimension {d}")
    elif isinstance(node, Const):
        _finite(node.value_)
    elif isinstance(node, Scale):
        _finite(node.c)
    elif isinstance(node, Pow):
        if not _is_int(node.m) or node.m < 0:
            raise ConfigError(f"power must be a non-negative integer, got {node.m!r}")
    elif isinstance(node, (Add, Mul)):
        if not node.args:
            raise ConfigError("empty argument list")
    else:
        raise ConfigError(f"unknown node type {type(node).__name__}")
    for child in node.children():
        _validate(child, d)


# ---------------------------------------------------------------------------
# Bandwidth estimation
# ---------------------------------------------------------------------------


def _has_freq(node: Node) -> bool:
    return any(any(k) for k in node.iter_freqs())


def _carson(node: Node) -> float:
    """Crude upper estimate of the per-axis bandwidth (Carson's rule for nested phases)."""
    if isinstance(node, Const):
        return 0.0
    if isinstance(node, Trig):
        base = max((abs(k) for k in node.freq), default=0)
        if node.arg is None or not _has_freq(node.arg):
            return float(base)
        return base + (node.arg.amplitude() + 1.0) * _carson(node.arg)
    if isinstance(node, Add):
        return max(_carson(a) for a in node.args)
    if isinstance(node, Mul):
        return sum(_carson(a) for a in node.args)
    if isinstance(node, Scale):
        return _carson(node.arg)
    if isinstance(node, Pow):
        return node.m * _carson(node.arg)
    raise TypeError(node)


def _has_nested_phase(node: Node) -> bool:
    if isinstance(node, Trig) and node.arg is not None and _has_freq(node.arg):
        return True
    return any(_has_nested_phase(c) for c in node.children())


def _node_bandwidth(node: Node, d: int) -> float:
    if isinstance(node, Const):
        return 0.0
    if isinstance(node, Add):
        return max(_node_bandwidth(a, d) for a in node.args)
    if isinstance(node, Scale):
        return _node_bandwidth(node.arg, d)
    if _has_nested_phase(node):
        g = 0
        for k in node.iter_freqs():
            for v in k:
                g = math.gcd(g, abs(int(v)))
        if g > 1:
            reduced = node.map_freqs(lambda k: tuple(v // g for v in k))
            return g * _numeric_bandwidth(reduced, d)
        return _numeric_bandwidth(node, d)
    if isinstance(node, Mul):
        return sum(_node_bandwidth(a, d) for a in node.args)
    if isinstance(node, Pow):
        return node.m * _node_bandwidth(node.arg, d)
    return float(max((abs(k) for k in node.freq), default=0))


def _numeric_bandwidth(node: Node, d: int) -> float:
    """Frequency beyond which the node's spectral tail is below ``BANDWIDTH_TAIL_TOL``."""
    cap = {1: 1 << 18, 2: 1024, 3: 128}.get(d, 32)
    M = 16
    while M < 4 * _carson(node) and M < cap:
        M *= 2
    axes = [np.arange(M) / M] * d
    x = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    c = np.fft.fftn(node.value(x)) / M**d
    c.flat[0] = 0.0
    power = np.abs(c) ** 2
    total = power.sum()
    if total == 0.0:
        return 0.0
    ks = np.abs(np.fft.fftfreq(M, 1.0 / M)).astype(int)
    shell = reduce(np.maximum, np.meshgrid(*([ks] * d), indexing="ij"))
    per_shell = np.bincount(shell.ravel(), weights=power.ravel())
    tail = np.cumsum(per_shell[::-1])[::-1]  # tail[K] = energy at |k|_inf >= K
    rel = np.sqrt(np.append(tail, 0.0) / total)
    first_resolved = int(np.argmax(rel <= BANDWIDTH_TAIL_TOL))
    return float(max(first_resolved - 1, 0))


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PotentialExpr:
    """A closed-form 1-periodic potential on the unit torus ``T^d``.

    The constant offset ``root(0)`` is subtracted at construction so that the
    represented function vanishes at the origin.

    Parameters
    ----------
    d : int
        Spatial dimension.
    root : Node
        Expression tree.  Every wave-vector must have length ``d``.
    """

    d: int
    root: Node
    offset: float = field(init=False, compare=False)

    def __post_init__(self):
        if not _is_int(self.d) or self.d < 1:
            raise ConfigError(f"dimension must be a positive integer, got {self.d!r}")
        _validate(self.root, self.d)
        offset = float(self.root.value(np.zeros((1, self.d)))[0])
        if not math.isfinite(offset):
            raise ConfigError("potential is not finite at the origin")
        object.__setattr__(self, "offset", offset)

    # evaluation ---------------------------------------------------------

    def _points(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if x.shape[-1] != self.d:
            raise ValueError(f"points must have trailing dimension {self.d}, got shape {x.shape}")
        return x, x.ndim == 1

    def value(self, x) -> np.ndarray | float:
        """Evaluate at one point (shape ``(d,)``) or a batch (shape ``(..., d)``)."""
        pts, single = self._points(x)
        v = self.root.value(pts.reshape(-1, self.d)).reshape(pts.shape[:-1]) - self.offset
        return float(v) if single else v

    __call__ = value

    def grad(self, x) -> np.ndarray:
        """Exact gradient, shape ``(d,)`` for a single point or ``(..., d)``."""
        pts, _ = self._points(x)
        _, g = self.root.value_and_grad(pts.reshape(-1, self.d))
        return g.reshape(pts.shape)

    def value_and_grad(self, x) -> tuple[np.ndarray, np.ndarray]:
        pts, _ = self._points(x)
        v, g = self.root.value_and_grad(pts.reshape(-1, self.d))
        return v.reshape(pts.shape[:-1]) - self.offset, g.reshape(pts.shape)

    # structure ------------------------------------------------------------

    @property
    def is_constant(self) -> bool:
        return not _has_freq(self.root)

    @cached_property
    def bandwidth(self) -> float:
        """Per-axis frequency that must be resolved by grids (``|k|_inf`` units).

        Exact for trigonometric polynomials; for phase-modulated terms the
        frequency beyond which the spectral tail carries less than
        ``BANDWIDTH_TAIL_TOL`` of the amplitude.
        """
        return _node_bandwidth(self.root, self.d)

    def amplitude_bound(self) -> float:
        return self.root.amplitude() + abs(self.offset)

    def lipschitz_bound(self) -> float:
        """Guaranteed upper bound on ``sup |grad U|``."""
        return self.root.lipschitz()

    def rescaled(self, R: int) -> "PotentialExpr":
        """Return ``x -> U(R x)`` for a positive integer ``R``."""
        if not _is_int(R) or R < 1:
            raise ConfigError(f"rescaling factor must be a positive integer, got {R!r}")
        if R == 1:
            return self
        out = PotentialExpr(self.d, self.root.map_freqs(lambda k: tuple(R * v for v in k)))
        if "bandwidth" in self.__dict__:
            out.__dict__["bandwidth"] = R * self.bandwidth
        return out

    def translated(self, y) -> "PotentialExpr":
        """Return ``x -> U(x + y)`` (renormalized to vanish at the origin)."""
        y = np.broadcast_to(np.asarray(y, dtype=float), (self.d,))
        return PotentialExpr(self.d, _translate(self.root, y))

    # arithmetic -----------------------------------------------------------

    def _coerce(self, other) -> Node:
        if isinstance(other, PotentialExpr):
            if other.d != self.d:
                raise ConfigError("cannot combine potentials of different dimension")
            return other.root
        return Const(float(other))

    def __add__(self, other):
        return PotentialExpr(self.d, Add((self.root, self._coerce(other))))

    __radd__ = __add__

    def __neg__(self):
        return PotentialExpr(self.d, Scale(-1.0, self.root))

    def __sub__(self, other):
        return self + (-other if isinstance(other, PotentialExpr) else -float(other))

    def __mul__(self, c):
        if isinstance(c, PotentialExpr):
            return PotentialExpr(self.d, Mul((self.root, c.root)))
        return PotentialExpr(self.d, Scale(float(c), self.root))

    __rmul__ = __mul__

    # serialization --------------------------------------------------------

    def to_json(self) -> dict:
        return self.root.to_json()

    @classmethod
    def from_json(cls, obj: dict, d: int | None = None) -> "PotentialExpr":
        root = node_from_json(obj, d)
        if d is None:
            lengths = {len(k) for k in root.iter_freqs()}
            if len(lengths) != 1:
                raise ConfigError("cannot infer dimension; pass d explicitly")
            d = lengths.pop()
        return cls(d, root)

    def source(self, xvars: Sequence[str], prefix: str = "t") -> tuple[list[str], str, list[str]]:
        """Straight-line scalar Python source for value and gradient.

        Returns the code lines, the name holding the (un-normalized) value and
        the names holding the gradient components.  Used to compile drifts.
        """
        em = _Emitter(xvars, prefix)
        v, g = self.root.emit(em)
        return em.lines, v, g


def _translate(node: Node, y: np.ndarray) -> Node:
    if isinstance(node, Trig):
        shift = TWO_PI * float(np.dot(node.freq, y))
        inner = None if node.arg is None else _translate(node.arg, y)
        parts = tuple(p for p in (Const(shift) if shift else None, inner) if p is not None)
        arg = None if not parts else parts[0] if len(parts) == 1 else Add(parts)
        return Trig(node.kind, node.freq, arg)
    if isinstance(node, Const):
        return node
    if isinstance(node, Add):
        return Add(tuple(_translate(a, y) for a in node.args))
    if isinstance(node, Mul):
        return Mul(tuple(_translate(a, y) for a in node.args))
    if isinstance(node, Scale):
        return Scale(node.c, _translate(node.arg, y))
    if isinstance(node, Pow):
        return Pow(node.m, _translate(node.arg, y))
    raise TypeError(node)


# Convenience constructors -------------------------------------------------


def sin(*freq: int, arg: Node | None = None) -> Node:
    return Trig("sin", tuple(freq), arg)


def cos(*freq: int, arg: Node | None = None) -> Node:
    return Trig("cos", tuple(freq), arg)


def constant(d: int, c: float = 0.0) -> PotentialExpr:
    return PotentialExpr(d, Const(float(c)))


def eval_potential(expr: PotentialExpr, x) -> float:
    """Value of ``expr`` at a single point ``x``."""
    return float(expr.value(np.asarray(x, dtype=float).reshape(expr.d)))


def grad_potential(expr: PotentialExpr, x) -> np.ndarray:
    """Exact gradient of ``expr`` at a single point ``x``."""
    return expr.grad(np.asarray(x, dtype=float).reshape(expr.d))


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


def _is_pow2(N) -> bool:
    return _is_int(N) and N >= 1 and (N & (N - 1)) == 0


@dataclass(frozen=True, eq=False)
class GridField:
    """Samples of a periodic field at the nodes ``j/N`` of the unit torus.

    ``samples`` has shape ``(N,) * d`` in C (row-major) order and is
    read-only.
    """

    d: int
    N: int
    samples: np.ndarray

    def __post_init__(self):
        if not _is_pow2(self.N) or self.N < 4:
            raise ConfigError(f"grid resolution must be a power of two >= 4, got {self.N!r}")
        arr = np.array(self.samples, dtype=float, order="C")
        if arr.size == self.N**self.d and arr.shape != (self.N,) * self.d:
            arr = arr.reshape((self.N,) * self.d)
        if arr.shape != (self.N,) * self.d:
            raise ConfigError(f"samples of shape {arr.shape} do not match d={self.d}, N={self.N}")
        if not np.all(np.isfinite(arr)):
            raise ConfigError("grid samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def decimate(self, factor: int) -> "GridField":
        """Keep every ``factor``-th node along each axis."""
        sl = (slice(None, None, factor),) * self.d
        return GridField(self.d, self.N // factor, self.samples[sl])

    def at(self, index) -> float:
        """Sample at an integer multi-index, with periodic wrap-around."""
        return float(self.samples[tuple(int(i) % self.N for i in index)])

    def dump(self, path) -> None:
        """Write a little-endian float64 array plus a JSON sidecar ``<path>.json``."""
        import json
        from pathlib import Path

        path = Path(path)
        path.write_bytes(self.samples.astype("<f8").tobytes(order="C"))
        sidecar = {"d": self.d, "N": self.N, "layout": "row-major"}
        Path(str(path) + ".json").write_text(json.dumps(sidecar) + "\n")

    @classmethod
    def load(cls, path) -> "GridField":
        import json
        from pathlib import Path

        meta = json.loads(Path(str(path) + ".json").read_text())
        if meta.get("layout") != "row-major":
            raise ConfigError(f"unsupported layout {meta.get('layout')!r}")
        data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
        return cls(int(meta["d"]), int(meta["N"]), data.astype(float))


def grid_nodes(d: int, N: int) -> np.ndarray:
    """Node coordinates, shape ``(N,)*d + (d,)``."""
    axes = [np.arange(N) / N] * d
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _sample_values(expr: PotentialExpr, N: int) -> np.ndarray:
    d = expr.d
    out = np.empty((N,) * d)
    flat = out.reshape(N, -1)
    rest = N ** (d - 1)
    rows = max(1, _EVAL_BLOCK // max(rest, 1))
    tail = grid_nodes(d - 1, N).reshape(rest, d - 1) if d > 1 else np.zeros((1, 0))
    for start in range(0, N, rows):
        first = np.arange(start, min(N, start + rows)) / N
        pts = np.concatenate(
            [np.repeat(first, rest)[:, None], np.tile(tail, (len(first), 1))], axis=1
        )
        flat[start:start + len(first)] = expr.value(pts).reshape(len(first), rest)
    return out


def sample_grid(expr: PotentialExpr, N: int, min_points_per_oscillation: float | None = None) -> GridField:
    """Sample ``expr`` at the nodes ``j/N``.

    Parameters
    ----------
    expr : PotentialExpr
    N : int
        Power of two, at least 4.
    min_points_per_oscillation : float, optional
        When given, raise :class:`ResolutionError` if ``N`` provides fewer
        points than this per period of the finest frequency of ``expr``.
    """
    if not _is_pow2(N) or N < 4:
        raise ConfigError(f"grid resolution must be a power of two >= 4, got {N!r}")
    if min_points_per_oscillation is not None and expr.bandwidth > 0:
        if N < min_points_per_oscillation * expr.bandwidth:
            raise ResolutionError(
                f"N={N} gives {N / expr.bandwidth:.2f} points per finest oscillation, "
                f"below the required {min_points_per_oscillation}"
            )
    return GridField(expr.d, N, _sample_values(expr, N))


_PROBE_CAP = {1: 1 << 22, 2: 4096, 3: 256}


def _probe_start(expr: PotentialExpr, N_probe: int) -> int:
    N = 4
    while N < max(N_probe, 4 * expr.bandwidth):
        N *= 2
    return min(N, _PROBE_CAP.get(expr.d, 64))


def oscillation(expr: PotentialExpr, N_probe: int = 64, tol: float = 1e-3) -> float:
    """Probe-grid estimate of ``sup U - inf U``.

    The grid is doubled until the estimate changes by less than ``tol``; the
    result is a lower estimate of the true oscillation.
    """
    if expr.is_constant:
        return 0.0
    N = _probe_start(expr, N_probe)
    cap = _PROBE_CAP.get(expr.d, 64)
    u = _sample_values(expr, N)
    est = float(u.max() - u.min())
    while 2 * N <= cap:
        N *= 2
        u = _sample_values(expr, N)
        new = float(u.max() - u.min())
        if abs(new - est) < tol:
            return new
        est = new
    return est


def _max_grad(expr: PotentialExpr, N: int) -> float:
    pts = grid_nodes(expr.d, N).reshape(-1, expr.d)
    best = 0.0
    for start in range(0, len(pts), _EVAL_BLOCK):
        g = expr.grad(pts[start:start + _EVAL_BLOCK])
        best = max(best, float(np.sqrt((g * g).sum(axis=-1)).max()))
    return best


def _holder_on_grid(u: np.ndarray, alpha: float, reach: int | None) -> float:
    """Max difference quotient over displacements of torus length <= 1/2."""
    N = u.shape[0]
    d = u.ndim
    half = N // 2
    lim = half if reach is None else min(half, reach)
    best = 0.0
    for m in np.stack(np.meshgrid(*([np.arange(-lim, lim + 1)] * d), indexing="ij"), -1).reshape(-1, d):
        # keep one of each +-m pair
        nz = np.flatnonzero(m)
        if nz.size == 0 or m[nz[0]] < 0:
            continue
        dist = math.sqrt(float(m @ m)) / N
        if dist > 0.5 + 1e-15:
            continue
        diff = np.abs(u - np.roll(u, tuple(int(v) for v in m), axis=tuple(range(d)))).max()
        best = max(best, float(diff) / dist**alpha)
    return best


def holder_seminorm(expr: PotentialExpr, alpha: float, N_probe: int = 32, tol: float = 1e-3) -> float:
    """Probe estimate of ``sup |U(x)-U(y)| / |x-y|^alpha`` over torus distances ``<= 1/2``.

    For ``alpha = 1`` the supremum equals ``sup |grad U|`` and is evaluated
    with the exact gradient on refining grids.  For ``alpha < 1`` difference
    quotients are maximized over all displacements on a coarse grid and over
    short displacements on successively finer grids, until the estimate
    changes by less than ``tol`` (relative).  The result is a lower estimate.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigError(f"Hölder exponent must lie in (0, 1], got {alpha!r}")
    if expr.is_constant:
        return 0.0
    cap = {1: 1 << 20, 2: 1024, 3: 64}.get(expr.d, 16)
    N = _probe_start(expr, N_probe)
    N = min(N, cap)
    if alpha == 1.0:
        est = _max_grad(expr, N)
        while 2 * N <= cap:
            N *= 2
            new = _max_grad(expr, N)
            if abs(new - est) <= tol * max(new, 1e-300):
                return new
            est = new
        return est
    coarse_cap = {1: 1024, 2: 32, 3: 8}.get(expr.d, 4)
    Nc = 4
    while Nc < min(N, coarse_cap):
        Nc *= 2
    est = _holder_on_grid(_sample_values(expr, Nc), alpha, None)
    reach = 4
    N = Nc
    while 2 * N <= cap:
        N *= 2
        new = max(est, _holder_on_grid(_sample_values(expr, N), alpha, reach))
        if abs(new - est) <= tol * max(new, 1e-300) and N >= 4 * max(expr.bandwidth, 1):
            return new
        est = new
    return est


# ---------------------------------------------------------------------------
# Multi-scale models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultiscaleModel:
    """Ordered scales ``U_0, ..., U_n`` with integer ratios ``r_1, ..., r_n``.

    The superposition is ``V_p^n(x) = sum_{k=p}^{n} U_k(x / R_k)`` with
    ``R_0 = 1`` and ``R_k = r_1 * ... * r_k``.
    """

    scales: tuple[PotentialExpr, ...]
    ratios: tuple[int, ...]
    alpha: float = 1.0

    def __post_init__(self):
        scales = tuple(self.scales)
        ratios = tuple(self.ratios)
        if not scales:
            raise ConfigError("a multi-scale model needs at least one scale")
        if len(ratios) != len(scales) - 1:
            raise ConfigError(f"{len(scales)} scales need {len(scales) - 1} ratios, got {len(ratios)}")
        if len({u.d for u in scales}) != 1:
            raise ConfigError("all scales must share one dimension")
        for r in ratios:
            if not _is_int(r) or r < 2:
                raise ConfigError(f"scale ratios must be integers >= 2, got {r!r}")
        if not 0.0 < float(self.alpha) <= 1.0:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha!r}")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "ratios", tuple(int(r) for r in ratios))
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def d(self) -> int:
        return self.scales[0].d

    @property
    def n_max(self) -> int:
        """Index of the last scale."""
        return len(self.scales) - 1

    @property
    def R(self) -> tuple[int, ...]:
        out = [1]
        for r in self.ratios:
            out.append(out[-1] * r)
        return tuple(out)

    @property
    def rho_min(self) -> int | None:
        return min(self.ratios) if self.ratios else None

    @property
    def rho_max(self) -> int | None:
        return max(self.ratios) if self.ratios else None

    @cached_property
    def K0(self) -> float:
        """Largest oscillation over the scales."""
        return max(oscillation(u) for u in self.scales)

    @cached_property
    def K_alpha(self) -> float:
        """Largest Hölder seminorm (exponent ``alpha``) over the scales."""
        return max(holder_seminorm(u, self.alpha) for u in self.scales)

    def within_hypothesis(self) -> bool:
        """Whether ``rho_min**alpha >= K_alpha`` (the scale-separation hypothesis)."""
        if not self.ratios:
            return True
        return self.rho_min**self.alpha >= self.K_alpha

    def _check_range(self, p: int, n: int) -> None:
        if not (0 <= p <= n <= self.n_max):
            raise ConfigError(f"need 0 <= p <= n <= {self.n_max}, got p={p}, n={n}")

    def periodic_potential(self, p: int, n: int) -> PotentialExpr:
        """``x -> V_p^n(R_n x)``, an integer-frequency potential on the unit torus."""
        self._check_range(p, n)
        R = self.R
        terms = [self.scales[k].rescaled(R[n] // R[k]) for k in range(p, n + 1)]
        out = PotentialExpr(self.d, Add(tuple(t.root for t in terms)) if len(terms) > 1 else terms[0].root)
        bw = [t.__dict__.get("bandwidth") for t in terms]
        if all(b is not None for b in bw):
            out.__dict__["bandwidth"] = max(bw)
        return out

    def truncated(self, n: int) -> "MultiscaleModel":
        """Model restricted to scales ``0..n``."""
        self._check_range(0, n)
        return MultiscaleModel(self.scales[: n + 1], self.ratios[:n], self.alpha)

    def to_json(self) -> dict:
        scales = []
        for k, u in enumerate(self.scales):
            entry = {"U": u.to_json()}
            if k > 0:
                entry["r"] = self.ratios[k - 1]
            scales.append(entry)
        return {"d": self.d, "alpha": self.alpha, "scales": scales}

    @classmethod
    def from_json(cls, obj: dict) -> "MultiscaleModel":
        if not isinstance(obj, dict):
            raise ConfigError("model must be a JSON object")
        extra = set(obj) - {"d", "alpha", "scales"}
        if extra:
            raise ConfigError(f"unexpected model keys {sorted(extra)}")
        try:
            d = obj["d"]
            entries = obj["scales"]
        except KeyError as exc:
            raise ConfigError(f"model is missing {exc}") from None
        if not _is_int(d) or d < 1:
            raise ConfigError(f"model dimension must be a positive integer, got {d!r}")
        if not isinstance(entries, list) or not entries:
            raise ConfigError("model needs a non-empty 'scales' list")
        scales, ratios = [], []
        for k, entry in enumerate(entries):
            if not isinstance(entry, dict) or "U" not in entry:
                raise ConfigError(f"scale {k} must be an object with 'U'")
            if set(entry) - {"U", "r"}:
                raise ConfigError(f"unexpected keys in scale {k}: {sorted(set(entry) - {'U', 'r'})}")
            scales.append(PotentialExpr.from_json(entry["U"], d))
            if k == 0:
                if "r" in entry:
                    raise ConfigError("scale 0 must not carry a ratio")
            else:
                if "r" not in entry:
                    raise ConfigError(f"scale {k} needs a ratio 'r'")
                ratios.append(entry["r"])
        return cls(tuple(scales), tuple(ratios), float(obj.get("alpha", 1.0)))


def self_similar(U: PotentialExpr, rho: int, n: int, alpha: float = 1.0) -> MultiscaleModel:
    """Model with ``U_k = U`` and ``r_k = rho`` for ``k = 0..n``."""
    return MultiscaleModel((U,) * (n + 1), (rho,) * n, alpha)


def multiscale_evaluate(model: MultiscaleModel, p: int, n: int, x) -> np.ndarray | float:
    """``V_p^n(x) = sum_{k=p}^{n} U_k(x / R_k)`` at a point or batch of points."""
    model._check_range(p, n)
    R = model.R
    x = np.asarray(x, dtype=float)
    total = sum(model.scales[k].value(x / R[k]) for k in range(p, n + 1))
    return float(total) if np.ndim(total) == 0 else total


def multiscale_gradient(model: MultiscaleModel, p: int, n: int, x) -> np.ndarray:
    """Gradient of :func:`multiscale_evaluate` in ``x``."""
    model._check_range(p, n)
    R = model.R
    x = np.asarray(x, dtype=float)
    return sum(model.scales[k].grad(x / R[k]) / R[k] for k in range(p, n + 1))
