"""Small numerical kernel: a one-hidden-layer ReLU MLP, Adam, and the
regularized incomplete beta function.

Everything here is a pure function of its arguments. Parameters are
immutable; optimizer steps return new objects.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

FORMAT_VERSION = 1
DEGENERATE_NORM = 1e-12
LAYERS = ("w1", "b1", "w2", "b2")


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


class DegenerateOutputError(ArithmeticError):
    """The pre-normalization output vector is (numerically) zero."""


class OptimizerError(ArithmeticError):
    """Non-finite values reached the optimizer."""


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Weights of ``x -> w2 @ relu(w1 @ x + b1) + b2``.

    ``w1`` is ``[hidden, in]`` and ``w2`` is ``[out, hidden]``. Arrays are
    copied and made read-only on construction.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        for name in LAYERS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        self._check_shapes()

    def _check_shapes(self):
        w1, b1, w2, b2 = self.arrays()
        if w1.ndim != 2 or w2.ndim != 2 or b1.ndim != 1 or b2.ndim != 1:
            raise ContractError("w1, w2 must be matrices and b1, b2 vectors")
        if b1.shape[0] != w1.shape[0] or w2.shape[1] != w1.shape[0] or b2.shape[0] != w2.shape[0]:
            raise ContractError(
                f"inconsistent layer shapes: w1{w1.shape} b1{b1.shape} w2{w2.shape} b2{b2.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    @classmethod
    def _adopt(cls, w1, b1, w2, b2) -> "MlpParams":
        # Takes ownership of freshly computed float64 arrays without copying.
        obj = object.__new__(cls)
        for name, arr in zip(LAYERS, (w1, b1, w2, b2)):
            arr.flags.writeable = False
            object.__setattr__(obj, name, arr)
        obj._check_shapes()
        return obj

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in LAYERS)

    def map(self, fn, *others: "MlpParams") -> "MlpParams":
        """Apply ``fn`` layer-wise across this and ``others``."""
        out = [np.asarray(fn(*arrs), dtype=np.float64) for arrs in zip(self.arrays(), *(o.arrays() for o in others))]
        return MlpParams._adopt(*(a if a.flags.owndata and a.flags.writeable else a.copy() for a in out))

    def same_shape(self, other: "MlpParams") -> bool:
        return all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def __eq__(self, other):
        if not isinstance(other, MlpParams):
            return NotImplemented
        return self.same_shape(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )

    @classmethod
    def zeros(cls, in_dim: int, hidden_dim: int, out_dim: int) -> "MlpParams":
        return cls(
            np.zeros((hidden_dim, in_dim)),
            np.zeros(hidden_dim),
            np.zeros((out_dim, hidden_dim)),
            np.zeros(out_dim),
        )

    @classmethod
    def init(cls, in_dim: int, hidden_dim: int, out_dim: int, rng: np.random.Generator) -> "MlpParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
        if min(in_dim, hidden_dim, out_dim) < 1:
            raise ContractError("layer widths must be positive")
        k1 = math.sqrt(1.0 / in_dim)
        k2 = math.sqrt(1.0 / hidden_dim)
        return cls(
            rng.uniform(-k1, k1, size=(hidden_dim, in_dim)),
            rng.uniform(-k1, k1, size=hidden_dim),
            rng.uniform(-k2, k2, size=(out_dim, hidden_dim)),
            rng.uniform(-k2, k2, size=out_dim),
        )

    # Serialization: decimal strings via repr() round-trip float64 exactly.
    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "in_dim": self.in_dim,
            "hidden_dim": self.hidden_dim,
            "out_dim": self.out_dim,
            "layers": {name: [repr(float(v)) for v in getattr(self, name).ravel()] for name in LAYERS},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpParams":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ContractError(f"unsupported MlpParams format_version {doc.get('format_version')!r}")
        i, h, o = int(doc["in_dim"]), int(doc["hidden_dim"]), int(doc["out_dim"])
        shapes = {"w1": (h, i), "b1": (h,), "w2": (o, h), "b2": (o,)}
        arrays = []
        for name in LAYERS:
            flat = np.array([float(s) for s in doc["layers"][name]], dtype=np.float64)
            if flat.size != math.prod(shapes[name]):
                raise ContractError(f"layer {name} has {flat.size} values, expected {shapes[name]}")
            arrays.append(flat.reshape(shapes[name]))
        return cls(*arrays)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MlpParams":
        return cls.from_dict(json.loads(text))


def _check_input(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.in_dim:
        raise ContractError(f"input shape {x.shape} does not match in_dim={params.in_dim}")
    return x


def _forward(params: MlpParams, x: np.ndarray):
    # Works on a single vector or a row-batch.
    pre = x @ params.w1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    z = hidden @ params.w2.T + params.b2
    return pre, hidden, z


def mlp_forward(params: MlpParams, x, *, normalize: bool = True, stabilizer: float | None = None) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows.

    With ``normalize`` the output is scaled to unit L2 norm. In inference
    mode (``stabilizer=None``) a pre-normalization norm below 1e-12 raises
    :class:`DegenerateOutputError`; training passes a small stabilizer that
    is added to the norm instead.
    """
    x = _check_input(params, x)
    _, _, z = _forward(params, x)
    if not normalize:
        return z
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if stabilizer is None:
        if np.any(norm < DEGENERATE_NORM):
            raise DegenerateOutputError("pre-normalization output has norm < 1e-12")
        return z / norm
    return z / (norm + stabilizer)


def mlp_gradient(params: MlpParams, x, loss_tail, *, normalize: bool = True, stabilizer: float = 0.0) -> MlpParams:
    """Backpropagate ``loss_tail`` (dLoss/dOutput) to the parameters.

    ``x`` and ``loss_tail`` may be single vectors or row-batches; batch
    gradients are summed. ReLU'(0) is taken as 0.
    """
    x = _check_input(params, x)
    g = np.asarray(loss_tail, dtype=np.float64)
    if g.shape[-1] != params.out_dim or g.shape[:-1] != x.shape[:-1]:
        raise ContractError(f"loss_tail shape {g.shape} does not match output for input {x.shape}")
    if not np.isfinite(g).all():
        raise ContractError("loss_tail contains non-finite values")
    xb = np.atleast_2d(x)
    gb = np.atleast_2d(g)
    pre, hidden, z = _forward(params, xb)
    if normalize:
        zn = np.linalg.norm(z, axis=1, keepdims=True)
        r = zn + stabilizer
        # d(z/r)/dz applied to g, with r = |z| + stabilizer
        safe = np.where(zn > 0, zn, 1.0)
        gz = gb / r - z * (np.sum(z * gb, axis=1, keepdims=True) / (safe * r * r))
    else:
        gz = gb
    gw2 = gz.T @ hidden
    gb2 = gz.sum(axis=0)
    gh = (gz @ params.w2) * (pre > 0)
    gw1 = gh.T @ xb
    gb1 = gh.sum(axis=0)
    return MlpParams._adopt(gw1, gb1, gw2, gb2)


@dataclass(frozen=True, eq=False)
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, like: MlpParams, **hyper) -> "AdamState":
        zeros = like.map(np.zeros_like)
        state = cls(zeros, zeros, 0, **hyper)
        if min(state.lr, state.beta1, state.beta2, state.eps) <= 0:
            raise ContractError("Adam hyperparameters must be positive")
        return state


def adam_step(params: MlpParams, grads: MlpParams, state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if not (params.same_shape(grads) and params.same_shape(state.m) and params.same_shape(state.v)):
        raise ContractError("gradient/optimizer state shapes do not match parameters")
    if not grads.all_finite():
        raise OptimizerError(f"non-finite gradient at Adam step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    ms, vs, ps = [], [], []
    # overflow shows up as non-finite parameters, reported below
    with np.errstate(over="ignore", invalid="ignore"):
        for p, m_old, v_old, g in zip(params.arrays(), state.m.arrays(), state.v.arrays(), grads.arrays()):
            m_ = m_old * b1
            m_ += (1.0 - b1) * g
            v_ = g * g
            v_ *= 1.0 - b2
            v_ += b2 * v_old
            denom = np.sqrt(v_ * (1.0 / c2))
            denom += state.eps
            step = m_ * (state.lr / c1)
            step /= denom
            ms.append(m_)
            vs.append(v_)
            ps.append(p - step)
    m, v, new = MlpParams._adopt(*ms), MlpParams._adopt(*vs), MlpParams._adopt(*ps)
    if not new.all_finite():
        raise OptimizerError(f"parameters became non-finite at Adam step {t}")
    return new, AdamState(m, v, t, state.lr, b1, b2, state.eps)


# --- regularized incomplete beta -------------------------------------------

_CF_TINY = 1e-300
_CF_TOL = 1e-16
_CF_MAX_ITER = 10_000


def _beta_cf(x: float, a: float, b: float) -> float:
    """Continued fraction for I_x(a,b) (modified Lentz)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
    h = d
    for k in range(1, _CF_MAX_ITER + 1):
        k2 = 2 * k
        aa = k * (b - k) * x / ((qam + k2) * (a + k2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        h *= d * c
        aa = -(a + k) * (qab + k) * x / ((a + k2) * (qap + k2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _CF_TINY else _CF_TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _CF_TINY else _CF_TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_TOL:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (x={x}, a={a}, b={b})")


def _log_front(x: float, a: float, b: float) -> float:
    return (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )


def _check_beta_args(x, a, b):
    if not (0.0 <= x <= 1.0) or math.isnan(x):
        raise ContractError(f"x must lie in [0, 1], got {x}")
    if not (a > 0 and b > 0) or math.isinf(a) or math.isinf(b):
        raise ContractError(f"a and b must be positive and finite, got a={a}, b={b}")


def log_reg_inc_beta(x: float, a: float, b: float) -> float:
    """Natural log of I_x(a, b); stays accurate far below float underflow."""
    x, a, b = float(x), float(a), float(b)
    _check_beta_args(x, a, b)
    if x == 0.0:
        return -math.inf
    if x == 1.0:
        return 0.0
    if x < (a + 1.0) / (a + b + 2.0):
        return _log_front(x, a, b) + math.log(_beta_cf(x, a, b)) - math.log(a)
    tail = math.exp(_log_front(1.0 - x, b, a)) * _beta_cf(1.0 - x, b, a) / b
    return math.log1p(-tail)


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta I_x(a, b) = B(x; a, b) / B(a, b)."""
    x, a, b = float(x), float(a), float(b)
    _check_beta_args(x, a, b)
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(_log_front(x, a, b)) * _beta_cf(x, a, b) / a
    return 1.0 - math.exp(_log_front(1.0 - x, b, a)) * _beta_cf(1.0 - x, b, a) / b
