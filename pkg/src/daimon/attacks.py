"""Attack analysis for the label embedding.

Two attackers are modeled. A brute-force attacker samples label vectors
hoping one lands within distance ``epsilon`` of ``y_t``; its per-trial
success probability is the area of a spherical cap, computed analytically
and cross-checked by Monte Carlo. An inverse-mapping attacker trains an MLP
to map embeddings back to label vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .embedding import (
    DelModel,
    LabelVector,
    TrainingError,
    _perturb_rows,
    decode_labels,
    encode_labels,
)
from .numerics import (
    AdamState,
    ContractError,
    MlpParams,
    OptimizerError,
    adam_step,
    mlp_forward,
    mlp_gradient,
    reg_inc_beta,
)


class InfeasibleRegimeError(ValueError):
    """Monte Carlo would observe too few hits to say anything useful."""


def _check_cap_args(n, epsilon):
    if int(n) != n or n < 2:
        raise ContractError(f"n must be an integer >= 2, got {n}")
    if not 0.0 < epsilon <= 1.0:
        raise ContractError(f"epsilon must lie in (0, 1], got {epsilon}")


def cap_sin2(epsilon: float) -> float:
    """sin^2 of the cap half-angle for distance ``epsilon`` (cos beta = 1 - epsilon)."""
    return 2.0 * epsilon - epsilon * epsilon


def cap_probability(n: int, epsilon: float) -> float:
    """Probability that a uniform direction on the hemisphere around ``y_t``
    lies within modified cosine distance ``epsilon`` of it."""
    _check_cap_args(n, epsilon)
    return reg_inc_beta(cap_sin2(epsilon), (n - 1) / 2.0, 0.5)


@dataclass(frozen=True)
class TrialEstimate:
    linearized: float
    exact: float


def required_trials(p: float, alpha: float) -> TrialEstimate:
    """Trials ``q`` needed for success probability ``alpha`` when each trial
    succeeds with probability ``p``.

    ``linearized`` is ``alpha / p`` (from ``alpha ~ p q``); ``exact`` solves
    ``alpha = 1 - (1 - p)^q``, which is infinite for ``alpha = 1`` unless
    ``p = 1``. ``p = 0`` gives infinity for both.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"p must lie in [0, 1], got {p}")
    if not 0.0 < alpha <= 1.0:
        raise ContractError(f"alpha must lie in (0, 1], got {alpha}")
    if p == 0.0:
        return TrialEstimate(math.inf, math.inf)
    if p == 1.0:
        return TrialEstimate(alpha, 1.0)
    if alpha == 1.0:
        exact = math.inf
    else:
        exact = math.log1p(-alpha) / math.log1p(-p)
    return TrialEstimate(alpha / p, exact)


@dataclass(frozen=True)
class CapAnalysis:
    n: int
    epsilon: float
    p: float
    q_for_alpha: float
    q_exact: float
    alpha: float = 1.0

    @classmethod
    def compute(cls, n: int, epsilon: float, alpha: float = 1.0) -> "CapAnalysis":
        p = cap_probability(n, epsilon)
        q = required_trials(p, alpha)
        return cls(n, epsilon, p, q.linearized, q.exact, alpha)


@dataclass(frozen=True)
class MonteCarloEstimate:
    p: float
    ci_low: float
    ci_high: float
    stderr: float
    hits: int
    trials: int


MIN_EXPECTED_HITS = 50
_MC_CHUNK = 250_000


def monte_carlo_cap(n: int, epsilon: float, trials: int, rng: np.random.Generator) -> MonteCarloEstimate:
    """Empirical cap probability from ``trials`` uniform hemisphere draws.

    Directions are normalized Gaussian vectors, reflected into the
    hemisphere ``y . e1 >= 0`` around the reference ``e1``.
    """
    _check_cap_args(n, epsilon)
    if trials < 1:
        raise ContractError("trials must be positive")
    expected = cap_probability(n, epsilon) * trials
    if expected < MIN_EXPECTED_HITS:
        raise InfeasibleRegimeError(
            f"expected only {expected:.3g} hits for n={n}, epsilon={epsilon}, trials={trials}; "
            f"need at least {MIN_EXPECTED_HITS}"
        )
    hits = 0
    done = 0
    while done < trials:
        k = min(_MC_CHUNK, trials - done)
        g = rng.standard_normal((k, n))
        cos = np.abs(g[:, 0]) / np.linalg.norm(g, axis=1)
        hits += int(np.count_nonzero(1.0 - cos < epsilon))
        done += k
    p = hits / trials
    se = math.sqrt(max(p * (1.0 - p), 0.0) / trials)
    return MonteCarloEstimate(p, max(0.0, p - 1.96 * se), min(1.0, p + 1.96 * se), se, hits, trials)


# --- inverse mapping attack -------------------------------------------------


class AttackMode(str, Enum):
    NEARBY = "nearby"
    RANDOM = "random"


def generate_inverse_nearby(x_t: LabelVector, f: DelModel, rng: np.random.Generator):
    """Training pair ``(f(x), x)`` with ``x`` a perturbation of ``x_t``."""
    f.check_labels(x_t)
    row = _perturb_rows(x_t.labels, x_t.num_classes, 1, rng)[0]
    x = LabelVector(row, x_t.num_classes)
    return f.embed(x), x


def generate_inverse_random(f: DelModel, num_classes: int, rng: np.random.Generator):
    """Training pair ``(f(x), x)`` with ``x`` uniform over all label vectors."""
    x = LabelVector.random(f.m, num_classes, rng)
    return f.embed(x), x


def _nearby_batch(x_t: LabelVector, f: DelModel, count: int, rng):
    rows = _perturb_rows(x_t.labels, x_t.num_classes, count, rng)
    return f.embed_rows(rows), rows


def _random_batch(f: DelModel, num_classes: int, count: int, rng):
    # no access to x_t here, by construction
    rows = rng.integers(1, num_classes + 1, size=(count, f.m))
    return f.embed_rows(rows), rows


@dataclass(frozen=True)
class InverseAttackConfig:
    mode: AttackMode = AttackMode.NEARBY
    epochs: int = 60
    batch_size: int = 64
    samples_per_epoch: int = 512
    learning_rate: float = 1e-3
    hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", AttackMode(self.mode))
        for name in ("epochs", "batch_size", "samples_per_epoch", "hidden"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")


@dataclass
class InverseAttackTrace:
    mode: AttackMode
    errors: list[float] = field(default_factory=list)  # index 0 = untrained attacker
    losses: list[float] = field(default_factory=list)

    def rows(self):
        return [(epoch, self.mode.value, err) for epoch, err in enumerate(self.errors)]


def recover_labels(params: MlpParams, y: np.ndarray, num_classes: int) -> np.ndarray:
    return decode_labels(mlp_forward(params, y, normalize=False), num_classes)


def train_inverse_attack(
    f: DelModel, y_t: np.ndarray, cfg: InverseAttackConfig, x_t: LabelVector
) -> InverseAttackTrace:
    """Train an attacker ``g: R^n -> R^m`` with squared error on generated
    ``(f(x), x)`` pairs and record ``e(g(y_t), x_t)`` after every epoch.

    In ``random`` mode ``x_t`` is used only for scoring.
    """
    f.check_labels(x_t)
    y_t = np.asarray(y_t, dtype=np.float64)
    if y_t.shape != (f.n,):
        raise ContractError(f"y_t must have length {f.n}")
    C = f.num_classes
    init_seq, data_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    params = MlpParams.init(f.n, cfg.hidden, f.m, np.random.default_rng(init_seq))
    state = AdamState.fresh(params, lr=cfg.learning_rate)
    rng = np.random.default_rng(data_seq)

    if cfg.mode is AttackMode.NEARBY:
        def draw(count):
            return _nearby_batch(x_t, f, count, rng)
    else:
        def draw(count):
            return _random_batch(f, C, count, rng)

    def score(p):
        return float(np.count_nonzero(recover_labels(p, y_t, C) != x_t.labels)) / f.m

    trace = InverseAttackTrace(cfg.mode)
    trace.errors.append(score(params))
    for epoch in range(1, cfg.epochs + 1):
        ys, rows = draw(cfg.samples_per_epoch)
        targets = encode_labels(rows, C)
        total = 0.0
        for start in range(0, len(rows), cfg.batch_size):
            yb = ys[start:start + cfg.batch_size]
            tb = targets[start:start + cfg.batch_size]
            out = mlp_forward(params, yb, normalize=False)
            resid = out - tb
            loss = float(np.mean(np.sum(resid * resid, axis=1)))
            if not math.isfinite(loss):
                raise TrainingError(f"attacker loss became non-finite at epoch {epoch}")
            grad = mlp_gradient(params, yb, 2.0 * resid / len(yb), normalize=False)
            try:
                params, state = adam_step(params, grad, state)
            except OptimizerError as exc:
                raise TrainingError(f"attacker diverged at epoch {epoch}: {exc}") from exc
            total += loss * len(yb)
        trace.losses.append(total / len(rows))
        trace.errors.append(score(params))
    return trace
