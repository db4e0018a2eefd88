"""Distance embedding for labels.

A model here is an MLP trained for one specific true label vector ``x_t``
so that the modified cosine distance between ``f(x)`` and ``f(x_t)``
tracks the fraction of labels on which ``x`` disagrees with ``x_t``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import (
    AdamState,
    ContractError,
    MlpParams,
    OptimizerError,
    adam_step,
    mlp_forward,
    mlp_gradient,
)

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
ENCODING_CENTERED = "centered-scalar-v1"
TRAIN_STABILIZER = 1e-12


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss or parameters)."""


@dataclass(frozen=True, eq=False)
class LabelVector:
    """``m`` integer labels, each in ``1..num_classes``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size < 1:
            raise ContractError("a label vector needs at least one label")
        if int(self.num_classes) < 2:
            raise ContractError(f"num_classes must be >= 2, got {self.num_classes}")
        if labels.min() < 1 or labels.max() > self.num_classes:
            raise ContractError(f"labels must lie in 1..{self.num_classes}")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def m(self) -> int:
        return self.labels.size

    def __len__(self):
        return self.m

    def __eq__(self, other):
        if not isinstance(other, LabelVector):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.labels, other.labels)

    @classmethod
    def random(cls, m: int, num_classes: int, rng: np.random.Generator) -> "LabelVector":
        return cls(rng.integers(1, num_classes + 1, size=m), num_classes)

    def to_list(self) -> list[int]:
        return [int(v) for v in self.labels]


def encode_labels(labels, num_classes: int) -> np.ndarray:
    """Map label ``c`` to ``(c - (C+1)/2) / C``. Accepts a vector or a batch of rows."""
    return (np.asarray(labels, dtype=np.float64) - (num_classes + 1) / 2.0) / num_classes


def decode_labels(values, num_classes: int) -> np.ndarray:
    """Inverse of :func:`encode_labels`, rounded to the nearest valid class."""
    raw = np.asarray(values, dtype=np.float64) * num_classes + (num_classes + 1) / 2.0
    return np.clip(np.rint(raw), 1, num_classes).astype(np.int64)


def error(x: LabelVector, x_t: LabelVector) -> float:
    """Fraction of positions where ``x`` and ``x_t`` disagree."""
    if x.m != x_t.m or x.num_classes != x_t.num_classes:
        raise ContractError(f"label vectors differ in shape: m={x.m}/{x_t.m}, C={x.num_classes}/{x_t.num_classes}")
    return float(np.count_nonzero(x.labels != x_t.labels)) / x.m


def distance(y1, y2) -> float:
    """Modified cosine distance: ``1 - cos`` if the dot product is >= 0, else 1."""
    y1 = np.asarray(y1, dtype=np.float64)
    y2 = np.asarray(y2, dtype=np.float64)
    if y1.shape != y2.shape or y1.ndim != 1:
        raise ContractError(f"embedding shapes differ: {y1.shape} vs {y2.shape}")
    dot = float(y1 @ y2)
    if dot < 0:
        return 1.0
    cos = dot / (math.sqrt(float(y1 @ y1)) * math.sqrt(float(y2 @ y2)))
    return min(1.0, max(0.0, 1.0 - cos))


def _batch_distance(ys: np.ndarray, y_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # rows of ys and y_ref are unit vectors already
    dots = ys @ y_ref
    return np.where(dots >= 0, 1.0 - dots, 1.0), dots


def _perturb_rows(x_t: np.ndarray, num_classes: int, count: int, rng: np.random.Generator) -> np.ndarray:
    m = x_t.size
    out = np.tile(x_t, (count, 1))
    for row in out:
        v = int(rng.integers(1, m + 1))
        k = rng.choice(m, size=v, replace=False)
        row[k] = rng.integers(1, num_classes + 1, size=v)
    return out


def generate_data(x_t: LabelVector, rng: np.random.Generator) -> LabelVector:
    """Perturb ``x_t``: pick ``v`` uniformly in ``1..m``, then re-draw ``v``
    distinct positions uniformly from ``1..C``. A re-drawn label may equal
    the old one, so the resulting error is at most ``v/m``.
    """
    row = _perturb_rows(x_t.labels, x_t.num_classes, 1, rng)[0]
    return LabelVector(row, x_t.num_classes)


@dataclass(frozen=True)
class DelTrainConfig:
    hidden: int = 256
    epochs: int = 500
    batch_size: int = 64
    samples_per_epoch: int = 512
    learning_rate: float = 1e-3
    seed: int = 0
    test_samples: int = 512
    lr_schedule: str = "cosine"  # or "constant"

    def __post_init__(self):
        for name in ("hidden", "epochs", "batch_size", "samples_per_epoch", "test_samples"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be positive")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ContractError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "constant":
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * min(step / total_steps, 1.0)))

    @classmethod
    def from_dict(cls, doc: dict) -> "DelTrainConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True, eq=False)
class DelModel:
    params: MlpParams
    m: int
    n: int
    num_classes: int
    input_encoding: str = ENCODING_CENTERED
    training_seed: int = 0

    def __post_init__(self):
        if self.params.in_dim != self.m:
            raise ContractError(f"params expect {self.params.in_dim} inputs but m={self.m}")
        if self.params.out_dim != self.n:
            raise ContractError(f"params produce {self.params.out_dim} outputs but n={self.n}")
        if not self.n < self.m:
            raise ContractError(f"embedding dimension n={self.n} must be smaller than m={self.m}")
        if self.input_encoding != ENCODING_CENTERED:
            raise ContractError(f"unknown input encoding {self.input_encoding!r}")

    def check_labels(self, x: LabelVector):
        if x.m != self.m or x.num_classes != self.num_classes:
            raise ContractError(
                f"label vector (m={x.m}, C={x.num_classes}) does not fit model (m={self.m}, C={self.num_classes})"
            )

    def embed(self, x: LabelVector) -> np.ndarray:
        self.check_labels(x)
        return mlp_forward(self.params, encode_labels(x.labels, self.num_classes))

    def embed_rows(self, rows: np.ndarray) -> np.ndarray:
        return mlp_forward(self.params, encode_labels(rows, self.num_classes))

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "m": self.m,
            "n": self.n,
            "num_classes": self.num_classes,
            "input_encoding": self.input_encoding,
            "training_seed": self.training_seed,
            "params": self.params.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DelModel":
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ContractError(f"unsupported model format_version {doc.get('format_version')!r}")
        return cls(
            MlpParams.from_dict(doc["params"]),
            int(doc["m"]),
            int(doc["n"]),
            int(doc["num_classes"]),
            doc["input_encoding"],
            int(doc["training_seed"]),
        )

    def to_bytes(self) -> bytes:
        """Canonical serialized form; this is what gets content-addressed."""
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DelModel":
        return cls.from_dict(json.loads(data))


@dataclass
class LossTrace:
    train: list[float] = field(default_factory=list)
    test: list[float] = field(default_factory=list)

    def rows(self):
        return [(i + 1, tr, te) for i, (tr, te) in enumerate(zip(self.train, self.test))]


def _loss_and_tails(ys: np.ndarray, y_t: np.ndarray, errs: np.ndarray):
    """Mean |e - d| over the batch and its gradient w.r.t. ys and y_t."""
    d, dots = _batch_distance(ys, y_t)
    diff = errs - d
    loss = float(np.mean(np.abs(diff)))
    # dL/dd = sign(d - e) / B, with sign(0) = 0; d = 1 - y.y_t on the dot >= 0 branch
    dl_dd = np.sign(d - errs) / len(errs)
    active = (dots >= 0).astype(np.float64) * dl_dd
    tail_ys = -active[:, None] * y_t[None, :]
    tail_yt = -(active[:, None] * ys).sum(axis=0)
    return loss, tail_ys, tail_yt


def _eval_loss(params: MlpParams, x_enc: np.ndarray, xt_enc: np.ndarray, errs: np.ndarray) -> float:
    ys = mlp_forward(params, x_enc, stabilizer=TRAIN_STABILIZER)
    y_t = mlp_forward(params, xt_enc, stabilizer=TRAIN_STABILIZER)
    d, _ = _batch_distance(ys, y_t)
    return float(np.mean(np.abs(errs - d)))


def _row_errors(rows: np.ndarray, x_t: np.ndarray) -> np.ndarray:
    return np.count_nonzero(rows != x_t[None, :], axis=1) / x_t.size


def train_del(x_t: LabelVector, n: int, cfg: DelTrainConfig = DelTrainConfig()) -> tuple[DelModel, LossTrace]:
    """Fit an ``x_t``-specific embedding ``f: Q^m -> R^n`` by minimizing
    ``|e(x, x_t) - d(f(x), f(x_t))|`` over perturbations of ``x_t``.

    Each epoch draws ``cfg.samples_per_epoch`` fresh perturbations plus
    ``x_t`` itself. The held-out set comes from a separate seed stream.
    """
    if not 1 <= n < x_t.m:
        raise ContractError(f"embedding dimension n={n} must satisfy 1 <= n < m={x_t.m}")
    C = x_t.num_classes
    root = np.random.SeedSequence(cfg.seed)
    init_seq, train_seq, test_seq = root.spawn(3)
    params = MlpParams.init(x_t.m, cfg.hidden, n, np.random.default_rng(init_seq))
    state = AdamState.fresh(params, lr=cfg.learning_rate)
    train_rng = np.random.default_rng(train_seq)
    test_rng = np.random.default_rng(test_seq)

    xt_enc = encode_labels(x_t.labels, C)
    test_rows = _perturb_rows(x_t.labels, C, cfg.test_samples, test_rng)
    test_enc = encode_labels(test_rows, C)
    test_err = _row_errors(test_rows, x_t.labels)

    trace = LossTrace()
    total_steps = cfg.epochs * math.ceil((cfg.samples_per_epoch + 1) / cfg.batch_size)
    for epoch in range(1, cfg.epochs + 1):
        rows = _perturb_rows(x_t.labels, C, cfg.samples_per_epoch, train_rng)
        rows = np.vstack([rows, x_t.labels[None, :]])
        rows = rows[train_rng.permutation(len(rows))]
        errs = _row_errors(rows, x_t.labels)
        enc = encode_labels(rows, C)
        total, seen = 0.0, 0
        for start in range(0, len(rows), cfg.batch_size):
            xb, eb = enc[start:start + cfg.batch_size], errs[start:start + cfg.batch_size]
            ys = mlp_forward(params, xb, stabilizer=TRAIN_STABILIZER)
            y_t = mlp_forward(params, xt_enc, stabilizer=TRAIN_STABILIZER)
            loss, tail_ys, tail_yt = _loss_and_tails(ys, y_t, eb)
            if not math.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            g = mlp_gradient(params, xb, tail_ys, stabilizer=TRAIN_STABILIZER)
            g_t = mlp_gradient(params, xt_enc, tail_yt, stabilizer=TRAIN_STABILIZER)
            state = replace(state, lr=cfg.lr_at(state.step, total_steps))
            try:
                params, state = adam_step(params, g.map(np.add, g_t), state)
            except OptimizerError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            total += loss * len(eb)
            seen += len(eb)
        trace.train.append(total / seen)
        trace.test.append(_eval_loss(params, test_enc, xt_enc, test_err))
        if not math.isfinite(trace.test[-1]):
            raise TrainingError(f"held-out loss became non-finite at epoch {epoch}")
        log.debug("epoch %d train=%.5f test=%.5f", epoch, trace.train[-1], trace.test[-1])

    model = DelModel(params, x_t.m, n, C, ENCODING_CENTERED, cfg.seed)
    return model, trace


@dataclass
class CorrelationReport:
    pearson_r: float
    mean_abs_dev: float
    pairs: list[tuple[float, float]]

    @property
    def errors(self) -> np.ndarray:
        return np.array([e for e, _ in self.pairs])

    @property
    def distances(self) -> np.ndarray:
        return np.array([d for _, d in self.pairs])


def correlation_report(errs, dists) -> CorrelationReport:
    errs = np.asarray(errs, dtype=np.float64)
    dists = np.asarray(dists, dtype=np.float64)
    if errs.std() == 0 or dists.std() == 0:
        r = float("nan")
    else:
        r = float(np.corrcoef(errs, dists)[0, 1])
    return CorrelationReport(r, float(np.mean(np.abs(errs - dists))), list(zip(errs.tolist(), dists.tolist())))


def eval_del(model: DelModel, x_t: LabelVector, num_samples: int, rng: np.random.Generator) -> CorrelationReport:
    """Score ``model`` on fresh perturbations of ``x_t``."""
    model.check_labels(x_t)
    if num_samples < 1:
        raise ContractError("num_samples must be positive")
    rows = _perturb_rows(x_t.labels, x_t.num_classes, num_samples, rng)
    y_t = model.embed(x_t)
    d, _ = _batch_distance(model.embed_rows(rows), y_t)
    return correlation_report(_row_errors(rows, x_t.labels), np.clip(d, 0.0, 1.0))
