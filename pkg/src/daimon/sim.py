"""Deterministic multi-peer scenario runner.

Peers act on a tick clock and talk through an in-process bus. Messages due
at a tick are delivered in sender-address order (emission order breaks
ties). Every message that reaches the chain is written to the event log,
so :func:`daimon.chain.replay` rebuilds the final chain from the trace.

Competition period ``k`` occupies ticks ``s .. s + T_b - 1`` with
``s = T_p + 1 + k * T_b``:

* ``s``            improvers register PoI proofs by model digest
* ``s + 1``        models are released to the blob store
* ``s + 2 ..``     validators verify and vote, each after a random delay
* ``s + T_b - 1``  the committer closes the period
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .chain import (
    Chain,
    ChainError,
    ConsensusParams,
    Event,
    ImprovementBlock,
    ProblemDefinition,
    TestTuple,
    format_units,
)
from .embedding import DelModel, DelTrainConfig, LabelVector, distance, error, train_del
from .numerics import ContractError
from .poi import (
    BlobStore,
    InsufficientImprovement,
    ModelArtifact,
    PeerIdentity,
    PoiProof,
    VerificationError,
    keygen,
    prove,
    verify,
)

log = logging.getLogger(__name__)

MIN_T_B = 4


class SetupError(ValueError):
    """The scenario configuration is inconsistent."""


@dataclass(frozen=True)
class Adversaries:
    bad_signature: bool = False  # proofs with a corrupted prover signature
    non_improver: bool = False  # resubmits a copy of the current best model
    duplicate_voter: bool = False  # validator that sends every vote twice


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    consensus: ConsensusParams = field(default_factory=ConsensusParams)
    contributors: int = 1
    validators: int = 3
    improvers: tuple[tuple[float, ...], ...] = ((0.40, 0.25, 0.12),)
    periods: int = 3
    m: int = 1000
    n: int = 64
    num_classes: int = 10
    del_train: DelTrainConfig = field(default_factory=DelTrainConfig)
    adversaries: Adversaries = field(default_factory=Adversaries)
    problem_id: str = "synthetic-classification"

    def validate(self) -> None:
        for name in ("contributors", "validators", "periods"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise SetupError(f"{name} must be a non-negative integer, got {value!r}")
        if self.contributors < 1:
            raise SetupError("at least one problem contributor is needed")
        if self.consensus.t_b < MIN_T_B:
            raise SetupError(f"T_b must be at least {MIN_T_B} ticks (register, release, vote, close)")
        if not 1 <= self.n < self.m:
            raise SetupError(f"embedding dimension n={self.n} must satisfy 1 <= n < m={self.m}")
        if self.num_classes < 2:
            raise SetupError("num_classes must be >= 2")
        for sched in self.improvers:
            if any(not 0.0 <= e <= 1.0 for e in sched):
                raise SetupError(f"improver error schedule {list(sched)} leaves [0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioConfig":
        allowed = {"seed", "consensus", "contributors", "validators", "improvers", "periods", "del", "adversaries", "problem_id"}
        if not isinstance(doc, dict) or set(doc) - allowed:
            extra = sorted(set(doc) - allowed) if isinstance(doc, dict) else doc
            raise SetupError(f"unknown scenario keys: {extra}")
        try:
            d = doc.get("del", {})
            return cls(
                seed=int(doc["seed"]),
                consensus=ConsensusParams.from_dict(doc.get("consensus", {})),
                contributors=doc.get("contributors", 1),
                validators=doc.get("validators", 3),
                improvers=tuple(tuple(float(e) for e in s) for s in doc.get("improvers", [[0.40, 0.25, 0.12]])),
                periods=doc.get("periods", 3),
                m=int(d.get("m", 1000)),
                n=int(d.get("n", 64)),
                num_classes=int(d.get("num_classes", 10)),
                del_train=DelTrainConfig.from_dict(d.get("train", {})),
                adversaries=Adversaries(**doc.get("adversaries", {})),
                problem_id=str(doc.get("problem_id", "synthetic-classification")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SetupError(f"bad scenario config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "consensus": self.consensus.to_dict(),
            "contributors": self.contributors,
            "validators": self.validators,
            "improvers": [list(s) for s in self.improvers],
            "periods": self.periods,
            "del": {"m": self.m, "n": self.n, "num_classes": self.num_classes, "train": asdict(self.del_train)},
            "adversaries": asdict(self.adversaries),
            "problem_id": self.problem_id,
        }


def default_scenario(seed: int = 2024) -> ScenarioConfig:
    """Two honest improvers, three validators, every adversary, five periods."""
    return ScenarioConfig(
        seed=seed,
        consensus=ConsensusParams(t_p=2, t_b=6, delta=0.005, reward_shape=3.0, d0=1.0),
        contributors=1,
        validators=3,
        improvers=((0.40, 0.25, 0.12), (0.35, 0.18, 0.06)),
        periods=5,
        adversaries=Adversaries(bad_signature=True, non_improver=True, duplicate_voter=True),
    )


def synth_model(x_t: LabelVector, target_error: float, rng: np.random.Generator, metadata: str = "") -> ModelArtifact:
    """Lookup model whose error against ``x_t`` is exactly round(target*m)/m."""
    if not 0.0 <= target_error <= 1.0:
        raise ContractError(f"target_error must lie in [0, 1], got {target_error}")
    m, C = x_t.m, x_t.num_classes
    k = int(round(target_error * m))
    labels = x_t.labels.copy()
    pos = rng.choice(m, size=k, replace=False)
    # shift by 1..C-1 (mod C) so the class always changes
    labels[pos] = (labels[pos] - 1 + rng.integers(1, C, size=k)) % C + 1
    return ModelArtifact(LabelVector(labels, C), metadata)


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    actor: bytes
    kind: str
    payload: bytes

    @property
    def event(self) -> Event:
        return Event(self.tick, self.actor, self.kind, self.payload)

    @property
    def code(self) -> str | None:
        return json.loads(self.payload)["code"] if self.kind == "reject" else None

    def to_dict(self) -> dict:
        return self.event.to_dict()

    @classmethod
    def from_dict(cls, doc: dict) -> "TraceEvent":
        ev = Event.from_dict(doc)
        return cls(ev.tick, ev.actor, ev.kind, ev.payload)


@dataclass(frozen=True)
class PeriodStat:
    period: int
    winner: bytes | None
    distance: float | None
    true_error: float | None
    reward_units: int
    votes: int


@dataclass
class ScenarioTrace:
    config: ScenarioConfig
    events: list[TraceEvent]
    chain: Chain
    store: BlobStore
    periods: list[PeriodStat]
    roles: dict[bytes, str]
    true_errors: dict[bytes, float]  # model digest -> error against x_t (harness side only)

    @property
    def blocks(self):
        return self.chain.blocks

    @property
    def balances(self) -> dict[bytes, int]:
        return dict(self.chain.balances)

    def chain_events(self) -> list[Event]:
        return [e.event for e in self.events if e.kind in Event.KINDS]

    def rejections(self) -> list[TraceEvent]:
        return [e for e in self.events if e.kind == "reject"]

    def events_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True, separators=(",", ":")) + "\n" for e in self.events)

    def summary_rows(self) -> list[list[str]]:
        return [
            [
                str(p.period),
                p.winner.hex() if p.winner else "",
                repr(p.distance) if p.distance is not None else "",
                repr(p.true_error) if p.true_error is not None else "",
                format_units(p.reward_units),
            ]
            for p in self.periods
        ]

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "winner", "distance", "true_error", "reward"])
        w.writerows(self.summary_rows())
        return buf.getvalue()

    def balances_dict(self) -> dict[str, dict]:
        return {
            addr.hex(): {"role": self.roles.get(addr, "?"), "balance": format_units(units)}
            for addr, units in sorted(self.chain.balances.items())
        }


@dataclass
class _Improver:
    ident: PeerIdentity
    schedule: tuple[float, ...]
    rng: np.random.Generator
    idx: int = 0
    model: ModelArtifact | None = None

    def candidate(self, x_t, f: DelModel, y_t, bar: float, true_errors) -> ModelArtifact | None:
        """Next scheduled model whose local distance beats ``bar``."""
        while self.idx < len(self.schedule):
            if self.model is None:
                self.model = synth_model(x_t, self.schedule[self.idx], self.rng, f"improver-model-{self.idx}")
                true_errors[self.model.digest()] = error(self.model.predicted_labels, x_t)
            if distance(f.embed(self.model.predicted_labels), y_t) < bar:
                return self.model
            self.idx += 1
            self.model = None
        return None


@dataclass(frozen=True)
class _Msg:
    tick: int
    sender: bytes
    seq: int
    kind: str
    payload: bytes


class _Bus:
    def __init__(self):
        self._queue: list[_Msg] = []
        self._seq = 0

    def send(self, tick: int, sender: PeerIdentity, kind: str, payload: bytes) -> None:
        self._queue.append(_Msg(tick, sender.address, self._seq, kind, payload))
        self._seq += 1

    def due(self, tick: int) -> list[_Msg]:
        out = sorted((m for m in self._queue if m.tick == tick), key=lambda m: (m.sender, m.seq))
        self._queue = [m for m in self._queue if m.tick != tick]
        return out


def _spawn_rngs(seq: np.random.SeedSequence, k: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in seq.spawn(k)]


def run_scenario(cfg: ScenarioConfig, del_cache: dict | None = None) -> ScenarioTrace:
    """Run a scenario to completion.

    ``del_cache`` (optional) maps ``(x_t bytes, n, train config)`` to a trained
    :class:`DelModel` so repeated runs can skip retraining.
    """
    cfg.validate()
    params = cfg.consensus
    id_seq, contrib_seq, improver_seq, adv_seq, vote_seq = np.random.SeedSequence(cfg.seed).spawn(5)
    id_rng = np.random.default_rng(id_seq)

    committer = keygen(id_rng)
    contributors = [keygen(id_rng) for _ in range(cfg.contributors)]
    validators = [keygen(id_rng) for _ in range(cfg.validators)]
    improvers = [_Improver(keygen(id_rng), s, r) for s, r in zip(cfg.improvers, _spawn_rngs(improver_seq, len(cfg.improvers)))]
    bad_signer = keygen(id_rng) if cfg.adversaries.bad_signature else None
    free_rider = keygen(id_rng) if cfg.adversaries.non_improver else None
    dup_voter = keygen(id_rng) if cfg.adversaries.duplicate_voter else None
    adv_rng = np.random.default_rng(adv_seq)
    vote_rng = np.random.default_rng(vote_seq)

    roles: dict[bytes, str] = {committer.address: "committer"}
    roles.update({c.address: f"contributor-{i}" for i, c in enumerate(contributors)})
    roles.update({v.address: f"validator-{i}" for i, v in enumerate(validators)})
    roles.update({imp.ident.address: f"improver-{i}" for i, imp in enumerate(improvers)})
    for ident, label in ((bad_signer, "bad-signature"), (free_rider, "non-improver"), (dup_voter, "duplicate-voter")):
        if ident is not None:
            roles[ident.address] = f"adversary-{label}"
    voters = validators + ([dup_voter] if dup_voter is not None else [])

    store = BlobStore()
    chain = Chain(params, store)
    bus = _Bus()
    events: list[TraceEvent] = []
    true_errors: dict[bytes, float] = {}
    stats: list[PeriodStat] = []

    # Setup: every contributor draws its private labels and trains an embedding.
    x_by_tuple: dict[bytes, LabelVector] = {}
    tuples_out: list[tuple[int, PeerIdentity, TestTuple]] = []
    for j, (ident, rng) in enumerate(zip(contributors, _spawn_rngs(contrib_seq, cfg.contributors))):
        x_t = LabelVector.random(cfg.m, cfg.num_classes, rng)
        train_cfg = DelTrainConfig(**{**asdict(cfg.del_train), "seed": int(rng.integers(2**31))})
        key = (x_t.labels.tobytes(), cfg.n, train_cfg)
        if del_cache is not None and key in del_cache:
            f = del_cache[key]
        else:
            log.info("training embedding for contributor %d", j)
            f, _ = train_del(x_t, cfg.n, train_cfg)
            if del_cache is not None:
                del_cache[key] = f
        z_doc = {"problem": cfg.problem_id, "contributor": j, "m": cfg.m, "inputs_seed": int(rng.integers(2**31))}
        z_ref = store.put(json.dumps(z_doc, sort_keys=True).encode())
        t = TestTuple(z_ref, store.put(f.to_bytes()), f.embed(x_t))
        x_by_tuple[t.digest()] = x_t
        tuples_out.append((min(j, params.t_p - 1), ident, t))

    def log_reject(tick: int, actor: bytes, code: str, subject: bytes) -> None:
        body = json.dumps({"code": code, "subject": subject.hex()}, sort_keys=True).encode()
        events.append(TraceEvent(tick, actor, "reject", body))

    definition = ProblemDefinition(cfg.problem_id, cfg.num_classes, cfg.m, {"kind": "synthetic", "m": cfg.m})
    first = params.t_p + 1
    last_tick = first + cfg.periods * params.t_b - 1
    f = x_t = y_t = None
    to_release: list[tuple[PeerIdentity, ModelArtifact, PoiProof]] = []
    released: list[tuple[ModelArtifact, PoiProof]] = []

    for tick in range(max(last_tick, params.t_p) + 1):
        # peers act
        for when, ident, t in tuples_out:
            if when == tick:
                bus.send(tick, ident, "tuple", t.to_bytes())
        if tick == params.t_p:
            bus.send(tick, committer, "commit_problem", definition.to_bytes())

        period, offset = divmod(tick - first, params.t_b)
        competing = tick >= first and period < cfg.periods and f is not None

        if competing and offset == 0:
            to_release, released = [], []
            d_c = chain.best_distance
            for imp in improvers:
                model = imp.candidate(x_t, f, y_t, d_c - params.delta, true_errors)
                if model is not None:
                    to_release.append((imp.ident, model, prove(model, f, imp.ident)))
            if bad_signer is not None:
                model = synth_model(x_t, max(0.0, d_c - 0.15), adv_rng, f"unsigned-{period}")
                true_errors[model.digest()] = error(model.predicted_labels, x_t)
                good = prove(model, f, bad_signer)
                sig = bytearray(good.signature)
                sig[int(adv_rng.integers(len(sig)))] ^= 1 << int(adv_rng.integers(8))
                to_release.append((bad_signer, model, PoiProof(good.g, good.y, good.pk, bytes(sig))))
            if free_rider is not None and isinstance(chain.blocks[-1], ImprovementBlock):
                best = ModelArtifact.from_bytes(store.get(chain.blocks[-1].proof.g))
                copy = ModelArtifact(best.predicted_labels, f"copy-{period}")
                true_errors[copy.digest()] = error(copy.predicted_labels, x_t)
                to_release.append((free_rider, copy, prove(copy, f, free_rider)))
            for ident, _, proof in to_release:
                bus.send(tick, ident, "register", proof.to_bytes())

        if competing and offset == 1:
            for ident, model, proof in to_release:
                store.put(model.to_bytes())
                bus.send(tick, ident, "release", proof.g)

        if competing and offset == 2:
            spread = params.t_b - MIN_T_B
            for v in voters:
                when = tick + int(vote_rng.integers(0, spread + 1))
                for model, proof in released:
                    try:
                        vp = verify(model, proof, f, y_t, chain.best_distance, params.delta, v)
                    except VerificationError as exc:
                        log_reject(tick, v.address, exc.code, proof.proof_id())
                        continue
                    for _ in range(2 if v is dup_voter else 1):
                        bus.send(when, v, "vote", vp.to_bytes())

        if competing and offset == params.t_b - 1:
            bus.send(tick, committer, "close", b"")

        # deliver
        for msg in bus.due(tick):
            ev = Event(tick, msg.sender, msg.kind, msg.payload)
            events.append(TraceEvent(tick, msg.sender, msg.kind, msg.payload))
            try:
                result = chain.apply(ev)
            except (ChainError, InsufficientImprovement) as exc:
                log_reject(tick, msg.sender, exc.code, ev.payload_digest)
                if msg.kind == "register":
                    to_release = [r for r in to_release if r[2].to_bytes() != msg.payload]
                continue
            if msg.kind == "release":
                released += [(mdl, prf) for _, mdl, prf in to_release if prf.g == msg.payload]
            elif msg.kind == "close":
                stats.append(_period_stat(len(stats), result, chain, true_errors))
                for imp in improvers:
                    if result is not None and imp.model is not None and result.proof.g == imp.model.digest():
                        imp.idx += 1
                        imp.model = None

        if f is None and chain.phase == "competition":
            primary = chain.problem.primary
            f = DelModel.from_bytes(store.get(primary.f_ref))
            x_t = x_by_tuple[primary.digest()]
            y_t = primary.y_t

    return ScenarioTrace(cfg, events, chain, store, stats, roles, true_errors)


def _period_stat(period: int, blk, chain: Chain, true_errors) -> PeriodStat:
    if blk is None:
        return PeriodStat(period, None, None, None, 0, 0)
    paid = next(c.units for c in chain.credits if c.block == blk.number and c.role == "improver")
    return PeriodStat(period, blk.proof.prover_address, blk.distance, true_errors.get(blk.proof.g), paid, len(blk.votes))
