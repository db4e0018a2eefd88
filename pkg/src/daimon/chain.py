"""The per-problem ledger.

A chain starts with one Problem block (problem definition plus test
tuples), followed by Improvement blocks, each recording the winning PoI
proof of one competition period together with its votes. All state changes
go through :meth:`Chain.apply` with an :class:`Event`, so an event log
replays to a bit-identical chain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Iterable

import numpy as np

from . import codec
from .codec import digest
from .embedding import distance
from .numerics import ContractError, reg_inc_beta
from .poi import BlobStore, InsufficientImprovement, PoiProof, VerificationProof

ZERO_HASH = bytes(codec.DIGEST_SIZE)
TOKEN_DECIMALS = 12
UNITS_PER_TOKEN = 10**TOKEN_DECIMALS


class ChainError(Exception):
    """A state transition was refused."""

    code = "ChainError"


class CommitError(ChainError):
    code = "CommitError"


class IntegrityError(ChainError):
    code = "IntegrityError"

    def __init__(self, index: int, reason: str):
        super().__init__(f"block {index}: {reason}")
        self.index = index
        self.reason = reason


class PhaseError(ChainError):
    code = "PhaseError"


class RegistrationError(ChainError):
    code = "RegistrationError"


class VoteRejected(ChainError):
    code = "VoteRejected"


# --- rewards ----------------------------------------------------------------


def reward(d: float, d_c: float, a: float, *, strict: bool = True) -> float:
    """Improver reward ``I_{1-d}(a, 1/2) - I_{1-d_c}(a, 1/2)``.

    Requires ``0 <= d < d_c <= 1``; ``strict=False`` also admits ``d == d_c``.
    """
    if not a > 0:
        raise ContractError(f"reward shape a must be positive, got {a}")
    ok = 0.0 <= d < d_c <= 1.0 if strict else 0.0 <= d <= d_c <= 1.0
    if not ok:
        raise ContractError(f"reward needs 0 <= d < d_c <= 1, got d={d}, d_c={d_c}")
    return reg_inc_beta(1.0 - d, a, 0.5) - reg_inc_beta(1.0 - d_c, a, 0.5)


def validator_reward(base: float, s: int) -> float:
    """Share of the ``s``-th validator (1-based): ``base * 2**-s``."""
    if int(s) != s or s < 1:
        raise ContractError(f"validator position must be a positive integer, got {s}")
    return base * math.ldexp(1.0, -int(s))


def to_units(amount: float) -> int:
    """Token amount -> integer units of 1e-12, rounded half to even."""
    q = Decimal(amount).quantize(Decimal(1).scaleb(-TOKEN_DECIMALS), rounding=ROUND_HALF_EVEN)
    return int(q.scaleb(TOKEN_DECIMALS))


def format_units(units: int) -> str:
    return format(Decimal(int(units)).scaleb(-TOKEN_DECIMALS), f".{TOKEN_DECIMALS}f")


# --- ledger records ---------------------------------------------------------


@dataclass(frozen=True)
class ConsensusParams:
    t_p: int = 2
    t_b: int = 4
    delta: float = 0.005
    reward_shape: float = 3.0
    d0: float = 1.0

    def __post_init__(self):
        if int(self.t_p) < 1 or int(self.t_b) < 1:
            raise ContractError("T_p and T_b must be at least one tick")
        if not self.delta >= 0:
            raise ContractError("delta must be >= 0")
        if not self.reward_shape > 0:
            raise ContractError("reward shape a must be positive")
        if not 0 < self.d0 <= 1:
            raise ContractError("initial best distance must lie in (0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "ConsensusParams":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown consensus options: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return {"t_p": self.t_p, "t_b": self.t_b, "delta": self.delta, "reward_shape": self.reward_shape, "d0": self.d0}


@dataclass(frozen=True)
class ProblemDefinition:
    identifier: str
    num_classes: int
    m: int
    input_spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2 or self.m < 1:
            raise ContractError("problem needs C >= 2 and m >= 1")

    def to_bytes(self) -> bytes:
        spec = json.dumps(self.input_spec, sort_keys=True, separators=(",", ":"))
        return codec.pack(
            codec.enc_str(self.identifier), codec.enc_u64(self.num_classes), codec.enc_u64(self.m), codec.enc_str(spec)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProblemDefinition":
        ident, c, m, spec = codec.unpack(data, 4)
        return cls(ident.decode(), codec.dec_u64(c), codec.dec_u64(m), json.loads(spec))

    def to_dict(self) -> dict:
        return {"identifier": self.identifier, "num_classes": self.num_classes, "m": self.m, "input_spec": self.input_spec}

    @classmethod
    def from_dict(cls, doc: dict) -> "ProblemDefinition":
        return cls(doc["identifier"], int(doc["num_classes"]), int(doc["m"]), doc.get("input_spec", {}))


@dataclass(frozen=True, eq=False)
class TestTuple:
    """References to the test inputs and embedding model, plus ``y_t``."""

    __test__ = False  # not a pytest class

    z_ref: bytes
    f_ref: bytes
    y_t: np.ndarray

    def __post_init__(self):
        y = np.array(self.y_t, dtype=np.float64)
        if y.ndim != 1 or abs(float(np.linalg.norm(y)) - 1.0) > 1e-9:
            raise ContractError("y_t must be a unit-norm vector")
        y.flags.writeable = False
        object.__setattr__(self, "y_t", y)

    def to_bytes(self) -> bytes:
        return codec.pack(self.z_ref, self.f_ref, codec.enc_vec(self.y_t))

    @classmethod
    def from_bytes(cls, data: bytes) -> "TestTuple":
        z, f, y = codec.unpack(data, 3)
        return cls(z, f, codec.dec_vec(y))

    def digest(self) -> bytes:
        return digest(self.to_bytes())

    def __eq__(self, other):
        return isinstance(other, TestTuple) and self.to_bytes() == other.to_bytes()

    def to_dict(self) -> dict:
        return {"z_ref": self.z_ref.hex(), "f_ref": self.f_ref.hex(), "y_t": [repr(float(v)) for v in self.y_t]}

    @classmethod
    def from_dict(cls, doc: dict) -> "TestTuple":
        return cls(bytes.fromhex(doc["z_ref"]), bytes.fromhex(doc["f_ref"]), np.array([float(v) for v in doc["y_t"]]))


@dataclass(frozen=True, eq=False)
class ProblemBlock:
    number: int
    parent: bytes
    definition: ProblemDefinition
    tuples: tuple[TestTuple, ...]
    hash: bytes = b""

    kind = "problem"

    def content_bytes(self) -> bytes:
        return codec.pack(
            b"daimon/block/problem/v1",
            codec.enc_u64(self.number),
            self.parent,
            self.definition.to_bytes(),
            codec.pack_list([t.to_bytes() for t in self.tuples]),
        )

    def compute_hash(self) -> bytes:
        return digest(self.content_bytes())

    @classmethod
    def build(cls, number, parent, definition, tuples) -> "ProblemBlock":
        blk = cls(number, parent, definition, tuple(tuples))
        object.__setattr__(blk, "hash", blk.compute_hash())
        return blk

    @property
    def primary(self) -> TestTuple:
        return self.tuples[0]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "number": self.number,
            "parent": self.parent.hex(),
            "definition": self.definition.to_dict(),
            "tuples": [t.to_dict() for t in self.tuples],
            "hash": self.hash.hex(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProblemBlock":
        return cls(
            int(doc["number"]),
            bytes.fromhex(doc["parent"]),
            ProblemDefinition.from_dict(doc["definition"]),
            tuple(TestTuple.from_dict(t) for t in doc["tuples"]),
            bytes.fromhex(doc["hash"]),
        )


@dataclass(frozen=True, eq=False)
class ImprovementBlock:
    number: int
    parent: bytes
    proof: PoiProof
    votes: tuple[VerificationProof, ...]
    distance: float
    hash: bytes = b""

    kind = "improvement"

    def content_bytes(self) -> bytes:
        return codec.pack(
            b"daimon/block/improvement/v1",
            codec.enc_u64(self.number),
            self.parent,
            self.proof.to_bytes(),
            codec.pack_list([v.to_bytes() for v in self.votes]),
            codec.enc_f64(self.distance),
        )

    def compute_hash(self) -> bytes:
        return digest(self.content_bytes())

    @classmethod
    def build(cls, number, parent, proof, votes, d) -> "ImprovementBlock":
        blk = cls(number, parent, proof, tuple(votes), float(d))
        object.__setattr__(blk, "hash", blk.compute_hash())
        return blk

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "number": self.number,
            "parent": self.parent.hex(),
            "proof": self.proof.to_dict(),
            "votes": [v.to_dict() for v in self.votes],
            "distance": repr(self.distance),
            "hash": self.hash.hex(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ImprovementBlock":
        return cls(
            int(doc["number"]),
            bytes.fromhex(doc["parent"]),
            PoiProof.from_dict(doc["proof"]),
            tuple(VerificationProof.from_dict(v) for v in doc["votes"]),
            float(doc["distance"]),
            bytes.fromhex(doc["hash"]),
        )


Block = ProblemBlock | ImprovementBlock


def block_from_dict(doc: dict) -> Block:
    kind = doc.get("kind")
    if kind == ProblemBlock.kind:
        return ProblemBlock.from_dict(doc)
    if kind == ImprovementBlock.kind:
        return ImprovementBlock.from_dict(doc)
    raise ValueError(f"unknown block kind {kind!r}")


def verify_chain(blocks: list[Block], params: ConsensusParams | None = None) -> None:
    """Full-chain check; raises :class:`IntegrityError` at the first bad block.

    Always checks numbering, parent links and recomputed hashes. With
    ``params`` it also re-derives every distance and checks vote validity
    and the strict-improvement rule.
    """
    parent = ZERO_HASH
    best = params.d0 if params else None
    y_t = None
    for i, blk in enumerate(blocks):
        if blk.number != i:
            raise IntegrityError(i, f"block number {blk.number} out of sequence")
        if blk.parent != parent:
            raise IntegrityError(i, "parent hash does not match previous block")
        if blk.compute_hash() != blk.hash:
            raise IntegrityError(i, "block hash does not match contents")
        if (i == 0) != isinstance(blk, ProblemBlock):
            raise IntegrityError(i, "chain must start with exactly one Problem block")
        if isinstance(blk, ProblemBlock):
            if not blk.tuples:
                raise IntegrityError(i, "problem block carries no test tuples")
            y_t = blk.primary.y_t
        else:
            _check_improvement(i, blk, y_t, best, params)
            if params:
                best = blk.distance
        parent = blk.hash


def _check_improvement(i, blk: ImprovementBlock, y_t, best, params):
    if not blk.votes:
        raise IntegrityError(i, "improvement block has no verification proofs")
    addrs = [v.verifier_address for v in blk.votes]
    if len(set(addrs)) != len(addrs):
        raise IntegrityError(i, "duplicate verifier in block")
    for v in blk.votes:
        if v.inner != blk.proof:
            raise IntegrityError(i, "verification proof references a different PoI proof")
        if not v.signature_ok():
            raise IntegrityError(i, "invalid signature on a verification proof")
    if not blk.proof.signature_ok():
        raise IntegrityError(i, "invalid prover signature")
    if y_t is not None and distance(blk.proof.y, y_t) != blk.distance:
        raise IntegrityError(i, "recorded distance differs from d(y, y_t)")
    if params is not None and not blk.distance < best - params.delta:
        raise IntegrityError(i, "distance does not improve on the previous best by more than delta")


def dump_jsonl(blocks: Iterable[Block], path) -> None:
    with open(path, "w") as fh:
        for blk in blocks:
            fh.write(json.dumps(blk.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def load_jsonl(path) -> list[Block]:
    blocks = []
    for i, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        try:
            blocks.append(block_from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError, ContractError) as exc:
            raise IntegrityError(len(blocks), f"unreadable block record on line {i + 1}: {exc}") from exc
    return blocks


# --- consensus operations ---------------------------------------------------


@dataclass
class Submission:
    proof: PoiProof
    first_tick: int
    votes: list[VerificationProof] = field(default_factory=list)

    def unique_voters(self) -> list[bytes]:
        seen: dict[bytes, None] = {}
        for v in self.votes:
            seen.setdefault(v.verifier_address, None)
        return list(seen)

    def unique_votes(self) -> list[VerificationProof]:
        out, seen = [], set()
        for v in self.votes:
            if v.verifier_address not in seen:
                seen.add(v.verifier_address)
                out.append(v)
        return out


def tally(submissions: Iterable[Submission]) -> Submission | None:
    """Submission with the most distinct verifier addresses.

    Ties go to the earliest first-submission tick, then the smallest model
    digest. Submissions without votes never win.
    """
    ranked = [s for s in submissions if s.votes]
    if not ranked:
        return None
    return min(ranked, key=lambda s: (-len(s.unique_voters()), s.first_tick, s.proof.g))


def commit_problem_block(pending: list[tuple[int, TestTuple]], definition: ProblemDefinition, store: BlobStore) -> ProblemBlock:
    """Genesis block from ``(submission tick, tuple)`` pairs."""
    if not pending:
        raise CommitError("no test tuples were submitted during the problem period")
    for _, t in pending:
        for ref in (t.z_ref, t.f_ref):
            if ref not in store:
                raise CommitError(f"test tuple references missing blob {ref.hex()}")
    ordered = sorted(pending, key=lambda item: (item[0], item[1].digest()))
    return ProblemBlock.build(0, ZERO_HASH, definition, [t for _, t in ordered])


@dataclass(frozen=True)
class Credit:
    block: int
    address: bytes
    units: int
    role: str  # "improver" | "validator"
    position: int = 0


def commit_improvement_block(winner: Submission, chain: "Chain") -> ImprovementBlock:
    """Append the winner's block, move the best distance, and pay out."""
    return chain.commit_improvement(winner)


@dataclass(frozen=True)
class Event:
    tick: int
    actor: bytes
    kind: str
    payload: bytes = b""

    KINDS = ("tuple", "commit_problem", "register", "release", "vote", "close")

    @property
    def payload_digest(self) -> bytes:
        return digest(self.payload)

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "actor": self.actor.hex(),
            "kind": self.kind,
            "payload_digest": self.payload_digest.hex(),
            "payload": self.payload.hex(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Event":
        ev = cls(int(doc["tick"]), bytes.fromhex(doc["actor"]), doc["kind"], bytes.fromhex(doc.get("payload", "")))
        if "payload_digest" in doc and bytes.fromhex(doc["payload_digest"]) != ev.payload_digest:
            raise ValueError(f"event at tick {ev.tick}: payload digest mismatch")
        return ev


class Chain:
    """Single-writer consensus state machine for one problem."""

    def __init__(self, params: ConsensusParams, store: BlobStore):
        self.params = params
        self.store = store
        self.blocks: list[Block] = []
        self.best_distance = params.d0
        self.balances: dict[bytes, int] = {}
        self.credits: list[Credit] = []
        self.pending_tuples: list[tuple[int, TestTuple]] = []
        self.period = 0
        self._registered: dict[bytes, tuple[int, PoiProof]] = {}  # model digest -> (tick, proof)
        self._released: set[bytes] = set()
        self._submissions: dict[bytes, Submission] = {}
        self._double_voters: dict[bytes, set[bytes]] = {}  # proof id -> addresses

    # -- state ---------------------------------------------------------------

    @property
    def phase(self) -> str:
        return "problem" if not self.blocks else "competition"

    @property
    def head(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    @property
    def problem(self) -> ProblemBlock:
        if not self.blocks:
            raise PhaseError("no Problem block committed yet")
        return self.blocks[0]

    @property
    def y_t(self) -> np.ndarray:
        return self.problem.primary.y_t

    def submissions(self) -> list[Submission]:
        return list(self._submissions.values())

    def distance_of(self, proof: PoiProof) -> float:
        return distance(proof.y, self.y_t)

    # -- problem period ------------------------------------------------------

    def submit_tuple(self, tick: int, t: TestTuple) -> None:
        if self.phase != "problem":
            raise PhaseError("test tuples are only accepted during the problem period")
        self.pending_tuples.append((tick, t))

    def commit_problem(self, definition: ProblemDefinition) -> ProblemBlock:
        if self.phase != "problem":
            raise PhaseError("problem block already committed")
        blk = commit_problem_block(self.pending_tuples, definition, self.store)
        self.blocks.append(blk)
        self.pending_tuples = []
        return blk

    # -- competition period --------------------------------------------------

    def register_proof(self, tick: int, proof: PoiProof) -> None:
        """Register a proof by model digest before the model is released.

        Only the shape is checked here; validity is for validators to judge.
        """
        if self.phase != "competition":
            raise PhaseError("proofs are only accepted during a competition period")
        if proof.g in self._registered:
            raise RegistrationError(f"model digest {proof.g.hex()} already registered")
        if proof.y.shape != self.y_t.shape:
            raise RegistrationError("embedding has the wrong dimension")
        self._registered[proof.g] = (tick, proof)

    def release_model(self, tick: int, g: bytes) -> None:
        if g not in self._registered:
            raise RegistrationError("model released before its digest was registered")
        reg_tick, _ = self._registered[g]
        if tick <= reg_tick:
            raise RegistrationError("model must be released at least one tick after registration")
        if g not in self.store:
            raise RegistrationError("released model is not in the blob store")
        self._released.add(g)

    def submit_vote(self, tick: int, vote: VerificationProof) -> None:
        if self.phase != "competition":
            raise PhaseError("votes are only accepted during a competition period")
        if not vote.signature_ok():
            raise VoteRejected("BadSignature: verification proof does not verify")
        proof = vote.inner
        reg = self._registered.get(proof.g)
        if reg is None or reg[1] != proof:
            raise VoteRejected("vote references an unregistered PoI proof")
        if proof.g not in self._released:
            raise VoteRejected("vote on a model that has not been released")
        if vote.d_c != self.best_distance or vote.delta != self.params.delta:
            raise VoteRejected("vote was cast against a stale best distance or a different delta")
        pid = proof.proof_id()
        sub = self._submissions.get(pid)
        if sub is None:
            sub = self._submissions[pid] = Submission(proof, reg[0])
        if vote.verifier_address in sub.unique_voters():
            self._double_voters.setdefault(pid, set()).add(vote.verifier_address)
        sub.votes.append(vote)

    def eligible(self, sub: Submission) -> bool:
        return self.distance_of(sub.proof) < self.best_distance - self.params.delta

    def close_period(self) -> ImprovementBlock | None:
        """Commit the best-voted improving submission, if any, and start the next period."""
        if self.phase != "competition":
            raise PhaseError("no competition period is open")
        winner = tally(s for s in self._submissions.values() if self.eligible(s))
        blk = self.commit_improvement(winner) if winner is not None else None
        self._submissions.clear()
        self._registered.clear()
        self._released.clear()
        self._double_voters.clear()
        self.period += 1
        return blk

    def commit_improvement(self, winner: Submission) -> ImprovementBlock:
        if self.phase != "competition":
            raise PhaseError("no Problem block committed yet")
        if self.blocks[-1].hash != self.blocks[-1].compute_hash():
            raise IntegrityError(len(self.blocks) - 1, "head block hash does not match contents")
        votes = winner.unique_votes()
        if not votes:
            raise CommitError("winner has no verification proofs")
        d = self.distance_of(winner.proof)
        d_c = self.best_distance
        if not d < d_c - self.params.delta:
            raise InsufficientImprovement(f"stale winner: d={d:.6f} is not below {d_c - self.params.delta:.6f}")
        blk = ImprovementBlock.build(len(self.blocks), self.head, winner.proof, votes, d)
        self.blocks.append(blk)
        self.best_distance = d

        base = reward(d, d_c, self.params.reward_shape)
        self._credit(Credit(blk.number, winner.proof.prover_address, to_units(base), "improver"))
        forfeited = self._double_voters.get(winner.proof.proof_id(), set())
        for s, vote in enumerate(votes, start=1):
            if vote.verifier_address in forfeited:
                continue
            self._credit(Credit(blk.number, vote.verifier_address, to_units(validator_reward(base, s)), "validator", s))
        return blk

    def _credit(self, c: Credit) -> None:
        self.credits.append(c)
        self.balances[c.address] = self.balances.get(c.address, 0) + c.units

    # -- event interface -----------------------------------------------------

    def apply(self, ev: Event):
        """Apply one logged event; returns whatever the transition produced."""
        if ev.kind == "tuple":
            return self.submit_tuple(ev.tick, TestTuple.from_bytes(ev.payload))
        if ev.kind == "commit_problem":
            return self.commit_problem(ProblemDefinition.from_bytes(ev.payload))
        if ev.kind == "register":
            return self.register_proof(ev.tick, PoiProof.from_bytes(ev.payload))
        if ev.kind == "release":
            return self.release_model(ev.tick, ev.payload)
        if ev.kind == "vote":
            return self.submit_vote(ev.tick, VerificationProof.from_bytes(ev.payload))
        if ev.kind == "close":
            return self.close_period()
        raise ValueError(f"unknown event kind {ev.kind!r}")


def replay(events: Iterable[Event], params: ConsensusParams, store: BlobStore) -> Chain:
    """Rebuild a chain from its event log. Refused transitions are skipped,
    exactly as they were when first applied."""
    chain = Chain(params, store)
    for ev in events:
        if ev.kind not in Event.KINDS:
            continue
        try:
            chain.apply(ev)
        except (ChainError, InsufficientImprovement):
            pass
    return chain

