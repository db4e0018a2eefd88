import hashlib
import json
import struct

import numpy as np
import pytest

from daimon import chain as ch
from daimon.chain import (
    Chain,
    CommitError,
    ConsensusParams,
    Event,
    ImprovementBlock,
    IntegrityError,
    PhaseError,
    ProblemBlock,
    ProblemDefinition,
    RegistrationError,
    Submission,
    TestTuple,
    VoteRejected,
    ZERO_HASH,
    dump_jsonl,
    format_units,
    load_jsonl,
    replay,
    reward,
    tally,
    to_units,
    validator_reward,
    verify_chain,
)
from daimon.numerics import ContractError
from daimon.poi import BlobStore, InsufficientImprovement, keygen, prove, verify
from daimon.sim import synth_model

PARAMS = ConsensusParams(t_p=2, t_b=6, delta=0.005, reward_shape=3.0, d0=1.0)


# --- rewards ---------------------------------------------------------------------


def test_reward_boundaries():
    for a in (0.5, 1.0, 3.0, 10.0):
        assert reward(0.0, 1.0, a) == 1.0
        assert reward(0.4, 0.4, a, strict=False) == 0.0


def test_reward_matches_oracle(oracles):
    for key, want in oracles["reward"].items():
        d, d_c = map(float, key.split(","))
        got = reward(d, d_c, 3.0, strict=d < d_c)
        assert got == pytest.approx(float(want), rel=1e-12, abs=1e-15), key


def test_reward_monotone():
    ds = np.linspace(0.0, 0.79, 40)
    vals = [reward(d, 0.8, 3.0) for d in ds]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    # wider gap at the same d pays more
    assert reward(0.2, 0.9, 3.0) > reward(0.2, 0.5, 3.0) > reward(0.2, 0.3, 3.0) > 0


def test_reward_contract():
    with pytest.raises(ContractError):
        reward(0.5, 0.5, 3.0)
    with pytest.raises(ContractError):
        reward(0.6, 0.5, 3.0)
    with pytest.raises(ContractError):
        reward(-0.1, 0.5, 3.0)
    with pytest.raises(ContractError):
        reward(0.1, 1.1, 3.0)
    with pytest.raises(ContractError):
        reward(0.1, 0.5, 0.0)


def test_validator_reward():
    assert validator_reward(1.0, 1) == 0.5
    assert validator_reward(1.0, 3) == 0.125
    for k in (1, 3, 10, 50):
        assert sum(validator_reward(1.0, s) for s in range(1, k + 1)) == 1.0 - 2.0**-k
    for bad in (0, -1, 1.5):
        with pytest.raises(ContractError):
            validator_reward(1.0, bad)


def test_units():
    assert to_units(1.0) == 10**12
    assert to_units(0.5e-12) == 0  # half to even
    assert to_units(1.5e-12) == 2
    assert to_units(0.125) == 125_000_000_000
    assert format_units(0) == "0.000000000000"
    assert format_units(1_500_000_000_000) == "1.500000000000"


def test_consensus_params_contract():
    with pytest.raises(ContractError):
        ConsensusParams(t_b=0)
    with pytest.raises(ContractError):
        ConsensusParams(delta=-1e-3)
    with pytest.raises(ContractError):
        ConsensusParams(reward_shape=0)
    with pytest.raises(ContractError):
        ConsensusParams(d0=0.0)
    with pytest.raises(ContractError):
        ConsensusParams.from_dict({"t_b": 4, "bogus": 1})
    assert ConsensusParams.from_dict(PARAMS.to_dict()) == PARAMS


# --- a small chain built by hand -------------------------------------------------


class World:
    """Problem block from ``small_del`` plus a few keyed peers."""

    def __init__(self, small_del, params=PARAMS, seed=0):
        self.f = small_del["model"]
        self.x_t = small_del["x_t"]
        self.rng = np.random.default_rng(seed)
        self.peers = [keygen(self.rng) for _ in range(6)]
        self.store = BlobStore()
        self.chain = Chain(params, self.store)
        self.tuple = self.make_tuple(b"inputs-0")
        self.chain.submit_tuple(0, self.tuple)
        self.definition = ProblemDefinition("p", self.x_t.num_classes, self.x_t.m)
        self.chain.commit_problem(self.definition)

    def make_tuple(self, z: bytes) -> TestTuple:
        return TestTuple(self.store.put(z), self.store.put(self.f.to_bytes()), self.f.embed(self.x_t))

    def submit(self, tick, err, prover, meta=""):
        model = synth_model(self.x_t, err, self.rng, meta)
        proof = prove(model, self.f, prover)
        self.chain.register_proof(tick, proof)
        self.store.put(model.to_bytes())
        self.chain.release_model(tick + 1, proof.g)
        return model, proof

    def vote(self, tick, model, proof, voter):
        v = verify(model, proof, self.f, self.chain.y_t, self.chain.best_distance, self.chain.params.delta, voter)
        self.chain.submit_vote(tick, v)
        return v


def test_problem_block_genesis(small_del):
    w = World(small_del)
    blk = w.chain.blocks[0]
    assert isinstance(blk, ProblemBlock)
    assert blk.number == 0 and blk.parent == ZERO_HASH
    assert w.chain.phase == "competition"
    verify_chain(w.chain.blocks)


def test_problem_block_errors(small_del):
    store = BlobStore()
    defn = ProblemDefinition("p", 10, 200)
    with pytest.raises(CommitError):
        ch.commit_problem_block([], defn, store)
    y = small_del["model"].embed(small_del["x_t"])
    t = TestTuple(b"\x01" * 32, b"\x02" * 32, y)
    with pytest.raises(CommitError):
        ch.commit_problem_block([(0, t)], defn, store)


def test_problem_tuples_canonical_order(small_del):
    store = BlobStore()
    f, x_t = small_del["model"], small_del["x_t"]
    f_ref = store.put(f.to_bytes())
    ts = [TestTuple(store.put(b"z%d" % i), f_ref, f.embed(x_t)) for i in range(4)]
    pending = [(1, ts[0]), (0, ts[1]), (1, ts[2]), (0, ts[3])]
    blk = ch.commit_problem_block(pending, ProblemDefinition("p", 10, 200), store)
    # replay oracle: sort the raw (tick, digest) log independently
    want = sorted(pending, key=lambda p: (p[0], hashlib.sha256(p[1].to_bytes()).digest()))
    assert [t.to_bytes() for t in blk.tuples] == [t.to_bytes() for _, t in want]
    assert blk.tuples[0].to_bytes() in {ts[1].to_bytes(), ts[3].to_bytes()}


def test_phase_rules(small_del):
    w = World(small_del)
    with pytest.raises(PhaseError):
        w.chain.submit_tuple(5, w.tuple)
    with pytest.raises(PhaseError):
        w.chain.commit_problem(w.definition)
    fresh = Chain(PARAMS, BlobStore())
    with pytest.raises(PhaseError):
        fresh.close_period()


def test_first_improvement_and_rewards(small_del):
    w = World(small_del)
    prover, v1, v2 = w.peers[:3]
    model, proof = w.submit(3, 0.3, prover)
    w.vote(5, model, proof, v1)
    w.vote(6, model, proof, v2)
    blk = w.chain.close_period()
    assert isinstance(blk, ImprovementBlock) and blk.number == 1
    assert blk.parent == w.chain.blocks[0].hash
    d = blk.distance
    assert w.chain.best_distance == d
    base = reward(d, 1.0, 3.0)
    bal = w.chain.balances
    assert bal[prover.address] == to_units(base)
    assert bal[v1.address] == to_units(base / 2)
    assert bal[v2.address] == to_units(base / 4)
    verify_chain(w.chain.blocks, PARAMS)


def test_insufficient_improvement_at_commit(small_del):
    w = World(small_del)
    model, proof = w.submit(3, 0.3, w.peers[0])
    w.vote(5, model, proof, w.peers[1])
    w.chain.close_period()
    best = w.chain.best_distance
    # a submission sitting at best - delta/2: its votes were cast before the bar moved
    sub = Submission(proof, 3, [w.chain.blocks[1].votes[0]])
    assert w.chain.distance_of(proof) > best - PARAMS.delta / 2
    with pytest.raises(InsufficientImprovement):
        ch.commit_improvement_block(sub, w.chain)


def test_release_rule(small_del):
    w = World(small_del)
    model = synth_model(w.x_t, 0.3, w.rng)
    proof = prove(model, w.f, w.peers[0])
    w.store.put(model.to_bytes())
    with pytest.raises(RegistrationError):
        w.chain.release_model(3, proof.g)  # not registered yet
    w.chain.register_proof(3, proof)
    with pytest.raises(RegistrationError):
        w.chain.release_model(3, proof.g)  # same tick
    with pytest.raises(RegistrationError):
        w.chain.register_proof(4, proof)  # same digest twice
    w.chain.release_model(4, proof.g)


def test_vote_before_release_rejected(small_del):
    w = World(small_del)
    model = synth_model(w.x_t, 0.3, w.rng)
    proof = prove(model, w.f, w.peers[0])
    w.chain.register_proof(3, proof)
    v = verify(model, proof, w.f, w.chain.y_t, 1.0, PARAMS.delta, w.peers[1])
    with pytest.raises(VoteRejected):
        w.chain.submit_vote(3, v)


def test_vote_with_stale_bar_rejected(small_del):
    w = World(small_del)
    model, proof = w.submit(3, 0.3, w.peers[0])
    v = verify(model, proof, w.f, w.chain.y_t, 0.9, PARAMS.delta, w.peers[1])
    with pytest.raises(VoteRejected):
        w.chain.submit_vote(5, v)


def test_vote_bad_signature_rejected(small_del):
    w = World(small_del)
    model, proof = w.submit(3, 0.3, w.peers[0])
    v = verify(model, proof, w.f, w.chain.y_t, 1.0, PARAMS.delta, w.peers[1])
    sig = bytearray(v.signature)
    sig[0] ^= 1
    forged = type(v)(v.inner, v.d_c, v.delta, v.pk, bytes(sig))
    with pytest.raises(VoteRejected):
        w.chain.submit_vote(5, forged)


def test_double_voter_counted_once_and_forfeits(small_del):
    w = World(small_del)
    prover, v1, v2 = w.peers[:3]
    model, proof = w.submit(3, 0.3, prover)
    w.vote(5, model, proof, v1)
    w.vote(5, model, proof, v1)
    w.vote(6, model, proof, v2)
    (sub,) = w.chain.submissions()
    assert len(sub.votes) == 3 and len(sub.unique_voters()) == 2
    blk = w.chain.close_period()
    assert len(blk.votes) == 2
    assert v1.address not in w.chain.balances
    base = reward(blk.distance, 1.0, 3.0)
    # the honest second voter keeps the s=2 share
    assert w.chain.balances[v2.address] == to_units(base / 4)


def test_empty_period_produces_no_block(small_del):
    w = World(small_del)
    assert w.chain.close_period() is None
    assert len(w.chain.blocks) == 1 and w.chain.period == 1
    # a registered but unvoted proof does not win either
    w.submit(10, 0.3, w.peers[0])
    assert w.chain.close_period() is None


# --- tally -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def proofs(small_del):
    f, x_t = small_del["model"], small_del["x_t"]
    rng = np.random.default_rng(11)
    peers = [keygen(rng) for _ in range(5)]
    y_t = f.embed(x_t)
    out = []
    for i in range(3):
        model = synth_model(x_t, 0.2 + 0.1 * i, rng)
        p = prove(model, f, peers[0])
        votes = [verify(model, p, f, y_t, 1.0, 0.005, v) for v in peers[1:]]
        out.append((p, votes))
    return out


def test_tally_most_unique_votes(proofs):
    (pa, va), (pb, vb), _ = proofs
    a = Submission(pa, 4, va[:3])
    b = Submission(pb, 2, vb[:2])
    assert tally([a, b]) is a
    assert tally([]) is None
    assert tally([Submission(pa, 1, [])]) is None


def test_tally_duplicate_address_counts_once(proofs):
    (pa, va), (pb, vb), _ = proofs
    a = Submission(pa, 1, [va[0], va[0], va[1]])
    assert len(a.unique_voters()) == 2
    b = Submission(pb, 5, vb[:3])
    assert tally([a, b]) is b


def test_tally_tie_breaks(proofs):
    (pa, va), (pb, vb), (pc, vc) = proofs
    a = Submission(pa, 5, va[:2])
    b = Submission(pb, 3, vb[:2])
    assert tally([a, b]) is b and tally([b, a]) is b
    # same tick: smallest model digest
    x = Submission(pa, 3, va[:2])
    y = Submission(pc, 3, vc[:2])
    want = x if pa.g < pc.g else y
    assert tally([x, y]) is want and tally([y, x]) is want


# --- persistence and integrity ---------------------------------------------------


def _five_block_chain(small_del):
    w = World(small_del, seed=4)
    for k, err in enumerate((0.5, 0.35, 0.2, 0.08)):
        t0 = 10 * k + 3
        model, proof = w.submit(t0, err, w.peers[k % 2])
        for j, v in enumerate(w.peers[2:5]):
            w.vote(t0 + 2 + j, model, proof, v)
        assert w.chain.close_period() is not None
    assert len(w.chain.blocks) == 5
    return w


@pytest.fixture(scope="module")
def five(small_del):
    return _five_block_chain(small_del)


def _lp(*fields):
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def _rehash(doc: dict) -> bytes:
    """Re-derive a block hash from its JSON record without the package codec."""
    u64 = lambda i: struct.pack(">Q", int(i))  # noqa: E731
    vec = lambda v: b"".join(struct.pack(">d", float(x)) for x in v)  # noqa: E731
    lst = lambda items: _lp(u64(len(items)), *items)  # noqa: E731
    h = bytes.fromhex

    def poi(p):
        return _lp(_lp(b"daimon/poi/v1", h(p["g"]), vec(p["y"]), h(p["pk"])), h(p["signature"]))

    if doc["kind"] == "problem":
        d = doc["definition"]
        spec = json.dumps(d["input_spec"], sort_keys=True, separators=(",", ":")).encode()
        defn = _lp(d["identifier"].encode(), u64(d["num_classes"]), u64(d["m"]), spec)
        tuples = [_lp(h(t["z_ref"]), h(t["f_ref"]), vec(t["y_t"])) for t in doc["tuples"]]
        body = _lp(b"daimon/block/problem/v1", u64(doc["number"]), h(doc["parent"]), defn, lst(tuples))
    else:
        votes = [
            _lp(
                _lp(
                    b"daimon/vote/v1",
                    poi(v["inner"]),
                    struct.pack(">d", float(v["d_c"])),
                    struct.pack(">d", float(v["delta"])),
                    h(v["pk"]),
                ),
                h(v["signature"]),
            )
            for v in doc["votes"]
        ]
        body = _lp(
            b"daimon/block/improvement/v1",
            u64(doc["number"]),
            h(doc["parent"]),
            poi(doc["proof"]),
            lst(votes),
            struct.pack(">d", float(doc["distance"])),
        )
    return hashlib.sha256(body).digest()


def test_rehash_oracle(five, tmp_path):
    path = tmp_path / "chain.jsonl"
    dump_jsonl(five.chain.blocks, path)
    parent = bytes(32)
    for line in path.read_text().splitlines():
        doc = json.loads(line)
        assert bytes.fromhex(doc["parent"]) == parent
        assert _rehash(doc).hex() == doc["hash"]
        parent = bytes.fromhex(doc["hash"])


def test_jsonl_round_trip(five, tmp_path):
    path = tmp_path / "chain.jsonl"
    dump_jsonl(five.chain.blocks, path)
    back = load_jsonl(path)
    assert [b.hash for b in back] == [b.hash for b in five.chain.blocks]
    assert [b.content_bytes() for b in back] == [b.content_bytes() for b in five.chain.blocks]
    verify_chain(back, PARAMS)


def test_best_distance_strictly_decreases(five):
    ds = [b.distance for b in five.chain.blocks[1:]]
    prev = PARAMS.d0
    for d in ds:
        assert d < prev - PARAMS.delta
        prev = d


def test_balances_equal_sum_of_credits(five):
    total = {}
    for c in five.chain.credits:
        assert c.units >= 0
        total[c.address] = total.get(c.address, 0) + c.units
    assert total == five.chain.balances


@pytest.mark.parametrize("index", [0, 1, 2, 3, 4])
def test_tamper_detected_at_index(five, index):
    blocks = list(five.chain.blocks)
    blk = blocks[index]
    if isinstance(blk, ImprovementBlock):
        forged = ImprovementBlock(blk.number, blk.parent, blk.proof, blk.votes, blk.distance + 1e-12, blk.hash)
    else:
        t = blk.tuples[0]
        forged = ProblemBlock(blk.number, blk.parent, blk.definition, (TestTuple(t.z_ref[::-1], t.f_ref, t.y_t),), blk.hash)
    blocks[index] = forged
    with pytest.raises(IntegrityError) as info:
        verify_chain(blocks)
    assert info.value.index == index


def test_single_bit_flip_in_file_detected(five, tmp_path):
    path = tmp_path / "chain.jsonl"
    dump_jsonl(five.chain.blocks, path)
    lines = path.read_text().splitlines()
    doc = json.loads(lines[2])
    sig = bytearray(bytes.fromhex(doc["votes"][0]["signature"]))
    sig[5] ^= 0x10
    doc["votes"][0]["signature"] = sig.hex()
    lines[2] = json.dumps(doc)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(IntegrityError) as info:
        verify_chain(load_jsonl(path))
    assert info.value.index == 2


def test_reordered_blocks_detected(five):
    blocks = list(five.chain.blocks)
    blocks[2], blocks[3] = blocks[3], blocks[2]
    with pytest.raises(IntegrityError) as info:
        verify_chain(blocks)
    assert info.value.index == 2


# --- event log replay ------------------------------------------------------------


def test_replay_from_event_log(small_del):
    w = World(small_del, seed=9)
    events = [
        Event(0, w.peers[5].address, "tuple", w.tuple.to_bytes()),
        Event(2, w.peers[5].address, "commit_problem", w.definition.to_bytes()),
    ]
    model, proof = w.submit(3, 0.3, w.peers[0])
    events.append(Event(3, w.peers[0].address, "register", proof.to_bytes()))
    events.append(Event(4, w.peers[0].address, "release", proof.g))
    for j, v in enumerate(w.peers[1:3]):
        vote = w.vote(5 + j, model, proof, v)
        events.append(Event(5 + j, v.address, "vote", vote.to_bytes()))
    w.chain.close_period()
    events.append(Event(8, w.peers[5].address, "close"))
    again = replay([Event.from_dict(e.to_dict()) for e in events], PARAMS, w.store)
    assert [b.hash for b in again.blocks] == [b.hash for b in w.chain.blocks]
    assert again.balances == w.chain.balances


def test_event_payload_digest_checked():
    ev = Event(1, b"\x00" * 20, "close", b"abc")
    doc = ev.to_dict()
    doc["payload"] = b"abd".hex()
    with pytest.raises(ValueError):
        Event.from_dict(doc)
