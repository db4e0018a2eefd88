"""Proof-of-improvement: identities, content-addressed storage, and the
prove/verify procedures.

Nothing in this module ever sees the true test labels; verification works
from the published embedding model ``f`` and the target ``y_t`` alone.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from . import codec
from .codec import digest
from .embedding import DelModel, LabelVector, distance
from .numerics import ContractError

ADDRESS_SIZE = 20
EMBEDDING_TOLERANCE = 1e-9
DEFAULT_DELTA = 0.005

_MODEL_TAG = b"daimon/model/v1"
_POI_TAG = b"daimon/poi/v1"
_VOTE_TAG = b"daimon/vote/v1"


class VerificationError(Exception):
    code = "VerificationError"


class BadSignature(VerificationError):
    code = "BadSignature"


class DigestMismatch(VerificationError):
    code = "DigestMismatch"


class EmbeddingMismatch(VerificationError):
    code = "EmbeddingMismatch"


class InsufficientImprovement(VerificationError):
    code = "InsufficientImprovement"


class MissingBlob(KeyError):
    pass


def address_of(public_key: bytes) -> bytes:
    """Last 20 bytes of the digest of a public key."""
    return digest(public_key)[-ADDRESS_SIZE:]


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


@dataclass(frozen=True, repr=False)
class PeerIdentity:
    public_key: bytes
    secret_key: bytes

    @property
    def address(self) -> bytes:
        return address_of(self.public_key)

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.secret_key).sign(message)

    def verify(self, message: bytes, signature: bytes) -> bool:
        return verify_signature(self.public_key, message, signature)

    def __repr__(self):
        return f"PeerIdentity(address={self.address.hex()})"

    @classmethod
    def from_secret(cls, secret_key: bytes) -> "PeerIdentity":
        sk = Ed25519PrivateKey.from_private_bytes(secret_key)
        pk = sk.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        return cls(pk, bytes(secret_key))

    def to_dict(self) -> dict:
        return {"public_key": self.public_key.hex(), "secret_key": self.secret_key.hex()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PeerIdentity":
        ident = cls.from_secret(bytes.fromhex(doc["secret_key"]))
        if "public_key" in doc and bytes.fromhex(doc["public_key"]) != ident.public_key:
            raise ContractError("identity file: public key does not match secret key")
        return ident


def keygen(rng: np.random.Generator) -> PeerIdentity:
    """Ed25519 key pair whose 32-byte seed is drawn from ``rng``."""
    return PeerIdentity.from_secret(rng.bytes(32))


class BlobStore:
    """In-process content-addressed store keyed by digest."""

    def __init__(self):
        self._blobs: dict[bytes, bytes] = {}
        self._lock = threading.Lock()

    def put(self, content: bytes) -> bytes:
        content = bytes(content)
        key = digest(content)
        with self._lock:
            self._blobs.setdefault(key, content)
        return key

    def get(self, key: bytes) -> bytes:
        try:
            return self._blobs[key]
        except KeyError:
            raise MissingBlob(key.hex()) from None

    def __contains__(self, key: bytes) -> bool:
        return key in self._blobs

    def __len__(self):
        return len(self._blobs)


@dataclass(frozen=True, eq=False)
class ModelArtifact:
    """A lookup model: the predicted labels for the canonical test inputs."""

    predicted_labels: LabelVector
    metadata: str = ""

    def to_bytes(self) -> bytes:
        labels = self.predicted_labels.labels.astype(">u2").tobytes()
        return codec.pack(
            _MODEL_TAG,
            codec.enc_u64(self.predicted_labels.num_classes),
            codec.enc_u64(self.predicted_labels.m),
            labels,
            codec.enc_str(self.metadata),
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelArtifact":
        tag, c, m, labels, meta = codec.unpack(data, 5)
        if tag != _MODEL_TAG:
            raise ContractError("not a model artifact")
        values = np.frombuffer(labels, dtype=">u2").astype(np.int64)
        if values.size != codec.dec_u64(m):
            raise ContractError("model artifact label count mismatch")
        return cls(LabelVector(values, codec.dec_u64(c)), meta.decode("utf-8"))

    def digest(self) -> bytes:
        return digest(self.to_bytes())

    def to_dict(self) -> dict:
        return {
            "num_classes": self.predicted_labels.num_classes,
            "predicted_labels": self.predicted_labels.to_list(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelArtifact":
        return cls(LabelVector(doc["predicted_labels"], doc["num_classes"]), doc.get("metadata", ""))


def _floats_json(v) -> list[str]:
    return [repr(float(x)) for x in v]


@dataclass(frozen=True, eq=False)
class PoiProof:
    g: bytes
    y: np.ndarray
    pk: bytes
    signature: bytes

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        y.flags.writeable = False
        object.__setattr__(self, "y", y)

    @staticmethod
    def body(g: bytes, y, pk: bytes) -> bytes:
        return codec.pack(_POI_TAG, g, codec.enc_vec(y), pk)

    def signed_body(self) -> bytes:
        return self.body(self.g, self.y, self.pk)

    def signature_ok(self) -> bool:
        return verify_signature(self.pk, self.signed_body(), self.signature)

    @property
    def prover_address(self) -> bytes:
        return address_of(self.pk)

    def to_bytes(self) -> bytes:
        return codec.pack(self.signed_body(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PoiProof":
        body, sig = codec.unpack(data, 2)
        tag, g, y, pk = codec.unpack(body, 4)
        if tag != _POI_TAG:
            raise ContractError("not a PoI proof")
        return cls(g, codec.dec_vec(y), pk, sig)

    def proof_id(self) -> bytes:
        return digest(self.to_bytes())

    def __eq__(self, other):
        return isinstance(other, PoiProof) and self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())

    def to_dict(self) -> dict:
        return {
            "g": self.g.hex(),
            "y": _floats_json(self.y),
            "pk": self.pk.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PoiProof":
        return cls(
            bytes.fromhex(doc["g"]),
            np.array([float(v) for v in doc["y"]]),
            bytes.fromhex(doc["pk"]),
            bytes.fromhex(doc["signature"]),
        )


@dataclass(frozen=True, eq=False)
class VerificationProof:
    inner: PoiProof
    d_c: float
    delta: float
    pk: bytes
    signature: bytes

    @staticmethod
    def body(inner: PoiProof, d_c: float, delta: float, pk: bytes) -> bytes:
        return codec.pack(_VOTE_TAG, inner.to_bytes(), codec.enc_f64(d_c), codec.enc_f64(delta), pk)

    def signed_body(self) -> bytes:
        return self.body(self.inner, self.d_c, self.delta, self.pk)

    def signature_ok(self) -> bool:
        """Both this attestation's signature and the inner proof's."""
        return self.inner.signature_ok() and verify_signature(self.pk, self.signed_body(), self.signature)

    @property
    def verifier_address(self) -> bytes:
        return address_of(self.pk)

    def to_bytes(self) -> bytes:
        return codec.pack(self.signed_body(), self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VerificationProof":
        body, sig = codec.unpack(data, 2)
        tag, inner, d_c, delta, pk = codec.unpack(body, 5)
        if tag != _VOTE_TAG:
            raise ContractError("not a verification proof")
        return cls(PoiProof.from_bytes(inner), codec.dec_f64(d_c), codec.dec_f64(delta), pk, sig)

    def __eq__(self, other):
        return isinstance(other, VerificationProof) and self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())

    def to_dict(self) -> dict:
        return {
            "inner": self.inner.to_dict(),
            "d_c": repr(float(self.d_c)),
            "delta": repr(float(self.delta)),
            "pk": self.pk.hex(),
            "signature": self.signature.hex(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VerificationProof":
        return cls(
            PoiProof.from_dict(doc["inner"]),
            float(doc["d_c"]),
            float(doc["delta"]),
            bytes.fromhex(doc["pk"]),
            bytes.fromhex(doc["signature"]),
        )


def prove(model: ModelArtifact, f: DelModel, prover: PeerIdentity) -> PoiProof:
    """Digest the model, embed its predictions, and sign ``(g, y, pk)``."""
    f.check_labels(model.predicted_labels)
    g = model.digest()
    y = f.embed(model.predicted_labels)
    return PoiProof(g, y, prover.public_key, prover.sign(PoiProof.body(g, y, prover.public_key)))


def verify(
    model: ModelArtifact,
    proof: PoiProof,
    f: DelModel,
    y_t,
    d_c: float,
    delta: float,
    verifier: PeerIdentity,
) -> VerificationProof:
    """Check a PoI proof and, if it holds, attest to it.

    The checks run in order: prover signature, model digest, recomputed
    embedding, and finally ``d(y, y_t) < d_c - delta``. Each failure raises
    its own :class:`VerificationError` subclass.
    """
    if not delta >= 0:
        raise ContractError(f"delta must be >= 0, got {delta}")
    y_t = np.asarray(y_t, dtype=np.float64)
    if y_t.shape != (f.n,):
        raise ContractError(f"y_t must have length {f.n}")

    if not proof.signature_ok():
        raise BadSignature("prover signature does not verify")
    if proof.g != model.digest():
        raise DigestMismatch("model digest differs from the one in the proof")
    try:
        y = f.embed(model.predicted_labels)
    except ContractError as exc:
        raise EmbeddingMismatch(f"model output does not fit the embedding: {exc}") from exc
    if proof.y.shape != y.shape or not (
        np.array_equal(proof.y, y) or np.max(np.abs(proof.y - y)) <= EMBEDDING_TOLERANCE
    ):
        raise EmbeddingMismatch("embedding in the proof differs from f(M(Z))")
    d = distance(proof.y, y_t)
    if not d < d_c - delta:
        raise InsufficientImprovement(f"distance {d:.6f} is not below d_c - delta = {d_c - delta:.6f}")

    body = VerificationProof.body(proof, d_c, delta, verifier.public_key)
    return VerificationProof(proof, float(d_c), float(delta), verifier.public_key, verifier.sign(body))
