"""Party identity and the signed, encrypted message envelope.

Concrete suite: Ed25519 signatures, X25519 agreement with HKDF-SHA-256,
ChaCha20-Poly1305 payload encryption. A party's fingerprint is the SHA-256
hex digest of its concatenated raw public keys, so it is a pure function of
public material.

The signature covers the ciphertext (sender | nonce | timestamp | ciphertext,
with a '.' terminating the decimal timestamp so field boundaries are
unambiguous), which lets receivers reject tampered or unknown traffic without
ever attempting decryption.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Mapping

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import canonical
from .errors import (
    DecryptFailed,
    MalformedDocument,
    ReplayDetected,
    SignatureInvalid,
    StaleTimestamp,
    UnknownSender,
)
from .rng import SplitMix64

MAX_CLOCK_SKEW_S = 300
REPLAY_RETENTION_S = 600
ENVELOPE_NONCE_LEN = 16
_HKDF_INFO = b"fleet-envelope-v1"


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: Any, what: str) -> bytes:
    if not isinstance(text, str):
        raise MalformedDocument(f"{what} must be a base64 string")
    try:
        return base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise MalformedDocument(f"{what} is not valid base64") from exc


@dataclass(frozen=True)
class PublicMaterial:
    """A party's shareable key material."""

    sign_pub: bytes  # raw Ed25519 public key (32 bytes)
    kex_pub: bytes   # raw X25519 public key (32 bytes)

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(self.sign_pub + self.kex_pub).hexdigest()

    def to_jsonable(self) -> dict:
        return {"kex": _b64(self.kex_pub), "sign": _b64(self.sign_pub)}

    @classmethod
    def from_jsonable(cls, doc: Any) -> "PublicMaterial":
        if not isinstance(doc, Mapping):
            raise MalformedDocument("key material must be an object")
        material = cls(sign_pub=_unb64(doc.get("sign"), "sign key"),
                       kex_pub=_unb64(doc.get("kex"), "kex key"))
        if len(material.sign_pub) != 32 or len(material.kex_pub) != 32:
            raise MalformedDocument("public keys must be 32 raw bytes each")
        return material


@dataclass(frozen=True)
class Identity:
    sign_priv: Ed25519PrivateKey
    kex_priv: X25519PrivateKey
    public: PublicMaterial

    @property
    def fingerprint(self) -> str:
        return self.public.fingerprint


def _identity_from_seeds(sign_seed: bytes, kex_seed: bytes) -> Identity:
    sign_priv = Ed25519PrivateKey.from_private_bytes(sign_seed)
    kex_priv = X25519PrivateKey.from_private_bytes(kex_seed)
    public = PublicMaterial(
        sign_pub=sign_priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw),
        kex_pub=kex_priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw),
    )
    return Identity(sign_priv, kex_priv, public)


def generate_identity(seed: int | None = None) -> Identity:
    """Fresh keypairs. Seeded generation is deterministic and exists for
    tests and reproducible harness runs only; production nodes omit the seed."""
    if seed is None:
        return _identity_from_seeds(os.urandom(32), os.urandom(32))
    stream = SplitMix64(seed)
    return _identity_from_seeds(stream.bytes(32), stream.bytes(32))


def save_identity(identity: Identity, path: str) -> None:
    raw_sign = identity.sign_priv.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
        serialization.NoEncryption())
    raw_kex = identity.kex_priv.private_bytes(
        serialization.Encoding.Raw, serialization.PrivateFormat.Raw,
        serialization.NoEncryption())
    with open(path, "wb") as fh:
        fh.write(canonical.dumps({"kex": _b64(raw_kex), "sign": _b64(raw_sign)}))


def load_identity(path: str) -> Identity:
    with open(path, "rb") as fh:
        doc = canonical.loads(fh.read())
    if not isinstance(doc, Mapping):
        raise MalformedDocument("identity file must hold an object")
    return _identity_from_seeds(_unb64(doc.get("sign"), "sign key"),
                                _unb64(doc.get("kex"), "kex key"))


# --------------------------------------------------------------------------
# envelope
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Envelope:
    sender: str
    nonce: bytes
    timestamp: int
    payload: bytes    # eph_pub(32) | cipher nonce(12) | ciphertext
    signature: bytes

    def to_jsonable(self) -> dict:
        return {"nonce": _b64(self.nonce), "payload": _b64(self.payload),
                "sender": self.sender, "signature": _b64(self.signature),
                "timestamp": self.timestamp}

    @classmethod
    def from_jsonable(cls, doc: Any) -> "Envelope":
        if not isinstance(doc, Mapping):
            raise MalformedDocument("envelope must be an object")
        sender = doc.get("sender")
        timestamp = doc.get("timestamp")
        if not isinstance(sender, str):
            raise MalformedDocument("envelope.sender must be a string")
        if isinstance(timestamp, bool) or not isinstance(timestamp, int):
            raise MalformedDocument("envelope.timestamp must be an integer")
        return cls(sender=sender,
                   nonce=_unb64(doc.get("nonce"), "envelope.nonce"),
                   timestamp=timestamp,
                   payload=_unb64(doc.get("payload"), "envelope.payload"),
                   signature=_unb64(doc.get("signature"), "envelope.signature"))


def _signed_bytes(sender: str, nonce: bytes, timestamp: int, payload: bytes) -> bytes:
    return sender.encode("ascii") + nonce + str(timestamp).encode("ascii") + b"." + payload


def _derive_key(shared: bytes, eph_pub: bytes, recipient_kex_pub: bytes) -> bytes:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=_HKDF_INFO + eph_pub + recipient_kex_pub)
    return hkdf.derive(shared)


def seal(sender: Identity, recipient: PublicMaterial, plaintext: bytes,
         now: float | None = None) -> Envelope:
    """Hybrid-encrypt plaintext to the recipient and sign the result.

    A fresh ephemeral key agreement and cipher nonce are drawn per call, so
    sealing the same plaintext twice yields different ciphertexts.
    """
    timestamp = int(time.time() if now is None else now)
    eph_priv = X25519PrivateKey.generate()
    eph_pub = eph_priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(recipient.kex_pub))
    key = _derive_key(shared, eph_pub, recipient.kex_pub)
    cipher_nonce = os.urandom(12)
    ciphertext = ChaCha20Poly1305(key).encrypt(cipher_nonce, plaintext, None)
    payload = eph_pub + cipher_nonce + ciphertext
    nonce = os.urandom(ENVELOPE_NONCE_LEN)
    signature = sender.sign_priv.sign(_signed_bytes(sender.fingerprint, nonce, timestamp, payload))
    return Envelope(sender=sender.fingerprint, nonce=nonce, timestamp=timestamp,
                    payload=payload, signature=signature)


class ReplayCache:
    """Seen (sender, nonce) pairs within the retention window; check-and-insert
    is atomic so concurrent deliveries of the same envelope race safely."""

    def __init__(self, retention_s: float = REPLAY_RETENTION_S):
        self.retention_s = retention_s
        self._lock = threading.Lock()
        self._seen: dict[tuple[str, bytes], float] = {}

    def check_and_insert(self, sender: str, nonce: bytes, now: float) -> bool:
        """True if fresh (and now recorded); False if already seen."""
        key = (sender, nonce)
        with self._lock:
            horizon = now - self.retention_s
            for k, t in list(self._seen.items()):
                if t < horizon:
                    del self._seen[k]
            if key in self._seen:
                return False
            self._seen[key] = now
            return True


def _decrypt(recipient: Identity, envelope: Envelope) -> bytes:
    blob = envelope.payload
    if len(blob) < 32 + 12 + 16:
        raise DecryptFailed("payload too short")
    eph_pub, cipher_nonce, ciphertext = blob[:32], blob[32:44], blob[44:]
    try:
        shared = recipient.kex_priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = _derive_key(shared, eph_pub, recipient.public.kex_pub)
        return ChaCha20Poly1305(key).decrypt(cipher_nonce, ciphertext, None)
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailed("payload does not decrypt for this recipient") from exc


def _verify_signature(material: PublicMaterial, envelope: Envelope) -> None:
    message = _signed_bytes(envelope.sender, envelope.nonce, envelope.timestamp, envelope.payload)
    try:
        Ed25519PublicKey.from_public_bytes(material.sign_pub).verify(envelope.signature, message)
    except (InvalidSignature, ValueError) as exc:
        raise SignatureInvalid("envelope signature does not verify") from exc


def _check_freshness(envelope: Envelope, now: float, replay: ReplayCache | None) -> None:
    if abs(now - envelope.timestamp) > MAX_CLOCK_SKEW_S:
        raise StaleTimestamp(f"envelope timestamp {envelope.timestamp} outside the window")
    if replay is not None and not replay.check_and_insert(envelope.sender, envelope.nonce, now):
        raise ReplayDetected("envelope (sender, nonce) already seen")


def open_envelope(recipient: Identity, known_senders: Mapping[str, PublicMaterial],
                  envelope: Envelope, now: float | None = None,
                  replay: ReplayCache | None = None) -> tuple[bytes, str]:
    """Verify and decrypt an envelope from a known sender.

    Rejection happens before any decryption attempt, in order: unknown
    sender, bad signature, stale timestamp, replayed nonce.
    """
    now = time.time() if now is None else now
    material = known_senders.get(envelope.sender)
    if material is None:
        raise UnknownSender(f"sender {envelope.sender[:12]}… is not registered")
    _verify_signature(material, envelope)
    _check_freshness(envelope, now, replay)
    return _decrypt(recipient, envelope), envelope.sender


def open_introduction(recipient: Identity, envelope: Envelope, now: float | None = None,
                      replay: ReplayCache | None = None) -> tuple[bytes, str, PublicMaterial]:
    """Trust-on-first-use open for join/connect bootstraps.

    The sender is not yet known, so its public keys are read from the
    decrypted payload (field "keys"), bound to the claimed fingerprint, and
    only then used to verify the signature.
    """
    now = time.time() if now is None else now
    plaintext = _decrypt(recipient, envelope)
    doc = canonical.loads(plaintext)
    if not isinstance(doc, Mapping) or "keys" not in doc:
        raise MalformedDocument("introduction payload must carry a 'keys' field")
    material = PublicMaterial.from_jsonable(doc["keys"])
    if material.fingerprint != envelope.sender:
        raise SignatureInvalid("enclosed keys do not match the claimed sender fingerprint")
    _verify_signature(material, envelope)
    _check_freshness(envelope, now, replay)
    return plaintext, envelope.sender, material
