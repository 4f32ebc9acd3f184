from __future__ import annotations

import base64

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleet import canonical
from fleet.errors import (
    DecryptFailed,
    MalformedDocument,
    ReplayDetected,
    SignatureInvalid,
    StaleTimestamp,
    UnknownSender,
)
from fleet.identity import (
    Envelope,
    PublicMaterial,
    ReplayCache,
    generate_identity,
    load_identity,
    open_envelope,
    open_introduction,
    save_identity,
    seal,
)

NOW = 1_700_000_000.0


@pytest.fixture(scope="module")
def alice():
    return generate_identity(seed=1)


@pytest.fixture(scope="module")
def bob():
    return generate_identity(seed=2)


def known(*identities):
    return {i.fingerprint: i.public for i in identities}


def test_unseeded_identities_differ():
    assert generate_identity().fingerprint != generate_identity().fingerprint


def test_seeded_identity_deterministic():
    assert generate_identity(seed=7).fingerprint == generate_identity(seed=7).fingerprint


def test_fingerprint_is_64_hex(alice):
    fp = alice.fingerprint
    assert len(fp) == 64 and set(fp) <= set("0123456789abcdef")


def test_identity_file_round_trip(tmp_path, alice):
    path = tmp_path / "id.json"
    save_identity(alice, str(path))
    again = load_identity(str(path))
    assert again.fingerprint == alice.fingerprint
    env = seal(again, alice.public, b"self", now=NOW)
    plain, _ = open_envelope(alice, known(alice), env, now=NOW)
    assert plain == b"self"


def test_seal_open_round_trip(alice, bob):
    env = seal(alice, bob.public, b"hello federation", now=NOW)
    plain, sender = open_envelope(bob, known(alice), env, now=NOW)
    assert plain == b"hello federation"
    assert sender == alice.fingerprint


def test_wrong_recipient_cannot_decrypt(alice, bob):
    third = generate_identity(seed=3)
    env = seal(alice, bob.public, b"secret", now=NOW)
    with pytest.raises(DecryptFailed):
        open_envelope(third, known(alice), env, now=NOW)


def test_randomized_encryption(alice, bob):
    a = seal(alice, bob.public, b"same plaintext", now=NOW)
    b = seal(alice, bob.public, b"same plaintext", now=NOW)
    assert a.payload != b.payload
    assert a.nonce != b.nonce


def test_tampered_ciphertext_fails_signature(alice, bob):
    env = seal(alice, bob.public, b"payload", now=NOW)
    flipped = bytes([env.payload[0] ^ 1]) + env.payload[1:]
    bad = Envelope(env.sender, env.nonce, env.timestamp, flipped, env.signature)
    with pytest.raises(SignatureInvalid):
        open_envelope(bob, known(alice), bad, now=NOW)


def test_replay_detected(alice, bob):
    cache = ReplayCache()
    env = seal(alice, bob.public, b"once", now=NOW)
    open_envelope(bob, known(alice), env, now=NOW, replay=cache)
    with pytest.raises(ReplayDetected):
        open_envelope(bob, known(alice), env, now=NOW, replay=cache)


def test_stale_timestamp(alice, bob):
    env = seal(alice, bob.public, b"old", now=NOW)
    with pytest.raises(StaleTimestamp):
        open_envelope(bob, known(alice), env, now=NOW + 301)
    with pytest.raises(StaleTimestamp):
        open_envelope(bob, known(alice), env, now=NOW - 301)


def test_unknown_sender_rejected_before_decryption(alice, bob):
    env = seal(alice, bob.public, b"hi", now=NOW)
    # Garbage payload would raise DecryptFailed if decryption were attempted;
    # the unknown-sender check must fire first.
    garbage = Envelope(env.sender, env.nonce, env.timestamp, b"\x00" * 80, env.signature)
    with pytest.raises(UnknownSender):
        open_envelope(bob, {}, garbage, now=NOW)


def test_envelope_jsonable_round_trip(alice, bob):
    env = seal(alice, bob.public, b"wire", now=NOW)
    doc = canonical.loads(canonical.dumps(env.to_jsonable()))
    again = Envelope.from_jsonable(doc)
    assert again == env
    base64.b64decode(doc["payload"], validate=True)


@pytest.mark.parametrize("size", [0, 1, 1000, 65536, 1 << 20])
def test_round_trip_sizes_up_to_one_mib(alice, bob, size):
    blob = bytes((i * 131) % 256 for i in range(size))
    env = seal(alice, bob.public, blob, now=NOW)
    plain, _ = open_envelope(bob, known(alice), env, now=NOW)
    assert plain == blob


@given(st.binary(max_size=4096))
@settings(max_examples=50, deadline=None)
def test_round_trip_property(payload):
    a = generate_identity(seed=11)
    b = generate_identity(seed=12)
    env = seal(a, b.public, payload, now=NOW)
    plain, _ = open_envelope(b, {a.fingerprint: a.public}, env, now=NOW)
    assert plain == payload


def mutate_field(env: Envelope, field: str, index: int) -> Envelope:
    values = {"sender": env.sender, "nonce": env.nonce, "timestamp": env.timestamp,
              "payload": env.payload, "signature": env.signature}
    if field == "sender":
        chars = list(values["sender"])
        pos = index % len(chars)
        chars[pos] = "0" if chars[pos] != "0" else "1"
        values["sender"] = "".join(chars)
    elif field == "timestamp":
        values["timestamp"] = env.timestamp + 1 + index
    else:
        blob = bytearray(values[field])
        blob[index % len(blob)] ^= 1 << (index % 8)
        values[field] = bytes(blob)
    return Envelope(**values)


@pytest.mark.parametrize("field", ["sender", "nonce", "timestamp", "payload", "signature"])
def test_every_field_mutation_rejected(alice, bob, field):
    env = seal(alice, bob.public, b"fuzz me", now=NOW)
    for index in range(20):
        mutated = mutate_field(env, field, index)
        with pytest.raises((SignatureInvalid, UnknownSender, StaleTimestamp, DecryptFailed)):
            open_envelope(bob, known(alice), mutated, now=NOW)


# --- trust-on-first-use introductions ---------------------------------------

def introduction_payload(identity, extra=None):
    body = {"keys": identity.public.to_jsonable()}
    body.update(extra or {})
    return canonical.dumps(body)


def test_introduction_accepts_new_sender(alice, bob):
    env = seal(alice, bob.public, introduction_payload(alice, {"name": "n1"}), now=NOW)
    plain, sender, material = open_introduction(bob, env, now=NOW)
    assert sender == alice.fingerprint
    assert material == alice.public
    assert b'"name":"n1"' in plain


def test_introduction_rejects_mismatched_keys(alice, bob):
    mallory = generate_identity(seed=66)
    # Mallory claims alice's keys but signs with her own key.
    body = canonical.dumps({"keys": alice.public.to_jsonable()})
    env = seal(mallory, bob.public, body, now=NOW)
    with pytest.raises(SignatureInvalid):
        open_introduction(bob, env, now=NOW)


def test_introduction_requires_keys_field(alice, bob):
    env = seal(alice, bob.public, canonical.dumps({"name": "x"}), now=NOW)
    with pytest.raises(MalformedDocument):
        open_introduction(bob, env, now=NOW)


def test_public_material_round_trip(alice):
    doc = alice.public.to_jsonable()
    assert PublicMaterial.from_jsonable(doc) == alice.public
