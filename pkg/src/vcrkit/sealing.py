"""Hybrid encryption to a curve public key.

Ephemeral ECDH on secp256k1, HKDF-SHA256 to a fresh AES-256-GCM key, then
AEAD over the payload. Used in two places: super-encrypting a whole signed
request to the server's long-term key (hides action metadata from
eavesdroppers), and encrypting ACCESS responses to a client-supplied key.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import curve
from .encoding import (
    TAG_SEALED,
    CanonicalReader,
    CanonicalWriter,
    WireMode,
    bin_from_wire,
    bin_to_wire,
    require,
)
from .errors import DecryptFailed, InvalidPublicKey, MalformedMessage

NONCE_BYTES = 12
POINT_BYTES = 33


def _derive_key(shared: bytes, ephemeral_pub: bytes, recipient_pub: bytes, info: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=info + ephemeral_pub + recipient_pub,
    ).derive(shared)


@dataclass(frozen=True)
class HybridCiphertext:
    """Ephemeral public key, AEAD nonce and ciphertext (tag included)."""

    ephemeral_pubkey: bytes
    nonce: bytes
    ciphertext: bytes

    def to_canonical(self) -> bytes:
        w = CanonicalWriter()
        w.u8(TAG_SEALED)
        w.fixed(self.ephemeral_pubkey, POINT_BYTES)
        w.fixed(self.nonce, NONCE_BYTES)
        w.vbytes(self.ciphertext)
        return w.getvalue()

    @classmethod
    def from_canonical(cls, data: bytes) -> "HybridCiphertext":
        r = CanonicalReader(data)
        if r.u8() != TAG_SEALED:
            raise MalformedMessage("expected sealed message tag")
        box = cls(
            ephemeral_pubkey=r.fixed(POINT_BYTES),
            nonce=r.fixed(NONCE_BYTES),
            ciphertext=r.vbytes(),
        )
        r.expect_end()
        return box

    def to_wire_dict(self, mode: WireMode) -> dict:
        from .encoding import wire_key as k

        return {
            k("ephemeral_pubkey", mode): bin_to_wire(self.ephemeral_pubkey, mode),
            k("nonce", mode): bin_to_wire(self.nonce, mode),
            k("ciphertext", mode): bin_to_wire(self.ciphertext, mode),
        }

    @classmethod
    def from_wire_dict(cls, data: dict, mode: WireMode) -> "HybridCiphertext":
        return cls(
            ephemeral_pubkey=bin_from_wire(
                require(data, "ephemeral_pubkey", mode), mode
            ),
            nonce=bin_from_wire(require(data, "nonce", mode), mode),
            ciphertext=bin_from_wire(require(data, "ciphertext", mode), mode),
        )


def hybrid_encrypt(recipient_pub: bytes, plaintext: bytes, info: bytes) -> HybridCiphertext:
    """Encrypt to a compressed public key with a fresh ephemeral key."""
    curve.decompress(recipient_pub)  # raises InvalidPublicKey early
    ephemeral_secret = curve.generate_secret()
    ephemeral_pub = curve.pubkey_bytes(ephemeral_secret)
    shared = curve.ecdh(ephemeral_secret, recipient_pub)
    key = _derive_key(shared, ephemeral_pub, recipient_pub, info)
    nonce = os.urandom(NONCE_BYTES)
    ciphertext = AESGCM(key).encrypt(nonce, plaintext, None)
    return HybridCiphertext(
        ephemeral_pubkey=ephemeral_pub, nonce=nonce, ciphertext=ciphertext
    )


def hybrid_decrypt(recipient_secret: int, box: HybridCiphertext, info: bytes) -> bytes:
    """Invert hybrid_encrypt; wrong key or any tampering raises DecryptFailed."""
    try:
        shared = curve.ecdh(recipient_secret, box.ephemeral_pubkey)
        recipient_pub = curve.pubkey_bytes(recipient_secret)
        key = _derive_key(shared, box.ephemeral_pubkey, recipient_pub, info)
        return AESGCM(key).decrypt(box.nonce, box.ciphertext, None)
    except (InvalidTag, InvalidPublicKey, ValueError) as exc:
        raise DecryptFailed(str(exc) or "authentication tag mismatch") from None
