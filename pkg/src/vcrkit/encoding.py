"""Canonical byte serialization and the two JSON wire modes.

Two distinct encodings live here:

* The canonical encoding: a deterministic, injective, length-prefixed binary
  layout. This is the only thing that is ever hashed or signed. Field order
  is fixed per message type and each top-level message starts with a 1-byte
  type tag, so no two distinct messages can share bytes.

* The JSON wire encodings, VERBOSE and OPTIMIZED, used on the HTTP path and
  in store files. OPTIMIZED substitutes single-letter keys for the long
  field names, stores times as unix integers, binary fields as unpadded
  urlsafe base64, and history entries as URL paths only. VERBOSE keeps long
  names, ISO-8601 timestamps, hex binaries and full URLs. Both decode to
  equal in-memory messages; nothing on the JSON path is ever signed.
"""

from __future__ import annotations

import base64
import binascii
import json
from datetime import datetime, timezone
from enum import Enum

from .errors import MalformedMessage, UnencodableField

MAX_FIELD_BYTES = 1 << 20
MAX_LIST_ITEMS = 1 << 16

# Canonical type tags.
TAG_CLIENT_ID = 0x01
TAG_WRAPPER = 0x02
TAG_VCR_BODY = 0x03
TAG_VCR_REQUEST = 0x04
TAG_SEALED = 0x05


class WireMode(Enum):
    VERBOSE = "verbose"
    OPTIMIZED = "optimized"


# Long field name -> single-letter wire key. One global bijection, checked
# by tests. "vcr_pubkeys" -> "v" matches the protocol's published example.
WIRE_KEYS = {
    "version": "V",
    "cookie_name": "n",
    "cookie_value": "c",
    "client_id": "y",
    "vcr_pubkeys": "v",
    "issued_at": "i",
    "server_key_id": "d",
    "signature": "g",
    "wrappers": "w",
    "action": "a",
    "kind": "k",
    "response_pubkey": "r",
    "changes": "m",
    "field": "f",
    "old_value": "o",
    "new_value": "e",
    "timestamp": "t",
    "signer_paths": "p",
    "signatures": "s",
    "unified_xpub": "u",
    "session_indices": "j",
    "ephemeral_pubkey": "E",
    "nonce": "N",
    "ciphertext": "C",
    "server_origin": "O",
    "endpoints": "P",
    "wrapper_endpoint": "W",
    "vcr_endpoint": "R",
    "server_pubkey": "K",
    "derivation_path": "q",
    "wrapper": "x",
    "created_at": "b",
    "history": "H",
    "visit_time": "T",
    "visit_url": "U",
    "device_id": "I",
    "device_xpub": "X",
    "next_session": "J",
    "server_counters": "S",
    "server_ids": "Y",
    "sessions": "L",
    "pinned_keys": "Q",
    "retired": "Z",
    "visits": "A",
    "attributes": "B",
    "records": "D",
}


def wire_key(name: str, mode: WireMode) -> str:
    if mode is WireMode.OPTIMIZED:
        return WIRE_KEYS[name]
    return name


class CanonicalWriter:
    """Deterministic binary writer for the signing path."""

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> None:
        if not 0 <= value < 1 << 8:
            raise UnencodableField(f"u8 out of range: {value}")
        self._parts.append(bytes([value]))

    def u32(self, value: int) -> None:
        if not 0 <= value < 1 << 32:
            raise UnencodableField(f"u32 out of range: {value}")
        self._parts.append(value.to_bytes(4, "big"))

    def u64(self, value: int) -> None:
        if not 0 <= value < 1 << 64:
            raise UnencodableField(f"u64 out of range: {value}")
        self._parts.append(value.to_bytes(8, "big"))

    def fixed(self, data: bytes, size: int) -> None:
        if len(data) != size:
            raise UnencodableField(f"expected {size} bytes, got {len(data)}")
        self._parts.append(data)

    def vbytes(self, data: bytes) -> None:
        if len(data) > MAX_FIELD_BYTES:
            raise UnencodableField(f"field of {len(data)} bytes exceeds bound")
        self.u32(len(data))
        self._parts.append(data)

    def vstr(self, text: str) -> None:
        self.vbytes(text.encode("utf-8"))

    def count(self, n: int) -> None:
        if n > MAX_LIST_ITEMS:
            raise UnencodableField(f"list of {n} items exceeds bound")
        self.u32(n)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class CanonicalReader:
    """Mirror of CanonicalWriter; any shortfall raises MalformedMessage."""

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise MalformedMessage("truncated canonical message")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self._take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self._take(8), "big")

    def fixed(self, size: int) -> bytes:
        return self._take(size)

    def vbytes(self) -> bytes:
        size = self.u32()
        if size > MAX_FIELD_BYTES:
            raise MalformedMessage("oversized field in canonical message")
        return self._take(size)

    def vstr(self) -> str:
        try:
            return self.vbytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedMessage(f"bad utf-8: {exc}") from None

    def count(self) -> int:
        n = self.u32()
        if n > MAX_LIST_ITEMS:
            raise MalformedMessage("oversized list in canonical message")
        return n

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise MalformedMessage("trailing bytes after canonical message")


# --- JSON wire helpers -------------------------------------------------------

def bin_to_wire(data: bytes, mode: WireMode) -> str:
    if mode is WireMode.OPTIMIZED:
        return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")
    return data.hex()


def bin_from_wire(text: str, mode: WireMode) -> bytes:
    try:
        if mode is WireMode.OPTIMIZED:
            pad = "=" * (-len(text) % 4)
            return base64.urlsafe_b64decode(text + pad)
        return bytes.fromhex(text)
    except (binascii.Error, ValueError) as exc:
        raise MalformedMessage(f"bad binary field: {exc}") from None


def time_to_wire(ts: int, mode: WireMode):
    if mode is WireMode.OPTIMIZED:
        return int(ts)
    return (
        datetime.fromtimestamp(int(ts), tz=timezone.utc)
        .isoformat()
        .replace("+00:00", "Z")
    )


def time_from_wire(value, mode: WireMode) -> int:
    try:
        if mode is WireMode.OPTIMIZED:
            return int(value)
        return int(
            datetime.fromisoformat(str(value).replace("Z", "+00:00")).timestamp()
        )
    except (TypeError, ValueError) as exc:
        raise MalformedMessage(f"bad timestamp: {exc}") from None


def to_wire(message, mode: WireMode) -> str:
    """Compact JSON text of any message exposing to_wire_dict()."""
    return json.dumps(
        message.to_wire_dict(mode), separators=(",", ":"), sort_keys=False
    )


def from_wire(cls, text: str, mode: WireMode):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedMessage(f"bad wire JSON: {exc}") from None
    return cls.from_wire_dict(data, mode)


def byte_size(message, mode: WireMode) -> int:
    """Wire size in bytes; the quantity the storage tables measure."""
    return len(to_wire(message, mode).encode("utf-8"))


def require(data: dict, name: str, mode: WireMode):
    """Fetch a wire field by long name, honoring the mode's key map."""
    key = wire_key(name, mode)
    if not isinstance(data, dict) or key not in data:
        raise MalformedMessage(f"missing wire field {name} ({key})")
    return data[key]


def optional(data: dict, name: str, mode: WireMode, default=None):
    if not isinstance(data, dict):
        raise MalformedMessage("wire message is not an object")
    return data.get(wire_key(name, mode), default)
