"""Exception classes shared across the toolkit.

Every error carries a stable machine-readable ``code`` (the class name) so
the CLI and the reference server can surface error classes without leaking
anything beyond the class itself.
"""


class VcrkitError(Exception):
    """Base class for all protocol and tooling errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


# --- key hierarchy ---------------------------------------------------------

class InvalidSeedLength(VcrkitError):
    """Master seed outside the accepted 16..64 byte range."""


class DegenerateKey(VcrkitError):
    """Seed produced an invalid master scalar (zero or >= group order)."""


class HardenedIndexRejected(VcrkitError):
    """Derivation index >= 2^31; only non-hardened keys are supported."""


class DegenerateChild(VcrkitError):
    """Child derivation hit the scheme's skip case; retry with the next index."""


class RecoveryMismatch(VcrkitError):
    """Recovered parent scalar does not match the claimed parent public key."""


class MalformedPath(VcrkitError):
    """Derivation path string or segment list is not valid here."""


# --- encoding --------------------------------------------------------------

class UnencodableField(VcrkitError):
    """A message field exceeds its declared wire bounds."""


class MalformedMessage(VcrkitError):
    """Canonical or wire bytes do not parse as the expected message."""


# --- wrappers --------------------------------------------------------------

class InvalidPublicKey(VcrkitError):
    """Bytes are not a valid compressed curve point."""


class ClockUnavailable(VcrkitError):
    """No usable current time was supplied for issuance."""


class BadSignature(VcrkitError):
    """Signature does not verify under the expected key."""


class MalformedWrapper(VcrkitError):
    """Wrapper structure violates its invariants."""


class UnknownServerKey(VcrkitError):
    """Wrapper names a server key id the verifier does not hold."""


class PublicKeyMismatch(VcrkitError):
    """Echoed wrapper carries different keys than were sent (injection)."""


class ClientIdMismatch(VcrkitError):
    """Echoed wrapper carries a different cookie than was sent."""


# --- consumer requests -----------------------------------------------------

class MixedServers(VcrkitError):
    """Wrappers in one request were issued under different server keys."""


class EmptyWrapperList(VcrkitError):
    """A request needs at least one wrapper."""


class SignerRefused(VcrkitError):
    """The trusted device declined to sign."""


class UnknownPath(VcrkitError):
    """The signer cannot resolve the requested derivation path."""


class BadWrapper(VcrkitError):
    """A wrapper inside the request failed verification."""


class BadRequestSignature(VcrkitError):
    """A request signature failed verification."""


class MissingSignature(VcrkitError):
    """Fewer signatures than required signers."""


class StaleTimestamp(VcrkitError):
    """Request timestamp is older than the tolerance window."""


class FutureTimestamp(VcrkitError):
    """Request timestamp is further ahead than the tolerance window."""


class ReplayDetected(VcrkitError):
    """Identical request already seen within the tolerance window."""


class SessionKeyMismatch(VcrkitError):
    """A wrapper's key is not a child of the claimed server-scoped key."""


class DecryptFailed(VcrkitError):
    """Sealed or encrypted payload failed to decrypt (wrong key or tampered)."""


# --- reference server ------------------------------------------------------

class MalformedBody(VcrkitError):
    """HTTP body failed to decode as the expected message."""


class ModifyConflict(VcrkitError):
    """Stored value does not equal the old value carried by a MODIFY."""


class NoData(VcrkitError):
    """No record exists for the verified client id."""


# --- client agent ----------------------------------------------------------

class AlreadyProvisioned(VcrkitError):
    """Agent store already holds a device key."""


class NotProvisioned(VcrkitError):
    """Agent store has no device key yet."""


class WrapperVerifyFailed(VcrkitError):
    """Server-returned wrapper did not verify."""


class NetworkError(VcrkitError):
    """HTTP exchange with the server failed."""


class CorruptStore(VcrkitError):
    """Store bytes do not parse back into a consistent agent store."""


class DeviceRetired(VcrkitError):
    """Device id was retired; no further issuance or signing."""


class PinnedKeyMismatch(VcrkitError):
    """Server advertised a key different from the pinned one."""


# --- signer daemon ---------------------------------------------------------

class WrongPassphrase(VcrkitError):
    """Passphrase does not decrypt the signer state file."""


class StateExists(VcrkitError):
    """Refusing to overwrite an existing signer state file."""


class StateMissing(VcrkitError):
    """No signer state file at the given path."""


class Locked(VcrkitError):
    """Signer state is not unlocked."""


# --- bench -----------------------------------------------------------------

class BenchEnvironmentError(VcrkitError):
    """Benchmark harness could not set up its loopback environment."""
