"""SPEKE password-authenticated key exchange over safe-prime groups.

The group generator is derived from the shared PIN by hashing and squaring,
so nothing that crosses the wire can be tested against PIN guesses offline.
Explicit key confirmation (initiator first) gates the derived MAC key.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional


class PakeError(Exception):
    """Base class for key-exchange failures."""


class InvalidState(PakeError):
    """Session operation called out of order."""


class DegenerateElement(PakeError):
    """Element in {0, 1, p-1}: rejected before any exponentiation."""


class GeneratorDerivationError(PakeError):
    """No usable generator after the retry limit (practically unreachable)."""


MAC_KEY_LEN = 16
CONFIRM_TAG_LEN = 32
PIN_LEN = 5
PIN_SPACE = 10 ** PIN_LEN

_MAX_GENERATOR_ATTEMPTS = 16

# Miller-Rabin witnesses: fixed small primes plus a few rounds with derived
# bases. The built-in moduli are additionally cross-checked in the tests.
_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)
_MR_DERIVED_ROUNDS = 4


def _is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    for small in _MR_BASES:
        if n == small:
            return True
        if n % small == 0:
            return False
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1

    def witness(a: int) -> bool:
        x = pow(a, d, n)
        if x in (1, n - 1):
            return False
        for _ in range(r - 1):
            x = (x * x) % n
            if x == n - 1:
                return False
        return True

    for a in _MR_BASES:
        if witness(a):
            return False
    seed = hashlib.sha256(n.to_bytes((n.bit_length() + 7) // 8, "big")).digest()
    for i in range(_MR_DERIVED_ROUNDS):
        a = 2 + int.from_bytes(hashlib.sha256(seed + bytes([i])).digest(), "big") % (n - 3)
        if witness(a):
            return False
    return True


@dataclass(frozen=True)
class GroupParams:
    """Safe-prime group p = 2q+1 with the q-order subgroup of squares."""

    params_id: str
    prime_modulus: int
    subgroup_order: int
    bit_length: int

    def __post_init__(self) -> None:
        p, q = self.prime_modulus, self.subgroup_order
        if p != 2 * q + 1:
            raise ValueError("modulus is not 2q+1")
        if self.bit_length != p.bit_length():
            raise ValueError("bit_length does not match modulus")
        if not _is_probable_prime(p):
            raise ValueError("modulus fails primality test")
        if not _is_probable_prime(q):
            raise ValueError("subgroup order fails primality test")

    @property
    def element_len(self) -> int:
        """Fixed byte width used when hashing group elements."""
        return (self.bit_length + 7) // 8


# RFC 3526 MODP groups 5 (1536-bit) and 14 (2048-bit); both are safe primes.
_P1536 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA237327FFFFFFFFFFFFFFFF",
    16,
)
_P2048 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AACAA68FFFFFFFFFFFFFFFF",
    16,
)

TOY_PARAMS = GroupParams("toy23", 23, 11, 5)
MODP_1536 = GroupParams("modp1536", _P1536, (_P1536 - 1) // 2, 1536)
MODP_2048 = GroupParams("modp2048", _P2048, (_P2048 - 1) // 2, 2048)

PARAMETER_SETS = {g.params_id: g for g in (TOY_PARAMS, MODP_1536, MODP_2048)}

# Hex-in-JSON wire encoding doubles element size, so the 1536-bit group is
# the default that keeps a full session inside the transport byte budget.
# The 2048-bit set stays selectable through the params_id wire field.
DEFAULT_PARAMS_ID = "modp1536"


@dataclass(frozen=True)
class Pin:
    """Five-decimal-digit one-time secret delivered out of band."""

    digits: str

    def __post_init__(self) -> None:
        if len(self.digits) != PIN_LEN or not self.digits.isdigit():
            raise ValueError("PIN must be exactly 5 decimal digits")

    def __repr__(self) -> str:  # never leak digits through reprs/logs
        return "Pin('*****')"


class PakeRole(Enum):
    INITIATOR = "I"
    RESPONDER = "R"

    @property
    def label(self) -> bytes:
        return self.value.encode("ascii")

    @property
    def peer(self) -> "PakeRole":
        return PakeRole.RESPONDER if self is PakeRole.INITIATOR else PakeRole.INITIATOR


@dataclass(frozen=True)
class GroupElement:
    value: int
    params: GroupParams = field(repr=False)

    def __post_init__(self) -> None:
        p = self.params.prime_modulus
        if not 2 <= self.value <= p - 2:
            raise DegenerateElement(f"element outside [2, p-2]")

    def to_bytes(self) -> bytes:
        return self.value.to_bytes(self.params.element_len, "big")


@dataclass(frozen=True)
class SessionKeys:
    """Keys derived from the shared secret and the session transcript."""

    confirm_key: bytes
    mac_key: bytes
    transcript_hash: bytes

    def __post_init__(self) -> None:
        if len(self.confirm_key) != 32:
            raise ValueError("confirm_key must be 32 octets")
        if len(self.mac_key) != MAC_KEY_LEN:
            raise ValueError("mac_key must be 16 octets")
        if len(self.transcript_hash) != 32:
            raise ValueError("transcript_hash must be 32 octets")


HashToInt = Callable[[bytes], int]


def _sha256_int(data: bytes) -> int:
    return int.from_bytes(hashlib.sha256(data).digest(), "big")


def derive_generator(
    pin: Pin, params: GroupParams, hash_to_int: Optional[HashToInt] = None
) -> GroupElement:
    """g = (H(pin) mod p)^2 mod p, re-hashed with a counter until nondegenerate."""
    h = hash_to_int or _sha256_int
    p = params.prime_modulus
    material = pin.digits.encode("ascii")
    for attempt in range(_MAX_GENERATOR_ATTEMPTS):
        data = material if attempt == 0 else material + bytes([attempt])
        g = pow(h(data) % p, 2, p)
        if g not in (0, 1, p - 1):
            return GroupElement(g, params)
    raise GeneratorDerivationError("no nondegenerate generator after 16 attempts")


def _transcript_hash(
    params_id: str, initiator_commit: bytes, responder_commit: bytes, user_id: str
) -> bytes:
    h = hashlib.sha256()
    h.update(b"speke-transcript\x00")
    h.update(params_id.encode("utf-8"))
    h.update(b"\x00I")
    h.update(initiator_commit)
    h.update(b"R")
    h.update(responder_commit)
    h.update(b"\x00")
    h.update(user_id.encode("utf-8"))
    return h.digest()


class SessionState(Enum):
    FRESH = "fresh"
    SENT_COMMIT = "sent_commit"
    CONFIRMED = "confirmed"
    FAILED = "failed"


class PakeSession:
    """One side of the exchange. Single-owner; not safe to share.

    The ephemeral exponent, the shared secret, and the PIN are private and
    excluded from the repr; `keys` is readable only once the peer's
    confirmation has verified.
    """

    def __init__(
        self,
        role: PakeRole,
        pin: Pin,
        params: GroupParams,
        user_id: str,
        rng=None,
        hash_to_int: Optional[HashToInt] = None,
    ) -> None:
        self.role = role
        self.params = params
        self.user_id = user_id
        self.state = SessionState.FRESH
        self._pin: Optional[Pin] = pin
        self._rng = rng if rng is not None else secrets.SystemRandom()
        self._hash_to_int = hash_to_int
        self._exponent: Optional[int] = None
        self._own_commit: Optional[GroupElement] = None
        self._shared_secret: Optional[bytes] = None
        self._keys: Optional[SessionKeys] = None

    def __repr__(self) -> str:
        return (
            f"<PakeSession role={self.role.name} state={self.state.name} "
            f"params={self.params.params_id}>"
        )

    @property
    def keys(self) -> Optional[SessionKeys]:
        return self._keys if self.state is SessionState.CONFIRMED else None

    def start(self) -> GroupElement:
        """Draw the ephemeral exponent and return the commit g^a mod p."""
        if self.state is not SessionState.FRESH:
            raise InvalidState(f"start() in state {self.state.name}")
        g = derive_generator(self._pin, self.params, self._hash_to_int)
        # [2, q-1]: excludes the exponents that would land on 1.
        self._exponent = self._rng.randrange(2, self.params.subgroup_order)
        commit = pow(g.value, self._exponent, self.params.prime_modulus)
        self._own_commit = GroupElement(commit, self.params)
        self.state = SessionState.SENT_COMMIT
        return self._own_commit

    def receive_commit(self, peer_commit) -> SessionKeys:
        """Derive the shared secret and session keys from the peer's commit."""
        if self.state is not SessionState.SENT_COMMIT:
            raise InvalidState(f"receive_commit() in state {self.state.name}")
        try:
            if isinstance(peer_commit, GroupElement):
                if peer_commit.params is not self.params:
                    raise ValueError("peer commit uses different group parameters")
                peer = peer_commit
            else:
                peer = GroupElement(int(peer_commit), self.params)
        except DegenerateElement:
            self.state = SessionState.FAILED
            raise
        secret = pow(peer.value, self._exponent, self.params.prime_modulus)
        secret_bytes = secret.to_bytes(self.params.element_len, "big")
        if self.role is PakeRole.INITIATOR:
            commits = (self._own_commit.to_bytes(), peer.to_bytes())
        else:
            commits = (peer.to_bytes(), self._own_commit.to_bytes())
        transcript = _transcript_hash(self.params.params_id, commits[0], commits[1], self.user_id)
        confirm_key = hashlib.sha256(b"confirm" + secret_bytes + transcript).digest()
        mac_key = hashlib.sha256(b"mac" + secret_bytes + transcript).digest()[:MAC_KEY_LEN]
        self._shared_secret = secret_bytes
        self._keys = SessionKeys(confirm_key, mac_key, transcript)
        return self._keys

    def make_confirmation(self) -> bytes:
        """HMAC over this side's role label and the transcript hash."""
        if self._keys is None:
            raise InvalidState("no keys derived yet")
        return self._confirmation_for(self.role)

    def _confirmation_for(self, role: PakeRole) -> bytes:
        return hmac.new(
            self._keys.confirm_key, role.label + self._keys.transcript_hash, hashlib.sha256
        ).digest()

    def verify_confirmation(self, peer_tag: bytes) -> bool:
        """Constant-time check of the peer's tag; failure erases the keys."""
        if self._keys is None:
            raise InvalidState("no keys derived yet")
        expected = self._confirmation_for(self.role.peer)
        if hmac.compare_digest(expected, peer_tag):
            self.state = SessionState.CONFIRMED
            return True
        self.state = SessionState.FAILED
        self._keys = None
        self._shared_secret = None
        return False

    def erase(self) -> None:
        """Drop PIN, exponent, and key material once the caller is done."""
        self._pin = None
        self._exponent = None
        self._shared_secret = None
        self._keys = None
        self._own_commit = None
