"""Package measurement and the MAC-sealed measurement message.

A measurement is the SHA-256 of the exact installation-package bytes. The
bank seals its reference measurement under the session MAC key; the broker
opens it with a constant-time tag check before trusting the digest.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from .pake import SessionKeys

DIGEST_LEN = 32
TAG_LEN = 32
PAYLOAD_LEN = DIGEST_LEN + TAG_LEN


class AuthenticationFailure(Exception):
    """Measurement-message tag did not verify: tampering or impersonation."""


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    def __post_init__(self) -> None:
        if len(self.digest) != DIGEST_LEN:
            raise ValueError("measurement digest must be 32 octets")

    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class AttestationMessage:
    measurement: Measurement
    tag: bytes

    def __post_init__(self) -> None:
        if len(self.tag) != TAG_LEN:
            raise ValueError("tag must be 32 octets")

    def payload(self) -> bytes:
        """digest ‖ tag, always exactly 64 octets."""
        return self.measurement.digest + self.tag

    @classmethod
    def from_payload(cls, raw: bytes) -> "AttestationMessage":
        if len(raw) != PAYLOAD_LEN:
            raise ValueError("attestation payload must be 64 octets")
        return cls(Measurement(raw[:DIGEST_LEN]), raw[DIGEST_LEN:])


def measure_package(package_bytes: bytes) -> Measurement:
    return Measurement(hashlib.sha256(package_bytes).digest())


def seal_measurement(measurement: Measurement, keys: SessionKeys) -> AttestationMessage:
    tag = hmac.new(keys.mac_key, measurement.digest, hashlib.sha256).digest()
    return AttestationMessage(measurement, tag)


def open_measurement(msg: AttestationMessage, keys: SessionKeys) -> Measurement:
    expected = hmac.new(keys.mac_key, msg.measurement.digest, hashlib.sha256).digest()
    if not hmac.compare_digest(expected, msg.tag):
        raise AuthenticationFailure("attestation tag mismatch")
    return msg.measurement
