"""Trusted setup component. Started only by the SAS, it dials the provider
registered for the service tag's handle, runs the PIN-keyed exchange,
verifies the sealed reference measurement against the locally measured
package, and only on an exact digest match releases the PIN into the app's
private storage and launches it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from . import wire
from .attest import AuthenticationFailure, measure_package, open_measurement
from .device import BROKER_HANDLE, DeviceState, render_confirmation_screen
from .pake import (
    DEFAULT_PARAMS_ID,
    DegenerateElement,
    GroupElement,
    PakeRole,
    PakeSession,
    PARAMETER_SETS,
    Pin,
)
from .wire import (
    Abort,
    AbortReason,
    FrameTooLarge,
    M1,
    M2,
    M3,
    M4,
    M5,
    MalformedMessage,
    Transcript,
    Transport,
    TransportClosed,
)

NETWORK_STEP_TIMEOUT = 30.0


class MalformedTag(Exception):
    """Service tag does not parse as 'handle:user_id'."""


@dataclass(frozen=True)
class ServiceTag:
    """'handle:user_id' routing string from the provisioning letter."""

    handle: str
    user_id: str

    def __post_init__(self) -> None:
        if not self.handle or ":" in self.handle:
            raise MalformedTag("bad handle")
        try:
            wire.validate_user_id(self.user_id)
        except ValueError as exc:
            raise MalformedTag(str(exc)) from exc

    def text(self) -> str:
        return f"{self.handle}:{self.user_id}"


def parse_service_tag(text: str) -> ServiceTag:
    """Split on the first ':'; both parts must be valid."""
    if ":" not in text:
        raise MalformedTag("missing ':'")
    handle, _, user_id = text.partition(":")
    return ServiceTag(handle, user_id)


class SetupOutcome(str, Enum):
    SUCCESS = "success"
    ABORT_PAKE_FAILED = "abort_pake_failed"
    ABORT_AUTH_FAILED = "abort_auth_failed"
    ABORT_MEASUREMENT_MISMATCH = "abort_measurement_mismatch"
    ABORT_NO_SUCH_APP = "abort_no_such_app"
    ABORT_TRANSPORT = "abort_transport"


@dataclass
class SetupResult:
    outcome: SetupOutcome
    transcript: Transcript


TransportFactory = Callable[[str, Transcript], Transport]

_ABORT_TO_OUTCOME = {
    AbortReason.PAKE_CONFIRM_FAILED: SetupOutcome.ABORT_PAKE_FAILED,
    AbortReason.AUTH_FAILED: SetupOutcome.ABORT_AUTH_FAILED,
    AbortReason.MEASUREMENT_MISMATCH: SetupOutcome.ABORT_MEASUREMENT_MISMATCH,
    AbortReason.MALFORMED: SetupOutcome.ABORT_TRANSPORT,
    AbortReason.TIMEOUT: SetupOutcome.ABORT_TRANSPORT,
}


class _SetupAbort(Exception):
    def __init__(self, outcome: SetupOutcome, notify_peer: Optional[AbortReason] = None) -> None:
        self.outcome = outcome
        self.notify_peer = notify_peer


def _expect(msg, expected_type):
    if isinstance(msg, Abort):
        raise _SetupAbort(_ABORT_TO_OUTCOME[msg.reason])
    if not isinstance(msg, expected_type):
        # Out-of-order message: a protocol violation by the peer.
        raise _SetupAbort(SetupOutcome.ABORT_TRANSPORT, notify_peer=AbortReason.MALFORMED)
    return msg


def run_setup(
    state: DeviceState,
    tag: ServiceTag,
    pin: Pin,
    transport_factory: TransportFactory,
    rng=None,
    params_id: str = DEFAULT_PARAMS_ID,
) -> SetupResult:
    """Execute the setup protocol from the broker side.

    Must be entered through the SAS: the foreground lock has to be held by
    the broker. The PIN is dropped from broker-held structures on every
    exit path; on success it lives only in the target app's storage.
    """
    if not state.foreground_locked or state.foreground_handle() != BROKER_HANDLE:
        raise RuntimeError("run_setup requires the SAS-held foreground lock")

    transcript = Transcript()
    params = PARAMETER_SETS[params_id]
    state.log("broker_setup_start", handle=tag.handle)

    url = state.registry.get(tag.handle)
    app = state.apps.get(tag.handle)
    transport: Optional[Transport] = None
    session: Optional[PakeSession] = None
    try:
        if url is None or app is None:
            raise _SetupAbort(SetupOutcome.ABORT_NO_SUCH_APP)
        try:
            transport = transport_factory(url, transcript)
        except Exception:
            raise _SetupAbort(SetupOutcome.ABORT_TRANSPORT)

        session = PakeSession(PakeRole.INITIATOR, pin, params, user_id=tag.user_id, rng=rng)
        try:
            commit = session.start()
            transport.send(M1(user_id=tag.user_id, commit=commit.value, params_id=params_id))
            m2 = _expect(transport.recv(), M2)
            try:
                peer = GroupElement(m2.commit, params)
            except DegenerateElement:
                raise _SetupAbort(
                    SetupOutcome.ABORT_PAKE_FAILED, notify_peer=AbortReason.MALFORMED
                )
            session.receive_commit(peer)
            transport.send(M3(session.make_confirmation()))
            m4 = _expect(transport.recv(), M4)
            if not session.verify_confirmation(m4.confirm):
                raise _SetupAbort(
                    SetupOutcome.ABORT_PAKE_FAILED, notify_peer=AbortReason.PAKE_CONFIRM_FAILED
                )
            m5 = _expect(transport.recv(), M5)
            keys = session.keys
            try:
                reference = open_measurement(m5.attestation, keys)
            except AuthenticationFailure:
                raise _SetupAbort(
                    SetupOutcome.ABORT_AUTH_FAILED, notify_peer=AbortReason.AUTH_FAILED
                )
            local = measure_package(app.package.package_bytes)
            state.log("broker_measured", handle=tag.handle, match=local.digest == reference.digest)
            if local.digest != reference.digest:
                raise _SetupAbort(
                    SetupOutcome.ABORT_MEASUREMENT_MISMATCH,
                    notify_peer=AbortReason.MEASUREMENT_MISMATCH,
                )
        except MalformedMessage:
            raise _SetupAbort(SetupOutcome.ABORT_TRANSPORT, notify_peer=AbortReason.MALFORMED)
        except (TransportClosed, FrameTooLarge):
            raise _SetupAbort(SetupOutcome.ABORT_TRANSPORT)

        state.broker_write_storage(tag.handle, "setup_pin", pin.digits)
        state.log("broker_setup_success", handle=tag.handle)
        state.broker_notice = None
        state.broker_release(launch=tag.handle)
        return SetupResult(SetupOutcome.SUCCESS, transcript)

    except _SetupAbort as abort:
        if abort.notify_peer is not None and transport is not None:
            try:
                transport.send(Abort(abort.notify_peer))
            except (TransportClosed, FrameTooLarge, OSError):
                pass
        # Abort notice is shown on the broker's own screen while the lock
        # still holds, so it cannot be spoofed by an app.
        state.broker_notice = abort.outcome.value
        state.log("broker_abort_notice", reason=abort.outcome.value)
        state.broker_release(launch=None)
        return SetupResult(abort.outcome, transcript)
    finally:
        if session is not None:
            session.erase()
        state._broker_entry = None
        if transport is not None:
            transport.close()


def launch_and_display(state: DeviceState, handle: str) -> Optional[str]:
    """Render the freshly launched app's confirmation screen and return the
    PIN it shows (read from its own storage), for the user to verify."""
    screen = render_confirmation_screen(state, handle)
    return screen.pin
