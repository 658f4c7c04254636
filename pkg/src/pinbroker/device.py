"""Deterministic model of a phone: sandboxed apps, a foreground stack with
a secure attention sequence and foreground lock, a scripted user, and the
five phishing behaviors that run against indicator setup and login.

Everything nondeterministic flows through the seeded device RNG, so a run
is fully reproduced by its seed; the event log is the audit trail.
"""

from __future__ import annotations

import hashlib
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

from .pake import PIN_SPACE, Pin

BROKER_HANDLE = "<broker>"

MAINTENANCE_NOTICE = "temporarily unavailable - maintenance"


class SandboxViolation(Exception):
    """Storage access attempted under the wrong app identity."""


class NoMail(Exception):
    """User action needs the mailed PIN and tag, but none arrived."""


class SetupIncomplete(Exception):
    """Login attempted before an indicator was set up."""


class Behavior(str, Enum):
    LEGIT = "legit"
    SIMILARITY = "similarity"
    FORWARDING = "forwarding"
    BACKGROUND = "background"
    NOTIFICATION = "notification"
    FLOATING = "floating"


class Variant(str, Enum):
    MISSING_IMAGE = "missing_image"
    RANDOM_IMAGE = "random_image"
    MAINTENANCE = "maintenance"


class LoginOutcome(str, Enum):
    CREDENTIALS_ENTERED = "credentials_entered"
    DETECTED = "detected"


@dataclass(frozen=True)
class SecureApkTag:
    url: str
    handle: str


@dataclass(frozen=True)
class AppPackage:
    handle: str
    display_name: str
    package_bytes: bytes
    secureapk: Optional[SecureApkTag] = None

    def __post_init__(self) -> None:
        if not self.handle or ":" in self.handle or "<" in self.handle:
            raise ValueError("bad app handle")
        if self.secureapk is not None and self.secureapk.handle != self.handle:
            raise ValueError("secureapk handle must match the package handle")


@dataclass
class InstalledApp:
    package: AppPackage
    behavior: Behavior = Behavior.LEGIT
    storage: Dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Indicator:
    image_id: str
    blob: bytes


@dataclass(frozen=True)
class Screen:
    """What is rendered: structured fields, not pixels. Phishing succeeds
    exactly when the rendered fields are indistinguishable."""

    owner: str
    identity: str
    indicator: Optional[bytes] = None
    pin: Optional[str] = None
    notice: Optional[str] = None
    fields: Tuple[str, ...] = ()


@dataclass(frozen=True)
class Alertness:
    kind: str  # "always" | "never" | "probabilistic"
    p: float = 0.0

    @classmethod
    def always(cls) -> "Alertness":
        return cls("always")

    @classmethod
    def never(cls) -> "Alertness":
        return cls("never")

    @classmethod
    def probabilistic(cls, p: float) -> "Alertness":
        if not 0.0 <= p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        return cls("probabilistic", p)

    def decides_to_check(self, rng: random.Random) -> bool:
        if self.kind == "always":
            return True
        if self.kind == "never":
            return False
        return rng.random() < self.p


@dataclass
class UserAgent:
    alertness: Alertness
    mailbox: Optional[Tuple[Pin, str]] = None
    chosen_indicator: Optional[bytes] = None


class DeviceState:
    def __init__(self, seed: int, gallery_size: int = 6) -> None:
        self.seed = seed
        self.rng = random.Random(seed)
        self.apps: Dict[str, InstalledApp] = {}
        self.foreground: List[str] = []
        self.foreground_locked = False
        self.registry: Dict[str, str] = {}
        self.event_log: List[dict] = []
        self.photogallery: List[Indicator] = [
            Indicator(f"img-{i}", hashlib.sha256(f"gallery|{seed}|{i}".encode()).digest()[:12])
            for i in range(gallery_size)
        ]
        self.overlay_owner: Optional[str] = None
        self.broker_notice: Optional[str] = None
        self._broker_entry: Optional[Tuple[str, Pin]] = None
        self._seq = 0

    # -- event log -------------------------------------------------------

    def log(self, ev: str, **fields) -> None:
        self._seq += 1
        self.event_log.append({"t": self._seq, "ev": ev, **fields})

    def export_events(self) -> str:
        lines = [json.dumps(e, sort_keys=True, separators=(",", ":")) for e in self.event_log]
        return "\n".join(lines) + ("\n" if lines else "")

    # -- installation ----------------------------------------------------

    def install(self, package: AppPackage, behavior: Behavior = Behavior.LEGIT) -> None:
        self.apps[package.handle] = InstalledApp(package=package, behavior=behavior)
        self.log("install", app=package.handle, size=len(package.package_bytes))
        if package.secureapk is not None:
            self.registry[package.handle] = package.secureapk.url
            self.log("register", app=package.handle, url=package.secureapk.url)

    # -- foreground / focus ----------------------------------------------

    def foreground_handle(self) -> Optional[str]:
        return self.foreground[-1] if self.foreground else None

    def focus_owner(self) -> Optional[str]:
        return self.overlay_owner if self.overlay_owner is not None else self.foreground_handle()

    def request_foreground(self, handle: str) -> bool:
        if self.foreground_locked and handle != BROKER_HANDLE:
            self.log("foreground_denied", app=handle)
            return False
        if handle in self.foreground:
            self.foreground.remove(handle)
        self.foreground.append(handle)
        self.log("foreground", app=handle)
        return True

    def set_overlay(self, handle: str) -> bool:
        if self.foreground_locked:
            self.log("overlay_denied", app=handle)
            return False
        self.overlay_owner = handle
        self.log("overlay_set", app=handle)
        return True

    def clear_overlay(self) -> None:
        if self.overlay_owner is not None:
            self.log("overlay_cleared", app=self.overlay_owner)
            self.overlay_owner = None

    def sas_trigger(self) -> None:
        """Double home-press: unconditionally foregrounds the broker and
        locks the foreground until the broker releases it."""
        self.clear_overlay()
        self.foreground_locked = True
        if BROKER_HANDLE in self.foreground:
            self.foreground.remove(BROKER_HANDLE)
        self.foreground.append(BROKER_HANDLE)
        self.log("sas")

    def broker_release(self, launch: Optional[str] = None) -> None:
        self.foreground_locked = False
        if BROKER_HANDLE in self.foreground:
            self.foreground.remove(BROKER_HANDLE)
        self.log("broker_release")
        if launch is not None:
            self.request_foreground(launch)
            self.log("launch", app=launch)

    # -- sandboxed storage -------------------------------------------------

    def storage_put(self, caller: str, owner: str, key: str, value) -> None:
        if caller != owner:
            self.log("sandbox_denied", op="write", by=caller, app=owner, key=key)
            raise SandboxViolation(f"{caller} cannot write storage of {owner}")
        self.apps[owner].storage[key] = value
        self.log("storage_write", app=owner, key=key, by=caller)

    def storage_get(self, caller: str, owner: str, key: str, default=None):
        if caller != owner:
            self.log("sandbox_denied", op="read", by=caller, app=owner, key=key)
            raise SandboxViolation(f"{caller} cannot read storage of {owner}")
        self.log("storage_read", app=owner, key=key, by=caller)
        return self.apps[owner].storage.get(key, default)

    def broker_write_storage(self, handle: str, key: str, value) -> None:
        """TCB-privileged write into an app's private folder."""
        self.apps[handle].storage[key] = value
        self.log("broker_storage_write", app=handle, key=key)


# -- event-log audits ------------------------------------------------------


def audit_storage_access(event_log: List[dict]) -> List[dict]:
    """Granted cross-identity storage events (must always be empty)."""
    return [
        e
        for e in event_log
        if e["ev"] in ("storage_read", "storage_write") and e["by"] != e["app"]
    ]


def audit_foreground_lock(event_log: List[dict]) -> List[dict]:
    """Foreground transitions to non-broker apps inside a lock window."""
    violations = []
    locked = False
    for e in event_log:
        if e["ev"] == "sas":
            locked = True
        elif e["ev"] == "broker_release":
            locked = False
        elif locked and e["ev"] == "foreground" and e["app"] != BROKER_HANDLE:
            violations.append(e)
    return violations


# -- screen rendering --------------------------------------------------------


def _is_focused(state: DeviceState, handle: str) -> bool:
    return state.foreground_handle() == handle and state.focus_owner() == handle


def render_login_screen(state: DeviceState, handle: str) -> Screen:
    """The app's own login screen; the indicator is hidden on focus loss."""
    app = state.apps[handle]
    focused = _is_focused(state, handle)
    indicator = state.storage_get(handle, handle, "indicator") if focused else None
    state.log("render_login", app=handle, focused=focused, indicator_shown=indicator is not None)
    return Screen(
        owner=handle,
        identity=app.package.display_name,
        indicator=indicator,
        fields=("username", "password"),
    )


def render_confirmation_screen(state: DeviceState, handle: str) -> Screen:
    """Post-setup screen: released PIN plus the indicator chooser. The PIN
    is rendered only while the app is focused (same focus-loss rule)."""
    app = state.apps[handle]
    focused = _is_focused(state, handle)
    pin = state.storage_get(handle, handle, "setup_pin") if focused else None
    state.log("render_confirmation", app=handle, focused=focused, pin_shown=pin is not None)
    return Screen(
        owner=handle,
        identity=app.package.display_name,
        pin=pin,
        fields=("choose_indicator",),
    )


def _gallery_blob_excluding(state: DeviceState, excluded: Optional[bytes]) -> bytes:
    candidates = [i.blob for i in state.photogallery if i.blob != excluded]
    return state.rng.choice(candidates)


def _wrong_pin(state: DeviceState, real: Optional[str]) -> str:
    while True:
        fake = f"{state.rng.randrange(PIN_SPACE):05d}"
        if fake != real:
            return fake


def render_phishing_login(
    state: DeviceState, attacker: str, target: str, variant: Optional[Variant]
) -> Screen:
    """Clone of the target's login screen. The attacker cannot read the real
    indicator, so the indicator slot follows the chosen variant."""
    target_app = state.apps[target]
    variant = variant or Variant.MISSING_IMAGE
    indicator = None
    notice = None
    if variant is Variant.RANDOM_IMAGE:
        stored = target_app.storage.get("indicator")
        indicator = _gallery_blob_excluding(state, stored)
    elif variant is Variant.MAINTENANCE:
        notice = MAINTENANCE_NOTICE
    state.log("render_phishing", app=attacker, mimics=target, screen="login", variant=variant.value)
    return Screen(
        owner=attacker,
        identity=target_app.package.display_name,
        indicator=indicator,
        notice=notice,
        fields=("username", "password"),
    )


def render_phishing_confirmation(
    state: DeviceState,
    attacker: str,
    target: str,
    variant: Optional[Variant],
    mailed_pin: Optional[Pin],
) -> Screen:
    """Fake setup-confirmation screen. The attacker never knows the mailed
    PIN, so the slot is empty, a wrong PIN, or a maintenance notice."""
    target_app = state.apps[target]
    variant = variant or Variant.MISSING_IMAGE
    pin = None
    notice = None
    if variant is Variant.RANDOM_IMAGE:
        pin = _wrong_pin(state, mailed_pin.digits if mailed_pin else None)
    elif variant is Variant.MAINTENANCE:
        notice = MAINTENANCE_NOTICE
    state.log(
        "render_phishing", app=attacker, mimics=target, screen="confirmation", variant=variant.value
    )
    return Screen(
        owner=attacker,
        identity=target_app.package.display_name,
        pin=pin,
        notice=notice,
        fields=("choose_indicator",),
    )


# -- scripted user ----------------------------------------------------------


def user_read_mail(agent: UserAgent, state: DeviceState, pin: Pin, tag_text: str) -> None:
    agent.mailbox = (pin, tag_text)
    state.log("mail_received", tag=tag_text)


def user_enter_pin(agent: UserAgent, state: DeviceState) -> str:
    """Types the mailed (tag, PIN) into whatever owns input focus.

    This is the phishable act: only the SAS guarantees the receiver is the
    broker. Returns the receiving handle.
    """
    if agent.mailbox is None:
        raise NoMail("no mailed PIN to enter")
    target = state.focus_owner()
    if target is None:
        raise RuntimeError("nothing has input focus")
    pin, tag_text = agent.mailbox
    if target == BROKER_HANDLE:
        state._broker_entry = (tag_text, pin)
        state.log("pin_entry", to="broker")
    else:
        state.storage_put(target, target, "captured_tag", tag_text)
        state.storage_put(target, target, "captured_pin", pin.digits)
        state.log("pin_entry", to=target)
    return target


def user_verify_pin_display(agent: UserAgent, state: DeviceState, shown: Optional[str]) -> bool:
    """Compare the rendered PIN with the mailed one, per alertness policy."""
    if agent.mailbox is None:
        raise NoMail("no mailed PIN to verify against")
    checked = agent.alertness.decides_to_check(state.rng)
    ok = (shown == agent.mailbox[0].digits) if checked else True
    state.log("pin_verify", shown=shown is not None, checked=checked, ok=ok)
    return ok


def user_choose_indicator(agent: UserAgent, state: DeviceState, handle: Optional[str] = None) -> None:
    """Pick a gallery image and hand it to the focused app for storage."""
    target = handle if handle is not None else state.focus_owner()
    if target is None or target == BROKER_HANDLE:
        raise RuntimeError("no app to receive the indicator")
    indicator = state.rng.choice(state.photogallery)
    state.storage_put(target, target, "indicator", indicator.blob)
    agent.chosen_indicator = indicator.blob
    state.log("indicator_chosen", app=target, image=indicator.image_id)


# -- attacks -----------------------------------------------------------------


@dataclass(frozen=True)
class AttackSpec:
    behavior: Behavior
    attacker_handle: str
    variant: Optional[Variant] = None


@dataclass
class AttackReport:
    """What one attack run achieved. Carries flags only: the PIN digits and
    the indicator blob never appear in report fields."""

    behavior: str
    phase: str
    variant: Optional[str]
    outcome: str
    detected: bool = False
    phish_declined: bool = False
    captured_pin: bool = False
    captured_credentials: bool = False
    captured_indicator: bool = False
    setup_outcome: Optional[str] = None
    login_outcome: Optional[str] = None


SETUP_SUCCESS = "success"

SetupRunner = Callable[[], str]


def run_setup_flow(
    state: DeviceState,
    agent: UserAgent,
    pin: Pin,
    tag_text: str,
    setup_runner: SetupRunner,
    target_handle: str,
    attack: Optional[AttackSpec] = None,
) -> Tuple[str, bool]:
    """Scripted indicator setup, with the attack's moves at its trigger
    points. Returns (flow outcome, pre-SAS phish declined?)."""
    user_read_mail(agent, state, pin, tag_text)
    declined = False

    if attack is not None and attack.behavior is Behavior.FORWARDING:
        # Fake "setup assistant" appears before the user has performed any
        # SAS; the letter says to type the PIN only right after the SAS.
        state.request_foreground(attack.attacker_handle)
        state.log("phish_screen", app=attack.attacker_handle, kind="setup_assistant")
        if agent.alertness.decides_to_check(state.rng):
            declined = True
            state.log("phish_declined", app=attack.attacker_handle)
        else:
            user_enter_pin(agent, state)
            state.log("setup_flow_end", outcome="pin_phished")
            return "pin_phished", declined

    state.sas_trigger()
    if attack is not None:
        # Grab and overlay attempts are denied while the lock holds.
        if attack.behavior in (Behavior.BACKGROUND, Behavior.NOTIFICATION):
            state.request_foreground(attack.attacker_handle)
        elif attack.behavior is Behavior.FLOATING:
            state.set_overlay(attack.attacker_handle)

    user_enter_pin(agent, state)
    outcome = setup_runner()
    if outcome != SETUP_SUCCESS:
        state.log("setup_flow_end", outcome=outcome)
        return outcome, declined

    # The legit app is in the foreground showing its confirmation screen;
    # the lock is gone, so this is where screen-grab attacks strike.
    if attack is not None and attack.behavior in (Behavior.BACKGROUND, Behavior.NOTIFICATION):
        if attack.behavior is Behavior.NOTIFICATION:
            state.log("notification_shown", app=attack.attacker_handle, mimics=target_handle)
        state.request_foreground(attack.attacker_handle)
        screen = render_phishing_confirmation(
            state, attack.attacker_handle, target_handle, attack.variant, pin
        )
    elif attack is not None and attack.behavior is Behavior.FLOATING:
        state.set_overlay(attack.attacker_handle)
        screen = render_confirmation_screen(state, target_handle)
    else:
        screen = render_confirmation_screen(state, target_handle)

    if not user_verify_pin_display(agent, state, screen.pin):
        state.log("setup_flow_end", outcome="user_abort_pin_verification")
        return "user_abort_pin_verification", declined

    user_choose_indicator(agent, state)
    receiver = state.focus_owner()
    outcome = "completed" if receiver == target_handle else "indicator_phished"
    state.log("setup_flow_end", outcome=outcome)
    return outcome, declined


def login(
    state: DeviceState,
    app_handle: str,
    agent: UserAgent,
    attack: Optional[AttackSpec] = None,
) -> LoginOutcome:
    """One login attempt against the legit app, optionally under attack."""
    legit = state.apps[app_handle]
    if "indicator" not in legit.storage:
        raise SetupIncomplete(f"no indicator set up for {app_handle}")

    if attack is None:
        state.request_foreground(app_handle)
        screen = render_login_screen(state, app_handle)
    elif attack.behavior is Behavior.FLOATING:
        state.request_foreground(app_handle)
        state.set_overlay(attack.attacker_handle)
        # Visible UI is still the legit app's, but it lost focus and hides
        # the indicator; the overlay owns the input.
        screen = render_login_screen(state, app_handle)
    elif attack.behavior is Behavior.BACKGROUND:
        state.request_foreground(app_handle)
        state.request_foreground(attack.attacker_handle)
        screen = render_phishing_login(state, attack.attacker_handle, app_handle, attack.variant)
    elif attack.behavior is Behavior.NOTIFICATION:
        state.log("notification_shown", app=attack.attacker_handle, mimics=app_handle)
        state.request_foreground(attack.attacker_handle)
        screen = render_phishing_login(state, attack.attacker_handle, app_handle, attack.variant)
    elif attack.behavior is Behavior.FORWARDING:
        state.request_foreground(attack.attacker_handle)
        state.log("forwarding_bait", app=attack.attacker_handle, mimics=app_handle)
        screen = render_phishing_login(state, attack.attacker_handle, app_handle, attack.variant)
    else:  # SIMILARITY: the user opens the look-alike app directly
        state.request_foreground(attack.attacker_handle)
        screen = render_phishing_login(state, attack.attacker_handle, app_handle, attack.variant)

    checked = agent.alertness.decides_to_check(state.rng)
    genuine = (
        screen.notice is None
        and screen.indicator is not None
        and screen.indicator == agent.chosen_indicator
    )
    ok = genuine if checked else True
    state.log("indicator_check", checked=checked, ok=ok)
    if not ok:
        state.log("login_outcome", outcome=LoginOutcome.DETECTED.value)
        return LoginOutcome.DETECTED

    receiver = state.focus_owner()
    if receiver != app_handle:
        state.storage_put(receiver, receiver, "captured_credentials", "username+password")
    state.log("login_outcome", outcome=LoginOutcome.CREDENTIALS_ENTERED.value, to=receiver)
    return LoginOutcome.CREDENTIALS_ENTERED


def run_attack(
    state: DeviceState,
    agent: UserAgent,
    spec: AttackSpec,
    phase: str,
    setup_runner: SetupRunner,
    pin: Pin,
    tag_text: str,
    target_handle: str,
) -> AttackReport:
    """Run one attack cell end to end and report what the attacker got."""
    if phase not in ("setup", "login"):
        raise ValueError("phase must be 'setup' or 'login'")
    declined = False
    setup_outcome = None
    login_outcome = None
    if phase == "setup":
        outcome, declined = run_setup_flow(
            state, agent, pin, tag_text, setup_runner, target_handle, attack=spec
        )
        setup_outcome = outcome
    else:
        honest, _ = run_setup_flow(state, agent, pin, tag_text, setup_runner, target_handle)
        if honest != "completed":
            raise RuntimeError(f"honest setup failed before the login attack: {honest}")
        setup_outcome = honest
        result = login(state, target_handle, agent, attack=spec)
        login_outcome = result.value
        outcome = result.value

    storage = state.apps[spec.attacker_handle].storage
    attacker_is_target = spec.attacker_handle == target_handle
    return AttackReport(
        behavior=spec.behavior.value,
        phase=phase,
        variant=spec.variant.value if spec.variant else None,
        outcome=outcome,
        detected=outcome in ("user_abort_pin_verification", LoginOutcome.DETECTED.value),
        phish_declined=declined,
        captured_pin="captured_pin" in storage
        or (attacker_is_target and "setup_pin" in storage),
        captured_credentials="captured_credentials" in storage,
        captured_indicator="indicator" in storage,
        setup_outcome=setup_outcome,
        login_outcome=login_outcome,
    )
