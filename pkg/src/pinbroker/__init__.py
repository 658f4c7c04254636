"""Secure setup of personalized security indicators on a simulated phone.

An on-device broker and a bank provisioning service run a PIN-keyed key
exchange, attest the installed application, and release the PIN into the
application's sandboxed storage; five phishing behaviors run against the
flow inside a deterministic device simulator.
"""

__version__ = "0.1.0"
