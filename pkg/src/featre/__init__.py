"""Feature-space trojan scanning, mitigation, and attack tooling."""

__version__ = "0.1.0"
