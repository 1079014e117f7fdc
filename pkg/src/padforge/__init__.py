"""Adversarial training of a malware classifier guarded by a convex adversary detector."""

__version__ = "0.1.0"
