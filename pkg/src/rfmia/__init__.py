"""Membership inference against RF-fingerprint authentication, and a defense."""

__version__ = "0.1.0"
