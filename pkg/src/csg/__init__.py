"""Encrypted cloud storage gateway: a from-scratch AES-128 tunnel with
two-phase authentication, certificate-checked access, and per-customer
encrypted object storage."""

__version__ = "0.1.0"
