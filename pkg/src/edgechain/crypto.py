"""Deterministic account keys and addresses for the simulated network."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

ADDRESS_LEN = 20


class EmptySeedError(ValueError):
    """Raised when an account seed is empty."""


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def derive_address(public_key: bytes) -> bytes:
    """Address = first 20 bytes of SHA-256 of the account public key."""
    return sha256(public_key)[:ADDRESS_LEN]


@dataclass(frozen=True)
class Keypair:
    secret: bytes
    public_key: bytes
    address: bytes


class MockSignatureScheme:
    """Deterministic stand-in for a real signature scheme.

    public_key = SHA-256(secret), signature = SHA-256(secret || message).
    Verification re-derives the signature, so the scheme keeps a local
    public-key -> secret table for every keypair it has issued.  Adequate
    for a closed simulation; not a security boundary.  Any object with the
    same keypair_from_seed / sign / verify surface can be swapped in.
    """

    def __init__(self) -> None:
        self._secrets: dict[bytes, bytes] = {}

    def keypair_from_seed(self, seed: bytes) -> Keypair:
        if not seed:
            raise EmptySeedError("account seed must be non-empty")
        secret = bytes(seed)
        public_key = sha256(secret)
        self._secrets[public_key] = secret
        return Keypair(secret=secret, public_key=public_key, address=derive_address(public_key))

    def sign(self, secret: bytes, message: bytes) -> bytes:
        return sha256(secret + message)

    def verify(self, public_key: bytes, message: bytes, signature: bytes) -> bool:
        secret = self._secrets.get(public_key)
        if secret is None:
            return False
        return self.sign(secret, message) == signature
