"""Signature schemes and wallet address derivation.

The core only relies on sign(bytes) -> sig and verify(bytes, sig, pk) -> bool.
Ed25519 is the default; the keyed-hash scheme is a fast stand-in for tests that
create thousands of identities.
"""
import hashlib
import hmac
import logging
from typing import Dict, Tuple

from cchp_chain.config import SIGNATURE_SCHEME

logger = logging.getLogger("crypto")

try:
    from cryptography.exceptions import InvalidSignature
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric.ed25519 import (
        Ed25519PrivateKey,
        Ed25519PublicKey,
    )

    _HAS_CRYPTOGRAPHY = True
except ImportError:  # pragma: no cover
    _HAS_CRYPTOGRAPHY = False
    logger.warning("⚠️ cryptography not installed - only the keyed-hash scheme is available")


class SignatureScheme:
    """Deterministic keypairs from seeds plus sign/verify."""

    name = "abstract"

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        """Return (private_key, public_key) derived from seed."""
        raise NotImplementedError

    def sign(self, private_key: bytes, data: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, public_key: bytes, data: bytes, signature: bytes) -> bool:
        raise NotImplementedError


class Ed25519Scheme(SignatureScheme):
    name = "ed25519"

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        private = Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())
        public = private.public_key().public_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PublicFormat.Raw,
        )
        raw = private.private_bytes(
            encoding=serialization.Encoding.Raw,
            format=serialization.PrivateFormat.Raw,
            encryption_algorithm=serialization.NoEncryption(),
        )
        return raw, public

    def sign(self, private_key: bytes, data: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(private_key).sign(data)

    def verify(self, public_key: bytes, data: bytes, signature: bytes) -> bool:
        try:
            Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
            return True
        except (InvalidSignature, ValueError):
            return False


class KeyedHashScheme(SignatureScheme):
    """HMAC-SHA256 keyed by the public key. Not secure; verification is symmetric."""

    name = "keyed-hash"

    def keypair(self, seed: bytes) -> Tuple[bytes, bytes]:
        private = hashlib.sha256(b"keyed-hash/private" + seed).digest()
        return private, hashlib.sha256(private).digest()

    def sign(self, private_key: bytes, data: bytes) -> bytes:
        public = hashlib.sha256(private_key).digest()
        return hmac.new(public, data, hashlib.sha256).digest()

    def verify(self, public_key: bytes, data: bytes, signature: bytes) -> bool:
        expected = hmac.new(public_key, data, hashlib.sha256).digest()
        return hmac.compare_digest(expected, signature)


_SCHEMES: Dict[str, type] = {
    Ed25519Scheme.name: Ed25519Scheme,
    KeyedHashScheme.name: KeyedHashScheme,
}


def get_scheme(name: str = SIGNATURE_SCHEME) -> SignatureScheme:
    """Instantiate a signature scheme by name ("ed25519" or "keyed-hash")."""
    if name not in _SCHEMES:
        raise ValueError(f"unknown signature scheme {name!r}; choose from {sorted(_SCHEMES)}")
    if name == Ed25519Scheme.name and not _HAS_CRYPTOGRAPHY:
        raise ValueError("ed25519 requires the cryptography package")
    return _SCHEMES[name]()


def wallet_address(public_key: bytes) -> str:
    """Pseudonymous address: a one-way function of the public key."""
    return "0x" + hashlib.sha256(b"wallet" + public_key).hexdigest()[:40]
