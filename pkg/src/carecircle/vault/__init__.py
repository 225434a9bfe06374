from .audit import (
    AUDIT_KINDS,
    GENESIS,
    AuditChain,
    AuditError,
    AuditLedger,
    AuditPayloadError,
    AuditRecord,
    ChainVerdict,
    check_payload,
    read_chain,
    verify_chain,
    verify_path,
)
from .crypto import (
    AuthenticationError,
    KeyDestroyedError,
    KeyRing,
    RevocationReport,
    RotationReport,
    SealedRecord,
    SealedStore,
    UnknownKeyError,
    Vault,
    VaultError,
    rotate_keys,
    seal,
    unseal,
)

__all__ = [
    "AUDIT_KINDS", "GENESIS", "AuditChain", "AuditError", "AuditLedger", "AuditPayloadError",
    "AuditRecord", "ChainVerdict", "check_payload", "read_chain", "verify_chain", "verify_path",
    "AuthenticationError", "KeyDestroyedError", "KeyRing", "RevocationReport", "RotationReport",
    "SealedRecord", "SealedStore", "UnknownKeyError", "Vault", "VaultError", "rotate_keys",
    "seal", "unseal",
]
