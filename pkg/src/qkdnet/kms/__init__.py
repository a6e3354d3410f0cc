from .protocol import KmsClient, KmsService, ProtocolError, Verb
from .store import (
    HybridizationError,
    HybridPolicy,
    IntegrityAlarm,
    KeyConsumed,
    KeySession,
    KeyStore,
    KmsError,
    NoKeyAvailable,
    Qos,
    QosUnsatisfiable,
    UnknownKey,
    UnknownSession,
    UnknownSupplier,
    hybrid_key_id,
    hybrid_supplier_id,
    owns,
)

__all__ = [
    "HybridPolicy",
    "HybridizationError",
    "IntegrityAlarm",
    "KeyConsumed",
    "KeySession",
    "KeyStore",
    "KmsClient",
    "KmsError",
    "KmsService",
    "NoKeyAvailable",
    "ProtocolError",
    "Qos",
    "QosUnsatisfiable",
    "UnknownKey",
    "UnknownSession",
    "UnknownSupplier",
    "Verb",
    "hybrid_key_id",
    "hybrid_supplier_id",
    "owns",
]
