"""Code identities of the shipped roles and the matching default policy."""
from __future__ import annotations

import importlib

from .attestation import Policy, Role, module_identity
from .crypto import CodeIdentity

# The module whose source stands in for each role's enclave binary.
ROLE_MODULES = {
    Role.PRODUCER: "privbus.clients.mdc",
    Role.AGGREGATOR: "privbus.aggregator",
    Role.CONSUMER: "privbus.clients.consumer",
    Role.BROKER: "privbus.broker.routing",
}


def role_code(role: Role) -> CodeIdentity:
    return module_identity(importlib.import_module(ROLE_MODULES[role]))


def default_policy(max_quote_age_ms: int = 30_000) -> Policy:
    return Policy({role: frozenset({role_code(role)}) for role in Role}, max_quote_age_ms)
