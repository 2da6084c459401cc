"""User registry: role and genesis block id per public key.

Roles are immutable once provisioned.  Custodian is the umbrella term for
managers and supervisors; only custodians may open protocol sessions, only
patients own identity records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .groups import GroupParams
from .storage import KVStore

USER_PREFIX = b"usr/"

ROLE_MANAGER = "manager"
ROLE_SUPERVISOR = "supervisor"
ROLE_PATIENT = "patient"

CUSTODIAN_ROLES = (ROLE_MANAGER, ROLE_SUPERVISOR)


@dataclass(frozen=True)
class UserRecord:
    public_key: int
    role: str
    genesis_id: int


class UserRegistry:
    def __init__(self, store: KVStore, params: GroupParams) -> None:
        self._store = store
        self._params = params

    def _key(self, public_key: int) -> bytes:
        return USER_PREFIX + self._params.encode(public_key)

    def add(self, record: UserRecord) -> None:
        if record.role not in (ROLE_MANAGER, ROLE_SUPERVISOR, ROLE_PATIENT):
            raise ValueError(f"unknown role {record.role!r}")
        if self._store.get(self._key(record.public_key)) is not None:
            raise ValueError("user already registered; roles are immutable")
        value = json.dumps({"role": record.role, "genesis": f"{record.genesis_id:x}"})
        self._store.put(self._key(record.public_key), value.encode())

    def get(self, public_key: int) -> UserRecord | None:
        raw = self._store.get(self._key(public_key))
        if raw is None:
            return None
        doc = json.loads(raw)
        return UserRecord(public_key, doc["role"], int(doc["genesis"], 16))

    def all_users(self) -> list[UserRecord]:
        out = []
        for key, _ in self._store.scan_prefix(USER_PREFIX):
            out.append(self.get(self._params.decode(key[len(USER_PREFIX):])))
        return out
