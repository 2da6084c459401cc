"""Operator key files.

A key file is self-contained: it carries the group parameters and the
server public key along with the holder's own material, so a client needs
nothing but the file and a server address.  Written with mode 0600.

Format (textual, hex values)::

    # custodia key file v1
    role = manager | supervisor | patient
    p = ...
    q = ...
    g = ...
    server_public = ...
    private = ...
    public = ...
    access_key = ...    # managers and supervisors only
    view_key = ...      # supervisors only
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from . import groups
from .groups import GroupParams, KeyPair

HEADER = "# custodia key file v1"


@dataclass(frozen=True)
class KeyFile:
    role: str
    params: GroupParams
    server_public: int
    keypair: KeyPair
    access_key: int | None = None
    view_key: int | None = None

    @property
    def genesis_id(self) -> int:
        return groups.hash_to_field(self.params, self.params.encode(self.keypair.public))


def save_keyfile(path: str | Path, keyfile: KeyFile) -> None:
    lines = [
        HEADER,
        f"role = {keyfile.role}",
        f"p = {keyfile.params.p:x}",
        f"q = {keyfile.params.q:x}",
        f"g = {keyfile.params.g:x}",
        f"server_public = {keyfile.server_public:x}",
        f"private = {keyfile.keypair.private:x}",
        f"public = {keyfile.keypair.public:x}",
    ]
    if keyfile.access_key is not None:
        lines.append(f"access_key = {keyfile.access_key:x}")
    if keyfile.view_key is not None:
        lines.append(f"view_key = {keyfile.view_key:x}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_keyfile(path: str | Path) -> KeyFile:
    fields: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    try:
        params = GroupParams(p=int(fields["p"], 16), q=int(fields["q"], 16),
                             g=int(fields["g"], 16))
        private = int(fields["private"], 16)
        public = int(fields["public"], 16)
        keyfile = KeyFile(
            role=fields["role"],
            params=params,
            server_public=int(fields["server_public"], 16),
            keypair=KeyPair(private=private, public=public,
                            private_inv=groups.exponent_inverse(private, params)),
            access_key=int(fields["access_key"], 16) if "access_key" in fields else None,
            view_key=int(fields["view_key"], 16) if "view_key" in fields else None,
        )
    except KeyError as missing:
        raise ValueError(f"key file missing field {missing}") from None
    if pow(params.g, keyfile.keypair.private, params.p) != public:
        raise ValueError("key file public key does not match private key")
    return keyfile
