"""Server-side registry of customers, contracts and credentials, plus the
encrypted per-customer object store.

Registry file: UTF-8, one JSON object per line, binary fields hex-encoded
lowercase. Object file layout: magic "CSG1", version 0x01, 16-byte IV,
u64 big-endian ciphertext length, ciphertext.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import json
import os
import struct
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional

from . import aes
from .keyx import PASSWORD_HASH_ITERATIONS, hash_password

STORAGE_RIGHT = "storage"

OBJECT_MAGIC = b"CSG1"
OBJECT_VERSION = 0x01
OBJECT_HEADER_LEN = 29  # magic(4) + version(1) + iv(16) + ciphertext length(8)

_TMP_PREFIX = ".tmp-"  # reserved for atomic writes; not a legal object name


class ParseError(ValueError):
    """Registry file line does not parse; message names the line number."""


class DuplicateUser(ValueError):
    pass


class AuthFailed(Exception):
    """Unknown user or bad password, deliberately indistinguishable."""


class InvalidName(ValueError):
    pass


class QuotaExceeded(Exception):
    pass


class NoSuchObject(Exception):
    pass


class CorruptObject(Exception):
    """Bad magic, bad length, or padding failure on decrypt."""


class CertVerdict(enum.Enum):
    VALID = "valid"
    EXPIRED = "expired"
    REVOKED = "revoked"
    RIGHTS_MISSING = "rights-missing"


@dataclass(frozen=True)
class Certificate:
    customer_id: str
    issued_at: int
    last_update: int
    expiry_date: int
    rights: tuple[str, ...]
    revoked: bool = False


@dataclass(frozen=True)
class CustomerRecord:
    customer_id: str
    tunnel_user: str
    tunnel_salt: bytes
    tunnel_hash: bytes
    service_user: str
    service_salt: bytes
    service_hash: bytes
    space_path: str
    certificate: Certificate
    quota_bytes: int


def check_certificate(cert: Certificate, now: int) -> CertVerdict:
    """Revocation beats expiry beats missing rights; expiry is inclusive
    (now >= expiry_date is already expired)."""
    if cert.revoked:
        return CertVerdict.REVOKED
    if now >= cert.expiry_date:
        return CertVerdict.EXPIRED
    if STORAGE_RIGHT not in cert.rights:
        return CertVerdict.RIGHTS_MISSING
    return CertVerdict.VALID


def make_customer_record(
    customer_id: str,
    tunnel_user: str,
    tunnel_password: str,
    service_user: str,
    service_password: str,
    space_path: str,
    certificate: Certificate,
    quota_bytes: int,
) -> CustomerRecord:
    """Provisioning helper: draws fresh independent salts and hashes the
    two passwords for storage."""
    tunnel_salt = os.urandom(16)
    service_salt = os.urandom(16)
    return CustomerRecord(
        customer_id=customer_id,
        tunnel_user=tunnel_user,
        tunnel_salt=tunnel_salt,
        tunnel_hash=hash_password(tunnel_password, tunnel_salt),
        service_user=service_user,
        service_salt=service_salt,
        service_hash=hash_password(service_password, service_salt),
        space_path=space_path,
        certificate=certificate,
        quota_bytes=quota_bytes,
    )


class Registry:
    """Read-mostly customer registry; immutable once loaded."""

    def __init__(self, records: Iterable[CustomerRecord] = ()):
        self._by_id: dict[str, CustomerRecord] = {}
        self._by_tunnel_user: dict[str, CustomerRecord] = {}
        self._by_service_user: dict[str, CustomerRecord] = {}
        # dummy credentials keep the unknown-user path the same shape as the
        # known-user path (hash + compare always run)
        self._dummy_salt = bytes(16)
        self._dummy_hash = bytes(32)
        for record in records:
            self.add(record)

    def add(self, record: CustomerRecord) -> None:
        if record.customer_id in self._by_id:
            raise DuplicateUser(f"duplicate customer_id {record.customer_id!r}")
        if record.tunnel_user in self._by_tunnel_user:
            raise DuplicateUser(f"duplicate tunnel_user {record.tunnel_user!r}")
        if record.service_user in self._by_service_user:
            raise DuplicateUser(f"duplicate service_user {record.service_user!r}")
        self._by_id[record.customer_id] = record
        self._by_tunnel_user[record.tunnel_user] = record
        self._by_service_user[record.service_user] = record

    def get(self, customer_id: str) -> CustomerRecord:
        return self._by_id[customer_id]

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[CustomerRecord]:
        return iter(self._by_id.values())

    def check_credentials(self, kind: str, user: str, password: str) -> str:
        """Verify one credential pair; returns the customer_id.

        Unknown user and wrong password raise the same AuthFailed, and both
        paths hash and compare against a same-shape target so timing does
        not reveal whether the user exists.
        """
        if kind == "tunnel":
            record = self._by_tunnel_user.get(user)
            salt = record.tunnel_salt if record else self._dummy_salt
            expected = record.tunnel_hash if record else self._dummy_hash
        elif kind == "service":
            record = self._by_service_user.get(user)
            salt = record.service_salt if record else self._dummy_salt
            expected = record.service_hash if record else self._dummy_hash
        else:
            raise ValueError(f"unknown credential kind {kind!r}")
        digest = hash_password(password, salt, PASSWORD_HASH_ITERATIONS)
        ok = hmac.compare_digest(digest, expected)
        if record is None or not ok:
            raise AuthFailed("auth failed")
        return record.customer_id


def _cert_to_json(cert: Certificate) -> dict:
    return {
        "customer_id": cert.customer_id,
        "issued_at": cert.issued_at,
        "last_update": cert.last_update,
        "expiry_date": cert.expiry_date,
        "rights": list(cert.rights),
        "revoked": cert.revoked,
    }


def _record_to_json(record: CustomerRecord) -> dict:
    return {
        "customer_id": record.customer_id,
        "tunnel_user": record.tunnel_user,
        "tunnel_salt": record.tunnel_salt.hex(),
        "tunnel_hash": record.tunnel_hash.hex(),
        "service_user": record.service_user,
        "service_salt": record.service_salt.hex(),
        "service_hash": record.service_hash.hex(),
        "space_path": record.space_path,
        "certificate": _cert_to_json(record.certificate),
        "quota_bytes": record.quota_bytes,
    }


def _record_from_json(obj: dict) -> CustomerRecord:
    cert = obj["certificate"]
    return CustomerRecord(
        customer_id=str(obj["customer_id"]),
        tunnel_user=str(obj["tunnel_user"]),
        tunnel_salt=bytes.fromhex(obj["tunnel_salt"]),
        tunnel_hash=bytes.fromhex(obj["tunnel_hash"]),
        service_user=str(obj["service_user"]),
        service_salt=bytes.fromhex(obj["service_salt"]),
        service_hash=bytes.fromhex(obj["service_hash"]),
        space_path=str(obj["space_path"]),
        certificate=Certificate(
            customer_id=str(cert["customer_id"]),
            issued_at=int(cert["issued_at"]),
            last_update=int(cert["last_update"]),
            expiry_date=int(cert["expiry_date"]),
            rights=tuple(str(r) for r in cert["rights"]),
            revoked=bool(cert["revoked"]),
        ),
        quota_bytes=int(obj["quota_bytes"]),
    )


def load_registry(path: str | Path) -> Registry:
    registry = Registry()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                record = _record_from_json(obj)
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            registry.add(record)
    return registry


def save_registry(registry: Registry, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in registry:
            fh.write(json.dumps(_record_to_json(record), sort_keys=True) + "\n")


def storage_key(master_key: bytes, customer_id: str) -> bytes:
    """Per-customer at-rest key: first 16 bytes of
    SHA-256(master_key || customer_id || "storage")."""
    return hashlib.sha256(
        master_key + customer_id.encode("utf-8") + b"storage"
    ).digest()[:16]


def _validate_object_name(name: str) -> None:
    if not name or name in (".", ".."):
        raise InvalidName(f"object name {name!r} is reserved or empty")
    if "/" in name or "\\" in name or "\x00" in name:
        raise InvalidName(f"object name {name!r} contains forbidden characters")
    if len(name.encode("utf-8")) > 255:
        raise InvalidName("object name exceeds 255 UTF-8 bytes")
    if name.startswith(_TMP_PREFIX):
        raise InvalidName(f"object name prefix {_TMP_PREFIX!r} is reserved")


def _validate_customer_id(customer_id: str) -> None:
    if not customer_id or customer_id in (".", ".."):
        raise ValueError(f"invalid customer id {customer_id!r}")
    if "/" in customer_id or "\\" in customer_id or "\x00" in customer_id:
        raise ValueError(f"invalid customer id {customer_id!r}")
    if len(customer_id.encode("utf-8")) > 200:
        raise ValueError("customer id too long")


class ObjectStore:
    """Encrypted blob store under root/<customer_id>/<name>.

    Every blob is independently CBC-encrypted under the customer's derived
    storage key with a fresh IV. A sidecar root/<customer_id>.index.json
    records exact plaintext sizes for quota accounting; on startup it is
    reconciled against the directory (headers only reveal ciphertext length,
    which then stands in as a conservative size estimate).

    Writes go through a temp file + atomic rename and are serialized by one
    coarse store-wide lock.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._sizes: dict[str, dict[str, int]] = {}
        self._scan()

    # --- startup reconciliation ---

    def _dir(self, customer_id: str) -> Path:
        return self.root / customer_id

    def _sidecar(self, customer_id: str) -> Path:
        return self.root / f"{customer_id}.index.json"

    def _scan(self) -> None:
        for entry in sorted(self.root.iterdir()):
            if not entry.is_dir():
                continue
            customer_id = entry.name
            recorded: dict[str, int] = {}
            sidecar = self._sidecar(customer_id)
            if sidecar.is_file():
                try:
                    loaded = json.loads(sidecar.read_text(encoding="utf-8"))
                    recorded = {str(k): int(v) for k, v in loaded.items()}
                except (ValueError, TypeError, AttributeError):
                    recorded = {}
            sizes: dict[str, int] = {}
            for f in sorted(entry.iterdir()):
                if not f.is_file() or f.name.startswith(_TMP_PREFIX):
                    continue
                ct_len = self._header_ciphertext_len(f)
                if ct_len is None:
                    continue
                sizes[f.name] = recorded.get(f.name, ct_len)
            if sizes:
                self._sizes[customer_id] = sizes

    @staticmethod
    def _header_ciphertext_len(path: Path) -> Optional[int]:
        try:
            with open(path, "rb") as fh:
                header = fh.read(OBJECT_HEADER_LEN)
            if len(header) != OBJECT_HEADER_LEN:
                return None
            if header[:4] != OBJECT_MAGIC or header[4] != OBJECT_VERSION:
                return None
            (ct_len,) = struct.unpack(">Q", header[21:29])
            if ct_len <= 0 or ct_len % aes.BLOCK_SIZE != 0:
                return None
            if path.stat().st_size != OBJECT_HEADER_LEN + ct_len:
                return None
            return ct_len
        except OSError:
            return None

    def _write_sidecar(self, customer_id: str) -> None:
        sizes = self._sizes.get(customer_id, {})
        data = json.dumps(sizes, sort_keys=True).encode("utf-8")
        fd, tmp = tempfile.mkstemp(prefix=_TMP_PREFIX, dir=self.root)
        try:
            os.write(fd, data)
        finally:
            os.close(fd)
        os.replace(tmp, self._sidecar(customer_id))

    # --- operations ---

    def put_object(
        self,
        customer_id: str,
        name: str,
        plaintext: bytes,
        master_key: bytes,
        quota_bytes: int,
    ) -> None:
        """Encrypt and store one object atomically; overwrites a same-named
        object; refuses when cumulative plaintext would exceed the quota."""
        _validate_customer_id(customer_id)
        _validate_object_name(name)
        key = storage_key(master_key, customer_id)
        iv = os.urandom(16)
        ciphertext = aes.cbc_encrypt(plaintext, key, iv)
        blob = (
            OBJECT_MAGIC
            + bytes([OBJECT_VERSION])
            + iv
            + struct.pack(">Q", len(ciphertext))
            + ciphertext
        )
        with self._lock:
            sizes = self._sizes.setdefault(customer_id, {})
            used = sum(sizes.values()) - sizes.get(name, 0)
            if used + len(plaintext) > quota_bytes:
                if not sizes:
                    del self._sizes[customer_id]
                raise QuotaExceeded(
                    f"storing {len(plaintext)} bytes would exceed the "
                    f"{quota_bytes}-byte quota"
                )
            directory = self._dir(customer_id)
            directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=_TMP_PREFIX, dir=directory)
            try:
                os.write(fd, blob)
            finally:
                os.close(fd)
            os.replace(tmp, directory / name)
            sizes[name] = len(plaintext)
            self._write_sidecar(customer_id)

    def get_object(self, customer_id: str, name: str, master_key: bytes) -> bytes:
        """Read, verify and decrypt one object; byte-exact inverse of
        put_object."""
        _validate_customer_id(customer_id)
        _validate_object_name(name)
        path = self._dir(customer_id) / name
        try:
            blob = path.read_bytes()
        except FileNotFoundError:
            raise NoSuchObject(f"no object named {name!r}") from None
        if len(blob) < OBJECT_HEADER_LEN:
            raise CorruptObject("object file shorter than its header")
        if blob[:4] != OBJECT_MAGIC:
            raise CorruptObject("bad magic")
        if blob[4] != OBJECT_VERSION:
            raise CorruptObject(f"unsupported object version 0x{blob[4]:02x}")
        iv = blob[5:21]
        (ct_len,) = struct.unpack(">Q", blob[21:29])
        ciphertext = blob[29:]
        if len(ciphertext) != ct_len:
            raise CorruptObject("ciphertext length does not match the header")
        key = storage_key(master_key, customer_id)
        try:
            return aes.cbc_decrypt(ciphertext, key, iv)
        except (aes.LengthError, aes.PaddingError) as exc:
            raise CorruptObject(f"decryption failed: {exc}") from None

    def list_objects(self, customer_id: str) -> list[str]:
        """Object names in lexicographic byte order; empty for a customer
        that has never stored anything."""
        _validate_customer_id(customer_id)
        with self._lock:
            known = self._sizes.get(customer_id)
            if not known:
                if not self.root.is_dir():
                    raise FileNotFoundError(f"object store root missing: {self.root}")
                return []
            on_disk = os.listdir(self._dir(customer_id))  # OSError if deleted
            return sorted(name for name in on_disk if name in known)

    def used_bytes(self, customer_id: str) -> int:
        with self._lock:
            return sum(self._sizes.get(customer_id, {}).values())
