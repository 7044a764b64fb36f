"""Client and server state machines for the two-phase authenticated tunnel.

Message flow (client to server unless marked):

    ClientHello     version byte 0x01, client DH public
    ServerHello  <  server DH public, 16-byte server nonce
    Phase1Auth      IV + CBC(tunnel user, tunnel password, nonce; k_phase1)
    Phase1Result <  IV + CBC(status byte [, reason]; k_phase1)
    ServiceRequest  IV + CBC(path; k_data)               no direct response
    Phase2Auth      IV + CBC(service user, service password, nonce; k_phase2)
    Phase2Result <  IV + CBC(status byte [, reason]; k_phase2)
    Put/Get/List    IV + CBC(inner; k_data), both directions
    Disconnect      empty payload, either side
    Error        <  plain reason string; closes the session

The server nonce folded into both credential blobs binds them to this
handshake: a ciphertext captured in one session never verifies in another.
"""

from __future__ import annotations

import enum
import os
import struct
import time
from dataclasses import dataclass
from typing import Callable, Optional

from . import aes
from .keyx import (
    DhGroup,
    DhKeyPair,
    SessionKeys,
    InvalidPublicKey,
    derive_keys,
    dh_generate,
    dh_shared,
)
from .vault import (
    AuthFailed,
    CertVerdict,
    InvalidName,
    NoSuchObject,
    CorruptObject,
    ObjectStore,
    QuotaExceeded,
    Registry,
    check_certificate,
)
from .wire import (
    Frame,
    MalformedPayload,
    MessageType,
    PayloadReader,
    encode_mpint,
    encode_str,
)

PROTOCOL_VERSION = 0x01

STATUS_OK = 0x01
STATUS_NOT_FOUND = 0x02
STATUS_QUOTA_EXCEEDED = 0x03
STATUS_INVALID_NAME = 0x04
STATUS_ERROR = 0x00

REASON_AUTH_FAILED = "auth failed"
REASON_UNKNOWN_PATH = "unknown service path"
_CERT_REASONS = {
    CertVerdict.EXPIRED: "certificate expired",
    CertVerdict.REVOKED: "certificate revoked",
    CertVerdict.RIGHTS_MISSING: "rights missing",
}


class Phase(enum.Enum):
    INIT = "init"
    HELLO_EXCHANGED = "hello-exchanged"
    TUNNEL_ESTABLISHED = "tunnel-established"
    SERVICE_REQUESTED = "service-requested"
    SESSION_ACTIVE = "session-active"
    CLOSED = "closed"


class ProtocolOrderError(Exception):
    """Operation invoked outside its legal phase."""


class ReplayDetected(Exception):
    """Embedded nonce does not match this session's nonce."""


class VersionMismatch(Exception):
    pass


@dataclass
class SessionState:
    phase: Phase = Phase.INIT
    keys: Optional[SessionKeys] = None
    server_nonce: Optional[bytes] = None
    customer_id: Optional[str] = None
    # client side: own ephemeral keypair until the hello completes
    dh_keypair: Optional[DhKeyPair] = None
    # client: path it asked for; server: path the client asked for
    space_path: Optional[str] = None
    # server side, audit only: identity proven by the tunnel credentials
    tunnel_customer_id: Optional[str] = None

    def close(self) -> None:
        """Drop to CLOSED and discard all key material."""
        self.phase = Phase.CLOSED
        self.keys = None
        self.server_nonce = None
        self.customer_id = None
        self.dh_keypair = None


def _require(state: SessionState, phase: Phase, op: str) -> None:
    if state.phase is not phase:
        raise ProtocolOrderError(f"{op} requires phase {phase.name}, not {state.phase.name}")


def _encrypt_payload(key: bytes, inner: bytes) -> bytes:
    iv = os.urandom(16)
    return iv + aes.cbc_encrypt(inner, key, iv)


def _decrypt_payload(key: bytes, payload: bytes) -> bytes:
    if len(payload) < 32:
        raise MalformedPayload("encrypted payload shorter than IV plus one block")
    return aes.cbc_decrypt(payload[16:], key, payload[:16])


def _result_frame(
    msg_type: MessageType, key: bytes, ok: bool, reason: str = ""
) -> Frame:
    inner = bytes([STATUS_OK]) if ok else bytes([STATUS_ERROR]) + encode_str(reason)
    return Frame(msg_type, _encrypt_payload(key, inner))


def _parse_result(inner: bytes) -> tuple[bool, str]:
    r = PayloadReader(inner)
    status = r.u8()
    reason = "" if status == STATUS_OK else r.string()
    r.expect_end()
    return status == STATUS_OK, reason


def _noop_audit(event: str, customer_id: Optional[str] = None) -> None:
    pass


# --------------------------------------------------------------------------
# client side
# --------------------------------------------------------------------------

def client_connect(state: SessionState, keypair: DhKeyPair) -> Frame:
    """Open the handshake: version byte then the client DH public value.

    The phase stays INIT until the ServerHello arrives.
    """
    _require(state, Phase.INIT, "client_connect")
    state.dh_keypair = keypair
    payload = bytes([PROTOCOL_VERSION]) + encode_mpint(keypair.public)
    return Frame(MessageType.CLIENT_HELLO, payload)


def client_handle_server_hello(
    state: SessionState, payload: bytes, group: DhGroup
) -> None:
    """Derive the session keys from the ServerHello and record the nonce."""
    _require(state, Phase.INIT, "client_handle_server_hello")
    if state.dh_keypair is None:
        raise ProtocolOrderError("ServerHello before ClientHello was sent")
    r = PayloadReader(payload)
    server_public = r.mpint()
    nonce = r.take(16)
    r.expect_end()
    shared = dh_shared(state.dh_keypair, server_public, group)
    state.keys = derive_keys(shared)
    state.server_nonce = nonce
    state.dh_keypair = None
    state.phase = Phase.HELLO_EXCHANGED


def phase1_auth(state: SessionState, tunnel_user: str, tunnel_pass: str) -> Frame:
    """Tunnel credentials plus the server nonce, encrypted under k_phase1."""
    _require(state, Phase.HELLO_EXCHANGED, "phase1_auth")
    inner = encode_str(tunnel_user) + encode_str(tunnel_pass) + state.server_nonce
    return Frame(
        MessageType.PHASE1_AUTH, _encrypt_payload(state.keys.k_phase1, inner)
    )


def client_handle_phase1_result(
    state: SessionState, payload: bytes
) -> tuple[bool, str]:
    _require(state, Phase.HELLO_EXCHANGED, "client_handle_phase1_result")
    ok, reason = _parse_result(_decrypt_payload(state.keys.k_phase1, payload))
    if ok:
        state.phase = Phase.TUNNEL_ESTABLISHED
    else:
        state.close()
    return ok, reason


def service_request(state: SessionState, url_path: str) -> Frame:
    """Name the provisioned space path, encrypted under k_data."""
    _require(state, Phase.TUNNEL_ESTABLISHED, "service_request")
    frame = Frame(
        MessageType.SERVICE_REQUEST,
        _encrypt_payload(state.keys.k_data, encode_str(url_path)),
    )
    state.space_path = url_path
    state.phase = Phase.SERVICE_REQUESTED
    return frame


def phase2_auth(state: SessionState, service_user: str, service_pass: str) -> Frame:
    """Service credentials plus the server nonce, encrypted under k_phase2."""
    _require(state, Phase.SERVICE_REQUESTED, "phase2_auth")
    inner = encode_str(service_user) + encode_str(service_pass) + state.server_nonce
    return Frame(
        MessageType.PHASE2_AUTH, _encrypt_payload(state.keys.k_phase2, inner)
    )


def client_handle_phase2_result(
    state: SessionState, payload: bytes
) -> tuple[bool, str]:
    _require(state, Phase.SERVICE_REQUESTED, "client_handle_phase2_result")
    ok, reason = _parse_result(_decrypt_payload(state.keys.k_phase2, payload))
    if ok:
        state.phase = Phase.SESSION_ACTIVE
    else:
        state.close()
    return ok, reason


def build_put(state: SessionState, name: str, data: bytes) -> Frame:
    _require(state, Phase.SESSION_ACTIVE, "build_put")
    inner = encode_str(name) + struct.pack(">I", len(data)) + data
    return Frame(MessageType.PUT, _encrypt_payload(state.keys.k_data, inner))


def parse_put_result(state: SessionState, payload: bytes) -> int:
    _require(state, Phase.SESSION_ACTIVE, "parse_put_result")
    r = PayloadReader(_decrypt_payload(state.keys.k_data, payload))
    status = r.u8()
    r.expect_end()
    return status


def build_get(state: SessionState, name: str) -> Frame:
    _require(state, Phase.SESSION_ACTIVE, "build_get")
    return Frame(
        MessageType.GET, _encrypt_payload(state.keys.k_data, encode_str(name))
    )


def parse_get_result(state: SessionState, payload: bytes) -> tuple[int, bytes]:
    _require(state, Phase.SESSION_ACTIVE, "parse_get_result")
    r = PayloadReader(_decrypt_payload(state.keys.k_data, payload))
    status = r.u8()
    data = r.take(r.u32())
    r.expect_end()
    return status, data


def build_list(state: SessionState) -> Frame:
    _require(state, Phase.SESSION_ACTIVE, "build_list")
    return Frame(MessageType.LIST, _encrypt_payload(state.keys.k_data, b""))


def parse_list_result(state: SessionState, payload: bytes) -> list[str]:
    _require(state, Phase.SESSION_ACTIVE, "parse_list_result")
    r = PayloadReader(_decrypt_payload(state.keys.k_data, payload))
    names = [r.string() for _ in range(r.u16())]
    r.expect_end()
    return names


def disconnect(state: SessionState) -> Frame:
    """Allowed in any phase; discards the session keys."""
    frame = Frame(MessageType.DISCONNECT, b"")
    state.close()
    return frame


# --------------------------------------------------------------------------
# server side
# --------------------------------------------------------------------------

@dataclass
class ServerContext:
    """Everything one server session needs besides its SessionState."""

    registry: Registry
    store: ObjectStore
    master_key: bytes
    group: DhGroup
    now: Callable[[], float] = time.time
    audit: Callable[[str, Optional[str]], None] = _noop_audit
    rand: Callable[[int], bytes] = os.urandom


def server_hello(
    state: SessionState,
    client_payload: bytes,
    keypair: DhKeyPair,
    nonce: bytes,
    group: DhGroup,
) -> Frame:
    """Answer a ClientHello: validate version and client public, derive the
    session keys, emit the server public and nonce."""
    _require(state, Phase.INIT, "server_hello")
    if len(nonce) != 16:
        raise ValueError("server nonce must be exactly 16 bytes")
    r = PayloadReader(client_payload)
    version = r.u8()
    if version != PROTOCOL_VERSION:
        raise VersionMismatch(f"unsupported protocol version 0x{version:02x}")
    client_public = r.mpint()
    r.expect_end()
    shared = dh_shared(keypair, client_public, group)
    state.keys = derive_keys(shared)
    state.server_nonce = nonce
    state.phase = Phase.HELLO_EXCHANGED
    return Frame(MessageType.SERVER_HELLO, encode_mpint(keypair.public) + nonce)


def _open_credentials(
    state: SessionState, key: bytes, payload: bytes
) -> tuple[str, str]:
    """Decrypt a credential blob and enforce the nonce binding."""
    r = PayloadReader(_decrypt_payload(key, payload))
    user = r.string()
    password = r.string()
    nonce = r.take(16)
    r.expect_end()
    if nonce != state.server_nonce:
        raise ReplayDetected("credential blob bound to a different handshake")
    return user, password


_CREDENTIAL_FAILURES = (
    aes.PaddingError,
    aes.LengthError,
    MalformedPayload,
    ReplayDetected,
    AuthFailed,
)


def server_verify_phase1(
    state: SessionState,
    payload: bytes,
    registry: Registry,
    audit: Callable[[str, Optional[str]], None] = _noop_audit,
) -> Frame:
    """Check the tunnel credentials; all failures (bad decrypt, replay,
    unknown user, bad password) get the same generic result."""
    _require(state, Phase.HELLO_EXCHANGED, "server_verify_phase1")
    key = state.keys.k_phase1
    try:
        user, password = _open_credentials(state, key, payload)
        customer_id = registry.check_credentials("tunnel", user, password)
    except _CREDENTIAL_FAILURES:
        frame = _result_frame(MessageType.PHASE1_RESULT, key, False, REASON_AUTH_FAILED)
        audit("phase1 fail", None)
        state.close()
        return frame
    state.tunnel_customer_id = customer_id
    state.phase = Phase.TUNNEL_ESTABLISHED
    audit("phase1 ok", customer_id)
    return _result_frame(MessageType.PHASE1_RESULT, key, True)


def server_handle_service_request(state: SessionState, payload: bytes) -> None:
    """Record the requested path; it is checked once phase 2 proves who is
    asking."""
    _require(state, Phase.TUNNEL_ESTABLISHED, "server_handle_service_request")
    r = PayloadReader(_decrypt_payload(state.keys.k_data, payload))
    path = r.string()
    r.expect_end()
    state.space_path = path
    state.phase = Phase.SERVICE_REQUESTED


def server_verify_phase2(
    state: SessionState,
    payload: bytes,
    registry: Registry,
    now: float,
    audit: Callable[[str, Optional[str]], None] = _noop_audit,
) -> Frame:
    """Check service credentials, then the requested path, then the
    contract. Credential failures stay generic; certificate verdicts are
    reported specifically so the customer learns their contract lapsed."""
    _require(state, Phase.SERVICE_REQUESTED, "server_verify_phase2")
    key = state.keys.k_phase2

    def reject(reason: str, event: str) -> Frame:
        frame = _result_frame(MessageType.PHASE2_RESULT, key, False, reason)
        audit(event, None)
        state.close()
        return frame

    try:
        user, password = _open_credentials(state, key, payload)
        customer_id = registry.check_credentials("service", user, password)
    except _CREDENTIAL_FAILURES:
        return reject(REASON_AUTH_FAILED, "phase2 fail")
    record = registry.get(customer_id)
    if state.space_path != record.space_path:
        return reject(REASON_UNKNOWN_PATH, "phase2 fail path")
    verdict = check_certificate(record.certificate, int(now))
    if verdict is not CertVerdict.VALID:
        return reject(_CERT_REASONS[verdict], f"phase2 fail cert={verdict.value}")
    state.customer_id = customer_id
    state.phase = Phase.SESSION_ACTIVE
    audit("phase2 ok cert=valid", customer_id)
    return _result_frame(MessageType.PHASE2_RESULT, key, True)


def data_exchange(
    state: SessionState, msg_type: MessageType, payload: bytes, ctx: ServerContext
) -> Frame:
    """Serve one Put/Get/List frame inside the active session."""
    _require(state, Phase.SESSION_ACTIVE, "data_exchange")
    key = state.keys.k_data
    customer_id = state.customer_id
    r = PayloadReader(_decrypt_payload(key, payload))

    if msg_type is MessageType.PUT:
        name = r.string()
        data = r.take(r.u32())
        r.expect_end()
        quota = ctx.registry.get(customer_id).quota_bytes
        try:
            ctx.store.put_object(customer_id, name, data, ctx.master_key, quota)
            status = STATUS_OK
        except InvalidName:
            status = STATUS_INVALID_NAME
        except QuotaExceeded:
            status = STATUS_QUOTA_EXCEEDED
        except OSError:
            status = STATUS_ERROR
        ctx.audit(f"put name={name!r} bytes={len(data)} status={status}", customer_id)
        return Frame(MessageType.PUT_RESULT, _encrypt_payload(key, bytes([status])))

    if msg_type is MessageType.GET:
        name = r.string()
        r.expect_end()
        try:
            data = ctx.store.get_object(customer_id, name, ctx.master_key)
            status = STATUS_OK
        except (NoSuchObject, InvalidName):
            data, status = b"", STATUS_NOT_FOUND
        except (CorruptObject, OSError):
            data, status = b"", STATUS_ERROR
        ctx.audit(f"get name={name!r} status={status}", customer_id)
        inner = bytes([status]) + struct.pack(">I", len(data)) + data
        return Frame(MessageType.GET_RESULT, _encrypt_payload(key, inner))

    if msg_type is MessageType.LIST:
        r.expect_end()
        names = ctx.store.list_objects(customer_id)
        if len(names) > 0xFFFF:
            raise MalformedPayload("object count exceeds the u16 listing limit")
        inner = struct.pack(">H", len(names)) + b"".join(encode_str(n) for n in names)
        ctx.audit(f"list count={len(names)}", customer_id)
        return Frame(MessageType.LIST_RESULT, _encrypt_payload(key, inner))

    raise ProtocolOrderError(f"{msg_type.name} is not a data frame")


# legal (phase, incoming type) pairs; Disconnect is legal everywhere and
# handled before this table is consulted
_LEGAL = {
    (Phase.INIT, MessageType.CLIENT_HELLO),
    (Phase.HELLO_EXCHANGED, MessageType.PHASE1_AUTH),
    (Phase.TUNNEL_ESTABLISHED, MessageType.SERVICE_REQUEST),
    (Phase.SERVICE_REQUESTED, MessageType.PHASE2_AUTH),
    (Phase.SESSION_ACTIVE, MessageType.PUT),
    (Phase.SESSION_ACTIVE, MessageType.GET),
    (Phase.SESSION_ACTIVE, MessageType.LIST),
}


def server_handle_frame(
    state: SessionState,
    msg_type: MessageType,
    payload: bytes,
    ctx: ServerContext,
) -> list[Frame]:
    """Drive the server state machine for one incoming frame.

    Returns the frames to send back (possibly none). Any illegal
    (phase, type) pair or malformed payload yields a single Error frame and
    a closed session; frames arriving after close are dropped silently.
    """
    if state.phase is Phase.CLOSED:
        return []
    if msg_type is MessageType.DISCONNECT:
        ctx.audit("disconnect", state.customer_id)
        state.close()
        return []
    if (state.phase, msg_type) not in _LEGAL:
        reason = f"unexpected {msg_type.name} in phase {state.phase.name}"
        ctx.audit(f"error {reason}", state.customer_id)
        state.close()
        return [Frame(MessageType.ERROR, encode_str(reason))]
    try:
        if msg_type is MessageType.CLIENT_HELLO:
            keypair = dh_generate(ctx.group)
            frame = server_hello(state, payload, keypair, ctx.rand(16), ctx.group)
            ctx.audit("hello", None)
            return [frame]
        if msg_type is MessageType.PHASE1_AUTH:
            return [server_verify_phase1(state, payload, ctx.registry, ctx.audit)]
        if msg_type is MessageType.SERVICE_REQUEST:
            server_handle_service_request(state, payload)
            return []
        if msg_type is MessageType.PHASE2_AUTH:
            return [
                server_verify_phase2(state, payload, ctx.registry, ctx.now(), ctx.audit)
            ]
        return [data_exchange(state, msg_type, payload, ctx)]
    except VersionMismatch:
        reason = "version mismatch"
    except InvalidPublicKey:
        reason = "invalid public key"
    except (MalformedPayload, aes.PaddingError, aes.LengthError):
        reason = "malformed payload"
    ctx.audit(f"error {reason}", state.customer_id)
    state.close()
    return [Frame(MessageType.ERROR, encode_str(reason))]
