"""Socket client for the gateway: tunnel setup, two-phase login, and the
private-space commands, wrapping the protocol state machine."""

from __future__ import annotations

import socket
from typing import Optional

from . import protocol
from .aes import LengthError, PaddingError
from .keyx import DhGroup, InvalidPublicKey, RFC3526_GROUP14, dh_generate
from .wire import Frame, FrameError, MessageType, PayloadReader, decode_frame


class ClientError(Exception):
    pass


class AuthRefused(ClientError):
    """Server rejected credentials or the certificate; message carries the
    server's reason verbatim."""


class ProtocolFailure(ClientError):
    """Connection died, framing broke, or the server sent something the
    client cannot act on."""


class CommandRefused(ClientError):
    """A put/get/list was answered with a non-ok status."""


_STATUS_MESSAGES = {
    protocol.STATUS_NOT_FOUND: "no such object",
    protocol.STATUS_QUOTA_EXCEEDED: "quota exceeded",
    protocol.STATUS_INVALID_NAME: "invalid name",
    protocol.STATUS_ERROR: "server error",
}


class ClientSession:
    """One connection to the gateway, driven through its protocol phases.

    `capture`, when given, collects the raw bytes of every frame sent and
    received (used by the wire-secrecy tests).
    """

    def __init__(
        self,
        host: str,
        port: int,
        group: DhGroup = RFC3526_GROUP14,
        timeout: float = 30.0,
        capture: Optional[list[bytes]] = None,
    ):
        self._group = group
        self._capture = capture
        self._sock = socket.create_connection((host, port), timeout=timeout)
        self._stream = self._sock.makefile("rb")
        self.state = protocol.SessionState()

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def _send(self, frame: Frame) -> None:
        if self._sock is None:
            raise ProtocolFailure("session is closed")
        raw = frame.encode()
        if self._capture is not None:
            self._capture.append(raw)
        try:
            self._sock.sendall(raw)
        except OSError as exc:
            raise ProtocolFailure(f"send failed: {exc}") from exc

    def _recv(self, expected: MessageType) -> bytes:
        try:
            msg_type, payload = decode_frame(self._stream)
        except FrameError as exc:
            raise ProtocolFailure(f"connection broke: {exc}") from exc
        except OSError as exc:
            raise ProtocolFailure(f"receive failed: {exc}") from exc
        if self._capture is not None:
            self._capture.append(Frame(msg_type, payload).encode())
        if msg_type is MessageType.ERROR:
            reason = PayloadReader(payload).string()
            raise ProtocolFailure(f"server error: {reason}")
        if msg_type is not expected:
            raise ProtocolFailure(f"expected {expected.name}, got {msg_type.name}")
        return payload

    def _parse(self, parser, payload: bytes):
        try:
            return parser(self.state, payload)
        except (FrameError, PaddingError, LengthError, InvalidPublicKey) as exc:
            raise ProtocolFailure(f"cannot parse server response: {exc}") from exc

    def connect_tunnel(self, tunnel_user: str, tunnel_pass: str) -> None:
        """Hello exchange plus phase-1 authentication."""
        keypair = dh_generate(self._group)
        self._send(protocol.client_connect(self.state, keypair))
        payload = self._recv(MessageType.SERVER_HELLO)
        self._parse(
            lambda state, p: protocol.client_handle_server_hello(state, p, self._group),
            payload,
        )
        self._send(protocol.phase1_auth(self.state, tunnel_user, tunnel_pass))
        payload = self._recv(MessageType.PHASE1_RESULT)
        ok, reason = self._parse(protocol.client_handle_phase1_result, payload)
        if not ok:
            raise AuthRefused(reason or protocol.REASON_AUTH_FAILED)

    def login(self, url_path: str, service_user: str, service_pass: str) -> None:
        """Service request plus phase-2 authentication."""
        self._send(protocol.service_request(self.state, url_path))
        self._send(protocol.phase2_auth(self.state, service_user, service_pass))
        payload = self._recv(MessageType.PHASE2_RESULT)
        ok, reason = self._parse(protocol.client_handle_phase2_result, payload)
        if not ok:
            raise AuthRefused(reason or protocol.REASON_AUTH_FAILED)

    def put(self, name: str, data: bytes) -> None:
        self._send(protocol.build_put(self.state, name, data))
        status = self._parse(
            protocol.parse_put_result, self._recv(MessageType.PUT_RESULT)
        )
        if status != protocol.STATUS_OK:
            raise CommandRefused(_STATUS_MESSAGES.get(status, f"status {status}"))

    def get(self, name: str) -> bytes:
        self._send(protocol.build_get(self.state, name))
        status, data = self._parse(
            protocol.parse_get_result, self._recv(MessageType.GET_RESULT)
        )
        if status != protocol.STATUS_OK:
            raise CommandRefused(_STATUS_MESSAGES.get(status, f"status {status}"))
        return data

    def list_names(self) -> list[str]:
        self._send(protocol.build_list(self.state))
        return self._parse(
            protocol.parse_list_result, self._recv(MessageType.LIST_RESULT)
        )

    def close(self) -> None:
        """Send Disconnect if the session is still open, then drop the
        socket; keys are discarded either way."""
        if self._sock is None:
            return
        try:
            if self.state.phase is not protocol.Phase.CLOSED:
                self._send(protocol.disconnect(self.state))
        except ClientError:
            pass
        finally:
            self.state.close()
            try:
                self._stream.close()
                self._sock.close()
            except OSError:
                pass
            self._sock = None
