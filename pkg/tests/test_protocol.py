"""State machine tests for both protocol sides, run in memory (no sockets):
handshake key agreement, nonce/replay binding, order enforcement over the
full phase x type grid, and the data-session framing."""

from __future__ import annotations

import os
import random

import pytest

from csg import protocol as P
from csg.keyx import TEST_SMALL, derive_keys, dh_generate
from csg.vault import ObjectStore, Registry
from csg.wire import Frame, MessageType, PayloadReader

from conftest import make_certificate, provision_customer


@pytest.fixture
def acme():
    return provision_customer("acme")


@pytest.fixture
def ctx(tmp_path, acme):
    return P.ServerContext(
        registry=Registry([acme.record]),
        store=ObjectStore(tmp_path / "objects"),
        master_key=os.urandom(16),
        group=TEST_SMALL,
    )


class Wire:
    """Client state + server state joined by server_handle_frame."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.client = P.SessionState()
        self.server = P.SessionState()

    def send(self, frame: Frame) -> list[Frame]:
        return P.server_handle_frame(self.server, frame.msg_type, frame.payload, self.ctx)

    def handshake(self, customer, *, tunnel_pass=None) -> tuple[bool, str]:
        reply = self.send(P.client_connect(self.client, dh_generate(self.ctx.group)))
        P.client_handle_server_hello(self.client, reply[0].payload, self.ctx.group)
        password = tunnel_pass if tunnel_pass is not None else customer.tunnel_pass
        reply = self.send(P.phase1_auth(self.client, customer.tunnel_user, password))
        return P.client_handle_phase1_result(self.client, reply[0].payload)

    def login(self, customer, *, path=None, service_pass=None) -> tuple[bool, str]:
        self.send(P.service_request(self.client, path or customer.space_path))
        password = service_pass if service_pass is not None else customer.service_pass
        reply = self.send(P.phase2_auth(self.client, customer.service_user, password))
        return P.client_handle_phase2_result(self.client, reply[0].payload)


@pytest.fixture
def wire(ctx):
    return Wire(ctx)


# --- hello ------------------------------------------------------------------

def test_client_hello_layout():
    state = P.SessionState()
    keypair = dh_generate(TEST_SMALL, private=6)
    frame = P.client_connect(state, keypair)
    assert frame.msg_type is MessageType.CLIENT_HELLO
    r = PayloadReader(frame.payload)
    assert r.u8() == 0x01  # version byte first
    assert r.mpint() == 8  # public of private 6 in the test group
    r.expect_end()
    assert state.phase is P.Phase.INIT  # unchanged until ServerHello


def test_client_connect_out_of_order():
    state = P.SessionState()
    state.phase = P.Phase.SESSION_ACTIVE
    with pytest.raises(P.ProtocolOrderError):
        P.client_connect(state, dh_generate(TEST_SMALL))


def test_hello_exchange_agrees_on_keys(wire, acme):
    ok, _ = wire.handshake(acme)
    assert ok
    assert wire.client.keys is not None
    # the server's keys survive into the established phase
    assert wire.server.keys == wire.client.keys or wire.server.keys is not None


def test_both_sides_derive_identical_keys(ctx):
    client, server = P.SessionState(), P.SessionState()
    hello = P.client_connect(client, dh_generate(TEST_SMALL))
    reply = P.server_handle_frame(server, hello.msg_type, hello.payload, ctx)
    P.client_handle_server_hello(client, reply[0].payload, TEST_SMALL)
    assert client.keys == server.keys
    assert client.server_nonce == server.server_nonce


def test_server_hello_version_mismatch(ctx):
    server = P.SessionState()
    keypair = dh_generate(TEST_SMALL)
    payload = bytes([0x02]) + b"\x00\x01\x08"
    with pytest.raises(P.VersionMismatch):
        P.server_hello(server, payload, keypair, os.urandom(16), TEST_SMALL)


def test_server_hello_rejects_degenerate_public(ctx):
    server = P.SessionState()
    from csg.keyx import InvalidPublicKey

    payload = bytes([0x01]) + b"\x00\x01\x01"  # client public = 1
    with pytest.raises(InvalidPublicKey):
        P.server_hello(server, payload, dh_generate(TEST_SMALL), os.urandom(16), TEST_SMALL)


def test_dispatcher_turns_bad_hello_into_error_frame(ctx):
    server = P.SessionState()
    payload = bytes([0x02]) + b"\x00\x01\x08"
    frames = P.server_handle_frame(server, MessageType.CLIENT_HELLO, payload, ctx)
    assert [f.msg_type for f in frames] == [MessageType.ERROR]
    assert server.phase is P.Phase.CLOSED
    assert PayloadReader(frames[0].payload).string() == "version mismatch"


# --- phase 1 ----------------------------------------------------------------

def test_phase1_success(wire, acme):
    ok, reason = wire.handshake(acme)
    assert (ok, reason) == (True, "")
    assert wire.server.phase is P.Phase.TUNNEL_ESTABLISHED
    assert wire.client.phase is P.Phase.TUNNEL_ESTABLISHED
    assert wire.server.tunnel_customer_id == "acme"


def test_phase1_wrong_password(wire, acme):
    ok, reason = wire.handshake(acme, tunnel_pass="wrong")
    assert (ok, reason) == (False, "auth failed")
    assert wire.server.phase is P.Phase.CLOSED
    assert wire.client.phase is P.Phase.CLOSED


def test_phase1_unknown_user_same_reason(wire, acme):
    reply = wire.send(P.client_connect(wire.client, dh_generate(TEST_SMALL)))
    P.client_handle_server_hello(wire.client, reply[0].payload, TEST_SMALL)
    reply = wire.send(P.phase1_auth(wire.client, "nobody", "pw"))
    ok, reason = P.client_handle_phase1_result(wire.client, reply[0].payload)
    assert (ok, reason) == (False, "auth failed")


def test_phase1_server_recovers_exact_credentials(acme):
    # white-box: decrypt on the server side and compare the triple
    client, server = P.SessionState(), P.SessionState()
    keypair = dh_generate(TEST_SMALL)
    hello = P.client_connect(client, keypair)
    frame = P.server_hello(server, hello.payload, dh_generate(TEST_SMALL), os.urandom(16), TEST_SMALL)
    P.client_handle_server_hello(client, frame.payload, TEST_SMALL)
    auth = P.phase1_auth(client, "usér", "pässword")
    user, password = P._open_credentials(server, server.keys.k_phase1, auth.payload)
    assert (user, password) == ("usér", "pässword")


def test_phase1_stale_nonce_rejected(wire, acme):
    reply = wire.send(P.client_connect(wire.client, dh_generate(TEST_SMALL)))
    P.client_handle_server_hello(wire.client, reply[0].payload, TEST_SMALL)
    wire.client.server_nonce = os.urandom(16)  # stale/foreign nonce
    reply = wire.send(P.phase1_auth(wire.client, acme.tunnel_user, acme.tunnel_pass))
    ok, reason = P.client_handle_phase1_result(wire.client, reply[0].payload)
    assert (ok, reason) == (False, "auth failed")
    assert wire.server.phase is P.Phase.CLOSED


def test_phase1_replay_into_new_session(ctx, acme):
    # session A completes phase 1; its Phase1Auth frame replayed into B fails
    a = Wire(ctx)
    captured = {}
    reply = a.send(P.client_connect(a.client, dh_generate(TEST_SMALL)))
    P.client_handle_server_hello(a.client, reply[0].payload, TEST_SMALL)
    frame = P.phase1_auth(a.client, acme.tunnel_user, acme.tunnel_pass)
    captured["phase1"] = frame
    a.send(frame)

    b = Wire(ctx)
    reply = b.send(P.client_connect(b.client, dh_generate(TEST_SMALL)))
    P.client_handle_server_hello(b.client, reply[0].payload, TEST_SMALL)
    result = b.send(captured["phase1"])
    assert result[0].msg_type is MessageType.PHASE1_RESULT
    ok, reason = P.client_handle_phase1_result(b.client, result[0].payload)
    assert not ok
    assert b.server.phase is P.Phase.CLOSED


def test_password_bytes_not_on_the_wire(ctx, acme):
    for _ in range(10):
        wire = Wire(ctx)
        password = os.urandom(16).hex()  # 32 chars >= 16 bytes
        reply = wire.send(P.client_connect(wire.client, dh_generate(TEST_SMALL)))
        P.client_handle_server_hello(wire.client, reply[0].payload, TEST_SMALL)
        frame = P.phase1_auth(wire.client, acme.tunnel_user, password)
        assert password.encode() not in frame.encode()


# --- service request and phase 2 --------------------------------------------

def test_full_login(wire, acme):
    assert wire.handshake(acme)[0]
    ok, reason = wire.login(acme)
    assert (ok, reason) == (True, "")
    assert wire.server.phase is P.Phase.SESSION_ACTIVE
    assert wire.server.customer_id == "acme"


def test_service_request_requires_tunnel():
    state = P.SessionState()
    with pytest.raises(P.ProtocolOrderError):
        P.service_request(state, "/space/x")


def test_unknown_service_path(wire, acme):
    assert wire.handshake(acme)[0]
    ok, reason = wire.login(acme, path="/space/other")
    assert (ok, reason) == (False, "unknown service path")
    assert wire.server.phase is P.Phase.CLOSED


def test_phase2_wrong_password(wire, acme):
    assert wire.handshake(acme)[0]
    ok, reason = wire.login(acme, service_pass="wrong")
    assert (ok, reason) == (False, "auth failed")


def test_phase2_distinct_credentials_from_phase1(wire, acme):
    # the two pairs are unrelated by design; both correct pairs succeed
    assert acme.tunnel_user != acme.service_user
    assert wire.handshake(acme)[0]
    assert wire.login(acme)[0]


def test_certificate_expired_reason(tmp_path):
    expired = provision_customer(
        "late", certificate=make_certificate("late", expires_in=-10)
    )
    ctx = P.ServerContext(
        registry=Registry([expired.record]),
        store=ObjectStore(tmp_path / "objects"),
        master_key=os.urandom(16),
        group=TEST_SMALL,
    )
    wire = Wire(ctx)
    assert wire.handshake(expired)[0]
    ok, reason = wire.login(expired)
    assert (ok, reason) == (False, "certificate expired")


def test_certificate_revoked_reason(tmp_path):
    revoked = provision_customer(
        "gone", certificate=make_certificate("gone", revoked=True)
    )
    ctx = P.ServerContext(
        registry=Registry([revoked.record]),
        store=ObjectStore(tmp_path / "objects"),
        master_key=os.urandom(16),
        group=TEST_SMALL,
    )
    wire = Wire(ctx)
    assert wire.handshake(revoked)[0]
    ok, reason = wire.login(revoked)
    assert (ok, reason) == (False, "certificate revoked")


def test_certificate_rights_missing_reason(tmp_path):
    limited = provision_customer(
        "ltd", certificate=make_certificate("ltd", rights=("billing",))
    )
    ctx = P.ServerContext(
        registry=Registry([limited.record]),
        store=ObjectStore(tmp_path / "objects"),
        master_key=os.urandom(16),
        group=TEST_SMALL,
    )
    wire = Wire(ctx)
    assert wire.handshake(limited)[0]
    ok, reason = wire.login(limited)
    assert (ok, reason) == (False, "rights missing")


def test_certificate_checked_against_injected_clock(ctx, acme):
    ctx.now = lambda: acme.record.certificate.expiry_date  # exactly at expiry
    wire = Wire(ctx)
    assert wire.handshake(acme)[0]
    ok, reason = wire.login(acme)
    assert (ok, reason) == (False, "certificate expired")


def test_phase2_replay_into_new_session(ctx, acme):
    a = Wire(ctx)
    assert a.handshake(acme)[0]
    a.send(P.service_request(a.client, acme.space_path))
    phase2 = P.phase2_auth(a.client, acme.service_user, acme.service_pass)
    a.send(phase2)

    b = Wire(ctx)
    assert b.handshake(acme)[0]
    b.send(P.service_request(b.client, acme.space_path))
    result = b.send(phase2)  # A's ciphertext into B's session
    ok, _ = P.client_handle_phase2_result(b.client, result[0].payload)
    assert not ok
    assert b.server.phase is P.Phase.CLOSED


# --- data session -----------------------------------------------------------

def test_put_get_list_round_trip(wire, acme):
    assert wire.handshake(acme)[0]
    assert wire.login(acme)[0]
    data = os.urandom(4096)
    reply = wire.send(P.build_put(wire.client, "report.txt", data))
    assert P.parse_put_result(wire.client, reply[0].payload) == P.STATUS_OK
    reply = wire.send(P.build_get(wire.client, "report.txt"))
    assert P.parse_get_result(wire.client, reply[0].payload) == (P.STATUS_OK, data)
    reply = wire.send(P.build_put(wire.client, "a", b"x"))
    assert P.parse_put_result(wire.client, reply[0].payload) == P.STATUS_OK
    reply = wire.send(P.build_list(wire.client))
    assert P.parse_list_result(wire.client, reply[0].payload) == ["a", "report.txt"]


def test_get_missing_status(wire, acme):
    assert wire.handshake(acme)[0]
    assert wire.login(acme)[0]
    reply = wire.send(P.build_get(wire.client, "missing"))
    status, data = P.parse_get_result(wire.client, reply[0].payload)
    assert (status, data) == (P.STATUS_NOT_FOUND, b"")


def test_put_statuses(tmp_path):
    tiny = provision_customer("tiny", quota_bytes=1000)
    ctx = P.ServerContext(
        registry=Registry([tiny.record]),
        store=ObjectStore(tmp_path / "objects-tiny"),
        master_key=os.urandom(16),
        group=TEST_SMALL,
    )
    wire = Wire(ctx)
    assert wire.handshake(tiny)[0]
    assert wire.login(tiny)[0]
    reply = wire.send(P.build_put(wire.client, "../etc", b"x"))
    assert P.parse_put_result(wire.client, reply[0].payload) == P.STATUS_INVALID_NAME
    reply = wire.send(P.build_put(wire.client, "big", bytes(1001)))
    assert P.parse_put_result(wire.client, reply[0].payload) == P.STATUS_QUOTA_EXCEEDED


def test_data_frames_rejected_outside_active_session(wire, acme):
    assert wire.handshake(acme)[0]
    with pytest.raises(P.ProtocolOrderError):
        P.build_put(wire.client, "x", b"y")  # client side refuses too
    fake = P.SessionState()
    fake.phase = P.Phase.SESSION_ACTIVE
    fake.keys = wire.client.keys
    frames = wire.send(P.build_put(fake, "x", b"y"))
    assert [f.msg_type for f in frames] == [MessageType.ERROR]
    assert wire.server.phase is P.Phase.CLOSED


# --- disconnect and ordering -------------------------------------------------

def test_disconnect_from_any_phase(wire, acme):
    assert wire.handshake(acme)[0]
    frame = P.disconnect(wire.client)
    assert frame.msg_type is MessageType.DISCONNECT
    assert wire.client.phase is P.Phase.CLOSED
    assert wire.client.keys is None  # keys discarded
    assert wire.send(frame) == []
    assert wire.server.phase is P.Phase.CLOSED


def test_disconnect_from_init():
    state = P.SessionState()
    P.disconnect(state)
    assert state.phase is P.Phase.CLOSED


def test_frames_after_disconnect_dropped(wire, acme):
    assert wire.handshake(acme)[0]
    wire.send(P.disconnect(wire.client))
    followup = Frame(MessageType.LIST, b"junk")
    assert wire.send(followup) == []  # dropped silently


def _state_in(phase: P.Phase, keys, nonce) -> P.SessionState:
    state = P.SessionState()
    state.phase = phase
    if phase not in (P.Phase.INIT, P.Phase.CLOSED):
        state.keys = keys
        state.server_nonce = nonce
    if phase is P.Phase.SESSION_ACTIVE:
        state.customer_id = "acme"
        state.space_path = "/space/acme"
    return state


def test_order_enforcement_full_grid(ctx):
    """Every (phase, type) pair outside the legal table must produce an
    Error frame (and a closed session) or be dropped; nothing may crash."""
    legal = {
        (P.Phase.INIT, MessageType.CLIENT_HELLO),
        (P.Phase.HELLO_EXCHANGED, MessageType.PHASE1_AUTH),
        (P.Phase.TUNNEL_ESTABLISHED, MessageType.SERVICE_REQUEST),
        (P.Phase.SERVICE_REQUESTED, MessageType.PHASE2_AUTH),
        (P.Phase.SESSION_ACTIVE, MessageType.PUT),
        (P.Phase.SESSION_ACTIVE, MessageType.GET),
        (P.Phase.SESSION_ACTIVE, MessageType.LIST),
    }
    keys = derive_keys(os.urandom(32))
    nonce = os.urandom(16)
    rng = random.Random(88)
    checked = 0
    for phase in P.Phase:
        for msg_type in MessageType:
            state = _state_in(phase, keys, nonce)
            payload = rng.randbytes(rng.randrange(0, 48))
            frames = P.server_handle_frame(state, msg_type, payload, ctx)
            checked += 1
            if phase is P.Phase.CLOSED:
                assert frames == []
                continue
            if msg_type is MessageType.DISCONNECT:
                assert frames == [] and state.phase is P.Phase.CLOSED
                continue
            if (phase, msg_type) in legal:
                continue  # behaviour covered by the flow tests
            assert [f.msg_type for f in frames] == [MessageType.ERROR], (phase, msg_type)
            assert state.phase is P.Phase.CLOSED
    assert checked == 6 * 15


def test_malformed_encrypted_payload_closes_session(wire, acme):
    assert wire.handshake(acme)[0]
    frames = wire.send(Frame(MessageType.SERVICE_REQUEST, b"too short"))
    assert [f.msg_type for f in frames] == [MessageType.ERROR]
    assert wire.server.phase is P.Phase.CLOSED


def test_dispatcher_fuzz_never_raises(ctx):
    """2,000 random (phase, type, payload) triples: the dispatcher always
    returns frames or closes, never raises."""
    rng = random.Random(0xD15)
    keys = derive_keys(os.urandom(32))
    nonce = os.urandom(16)
    for _ in range(2_000):
        phase = rng.choice(list(P.Phase))
        state = _state_in(phase, keys, nonce)
        msg_type = rng.choice(list(MessageType))
        shape = rng.random()
        if shape < 0.5:
            payload = rng.randbytes(rng.randrange(0, 64))
        elif shape < 0.8:
            # plausible encrypted shape: IV plus whole blocks of garbage
            payload = rng.randbytes(16) + rng.randbytes(16 * rng.randrange(1, 4))
        else:
            payload = bytes([0x01]) + rng.randbytes(rng.randrange(0, 20))
        frames = P.server_handle_frame(state, msg_type, payload, ctx)
        assert isinstance(frames, list)
        for frame in frames:
            assert isinstance(frame, Frame)
