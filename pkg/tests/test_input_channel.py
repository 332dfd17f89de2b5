import json
import os
import tempfile

import pytest
from hypothesis import given, strategies as st

from conftest import static_scene
from vicsim.errors import ChannelClosed, EndpointUnavailable
from vicsim.game import ToyGame
from vicsim.input_channel import (
    Action,
    Device,
    InputEvent,
    InputQueue,
    Origin,
    QmpClient,
    QmpProtocol,
    event_vocabulary,
    guest_poll_input,
    qmp_input_command,
    qmp_serve,
    scripted_input,
)
from vicsim.paging import GuestMemory

GREETING = '{"QMP":{"version":{"sandbox":1}}}'
LEFT_DOWN = ('{"execute":"input-send-event","arguments":{"device":"mouse0",'
             '"events":[{"type":"btn","data":{"down":true,"button":"left"}}]}}')


@pytest.fixture
def socket_path():
    with tempfile.TemporaryDirectory() as d:
        yield os.path.join(d, "qmp.sock")


def test_wire_format_over_unix_socket(game, socket_path):
    with qmp_serve(socket_path, game.channel), QmpClient(socket_path) as c:
        assert c.greeting == GREETING
        assert c.send_raw(LEFT_DOWN) == '{"return":{}}'
        assert len(game.input_queue) == 1
        err = c.send_raw('{"execute":"bogus"}')
        assert err == '{"error":{"class":"CommandNotFound","desc":"The command bogus has not been found"}}'
        # the connection survives the error
        assert c.send_raw('{"execute":"qmp_capabilities"}') == '{"return":{}}'
    game.step()
    assert game.fire_bursts == 1


def test_tcp_endpoint(game):
    server = qmp_serve("tcp:127.0.0.1:0", game.channel)
    try:
        host, port = server.address
        with QmpClient(f"tcp:{host}:{port}") as c:
            assert c.greeting == GREETING
            assert c.execute(json.loads(LEFT_DOWN)) == {"return": {}}
    finally:
        server.close()


def test_bad_endpoint(game):
    with pytest.raises(EndpointUnavailable):
        qmp_serve("/nonexistent-dir/x.sock", game.channel)


def test_protocol_errors(game):
    proto = QmpProtocol(game.channel)
    assert json.loads(proto.handle_line("{not json"))["error"]["class"] == "GenericError"
    assert json.loads(proto.handle_line('{"foo":1}'))["error"]["class"] == "GenericError"
    bad = '{"execute":"input-send-event","arguments":{"events":[{"type":"btn","data":{"down":true,"button":"x"}}]}}'
    assert json.loads(proto.handle_line(bad))["error"]["class"] == "GenericError"
    assert proto.handle_line('{"execute":"qmp_capabilities","id":4}') == '{"return":{},"id":4}'
    game.channel.close()
    assert json.loads(proto.handle_line(LEFT_DOWN))["error"]["class"] == "GenericError"


def test_button_down_up_is_one_burst(game):
    game.channel.inject(InputEvent.button("left", True))
    game.step()
    game.channel.inject(InputEvent.button("left", False))
    game.step()
    assert game.fire_bursts == 1
    assert game.read_fire_state() == (0, 0)


def test_w_key_moves_forward():
    game = ToyGame(GuestMemory(), static_scene())
    cfg = game.config
    game.channel.inject(InputEvent.key("w", True))
    for _ in range(10):
        game.step()
    game.channel.inject(InputEvent.key("w", False))
    for _ in range(5):
        game.step()
    (x, y, _), yaw, _, _ = game.read_local_player()
    assert x == pytest.approx(10 * cfg.player_speed * cfg.dt, rel=1e-6)
    assert y == pytest.approx(0.0, abs=1e-6)


def test_closed_channel(game):
    game.channel.close()
    with pytest.raises(ChannelClosed):
        game.channel.inject(InputEvent.button("left", True))


def test_poll_semantics(game):
    assert guest_poll_input(game) == []
    game.channel.inject(InputEvent.button("left", True))
    scripted_input(game.input_queue, InputEvent.button("left", True), game.tick)
    scripted_input(game.input_queue, InputEvent.key("w", True), game.tick + 5)
    a, b = guest_poll_input(game)
    assert a == b and a.to_bytes() == b.to_bytes()
    assert guest_poll_input(game) == []
    game.guest.now = 5
    assert [e.detail for e in guest_poll_input(game)] == ["w"]


def test_vocabulary_is_indistinguishable():
    synthetic = event_vocabulary(Origin.SYNTHETIC)
    scripted = event_vocabulary(Origin.SCRIPTED)
    q1, q2 = InputQueue(), InputQueue()
    for a, b in zip(synthetic, scripted):
        q1.push(a, 0)
        q2.push(b, 0)
    out1, out2 = q1.drain(0), q2.drain(0)
    assert len(out1) == len(synthetic)
    assert out1 == out2
    assert [e.to_bytes() for e in out1] == [e.to_bytes() for e in out2]
    assert len({e.to_bytes() for e in out1}) == len(out1)


def test_qmp_round_trip_over_vocabulary(game):
    proto = QmpProtocol(game.channel)
    vocab = [e for e in event_vocabulary() if e.action is not Action.MOVE or 0 in e.detail]
    for ev in vocab:
        assert proto.handle_line(json.dumps(qmp_input_command([ev]))) == '{"return":{}}'
    drained = game.input_queue.drain(game.tick)
    assert drained == [e.guest_view() for e in vocab if not (e.action is Action.MOVE and e.detail == (0, 0))]


def test_event_validation():
    with pytest.raises(ValueError):
        InputEvent(Device.KEYBOARD, Action.MOVE, (1, 1))
    with pytest.raises(ValueError):
        InputEvent.key("f13", True)
    with pytest.raises(ValueError):
        InputEvent(Device.MOUSE, Action.KEY_DOWN, "w")


@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from(event_vocabulary())), max_size=50))
def test_queue_orders_by_time_then_arrival(items):
    q = InputQueue()
    for ts, ev in items:
        q.push(ev, ts)
    got = q.drain(10)
    order = sorted(range(len(items)), key=lambda i: (items[i][0], i))
    expected = [items[i][1].guest_view() for i in order]
    assert got == expected
