"""Simulated transport: drop statistics, delays, churn, determinism."""

import numpy as np
import pytest

from swarmpipe.errors import ConnectionFailed, MessageDropped, Unreachable
from swarmpipe.netsim import (ChurnSchedule, HandlerContext, NetProfile,
                              SimNetwork, VirtualClock)
from swarmpipe.wire import Announce, Ping, Pong, WireMessage, framed_nbytes


class _Echo:
    def __init__(self, compute_s: float = 0.0):
        self.compute_s = compute_s
        self.seen = []

    def handle(self, msg, ctx):
        self.seen.append((ctx.now, msg.kind.name))
        if self.compute_s:
            ctx.consume(self.compute_s)
        return WireMessage(Pong())


def _net(p=0.0, seed=0, rtt=10.0, bw=1e9, **kw):
    net = SimNetwork(seed=seed, default_profile=NetProfile(bw, rtt, p), **kw)
    echo = _Echo()
    net.register("srv", echo)
    return net, echo


class TestClock:
    def test_agenda_order(self):
        clock = VirtualClock()
        out = []
        clock.schedule(2.0, lambda: out.append(2))
        clock.schedule(0.5, lambda: out.append(0))
        clock.schedule(9.0, lambda: out.append(9))
        clock.advance_to(3.0)
        assert out == [0, 2]
        assert clock.now == 3.0

    def test_callbacks_can_reschedule(self):
        clock = VirtualClock()
        ticks = []

        def tick():
            ticks.append(clock.now)
            if len(ticks) < 3:
                clock.schedule(clock.now + 1.0, tick)

        clock.schedule(1.0, tick)
        clock.advance_to(10.0)
        assert ticks == [1.0, 2.0, 3.0]


class TestSend:
    def test_p_zero_never_fails(self):
        net, echo = _net(p=0.0)
        ok = sum(net.post("c", "srv", WireMessage(Ping())) for _ in range(10_000))
        assert ok == 10_000

    def test_p_one_always_fails(self):
        net, _ = _net(p=1.0)
        assert not any(net.post("c", "srv", WireMessage(Ping())) for _ in range(100))

    def test_binomial_drop_count(self):
        net, _ = _net(p=0.01, seed=123)
        fails = sum(not net.post("c", "srv", WireMessage(Ping())) for _ in range(100_000))
        assert abs(fails - 1000) <= 3 * 31.5

    def test_delivery_delay_rtt_plus_transfer(self):
        net, echo = _net(rtt=100.0, bw=1e6)   # 1 Mbit/s
        msg = WireMessage(Ping())
        net.post("c", "srv", msg)
        net.clock.advance_to(10.0)
        expect = 0.05 + framed_nbytes(msg) * 8 / 1e6
        assert echo.seen[0][0] == pytest.approx(expect)

    def test_fifo_per_pair(self):
        net, echo = _net()
        for _ in range(5):
            net.post("c", "srv", WireMessage(Ping()))
        net.clock.advance_to(1.0)
        times = [t for t, _ in echo.seen]
        assert times == sorted(times)

    def test_offline_is_connection_error_not_drop(self):
        net = SimNetwork(seed=0)
        net.register("srv", _Echo(), churn=ChurnSchedule([(10.0, 20.0)]))
        with pytest.raises(ConnectionFailed):
            net.post("c", "srv", WireMessage(Ping()))
        net.clock.advance_to(15.0)
        assert net.post("c", "srv", WireMessage(Ping()))
        net.clock.advance_to(25.0)
        with pytest.raises(ConnectionFailed):
            net.post("c", "srv", WireMessage(Ping()))

    def test_byte_accounting_exact(self):
        net, _ = _net()
        msg = WireMessage(Ping())
        for _ in range(7):
            net.post("c", "srv", msg)
        assert net.links[("c", "srv")].bytes == 7 * framed_nbytes(msg)
        assert net.links[("c", "srv")].messages == 7


class TestRpc:
    def test_round_trip_time(self):
        net, _ = _net(rtt=100.0)
        t0 = net.clock.now
        net.rpc("c", "srv", WireMessage(Ping()))
        assert net.clock.now - t0 == pytest.approx(0.1, rel=1e-3)

    def test_request_drop_costs_detection_budget(self):
        net, echo = _net(p=1.0, rtt=100.0)
        msg = WireMessage(Ping())
        t0 = net.clock.now
        with pytest.raises(MessageDropped):
            net.rpc("c", "srv", msg)
        detect = 0.4 + 2 * framed_nbytes(msg) * 8 / 1e9
        assert net.clock.now - t0 == pytest.approx(detect)
        assert echo.seen == []

    def test_handler_compute_advances_clock(self):
        net = SimNetwork(seed=0, default_profile=NetProfile(rtt_ms=0.0))
        net.register("srv", _Echo(compute_s=2.5))
        t0 = net.clock.now
        net.rpc("c", "srv", WireMessage(Ping()))
        assert net.clock.now - t0 >= 2.5

    def test_timers_fire_during_compute(self):
        net = SimNetwork(seed=0)
        net.register("srv", _Echo(compute_s=5.0))
        fired = []
        net.clock.schedule(2.0, lambda: fired.append(net.clock.now))
        net.rpc("c", "srv", WireMessage(Ping()))
        assert fired == [2.0]


class TestPing:
    def test_exact_rtt(self):
        net, _ = _net(rtt=100.0)
        assert net.ping("c", "srv") == 100.0

    def test_zero_variance(self):
        net, _ = _net(rtt=37.0)
        samples = {net.ping("c", "srv") for _ in range(3)}
        assert samples == {37.0}

    def test_offline_unreachable(self):
        net = SimNetwork(seed=0)
        net.register("srv", _Echo(), churn=ChurnSchedule([(5.0, 6.0)]))
        with pytest.raises(Unreachable):
            net.ping("c", "srv")


class TestDeterminism:
    def _trace(self, seed):
        net = SimNetwork(seed=seed, default_profile=NetProfile(1e8, 20.0, 0.05),
                         trace=True)
        net.register("srv", _Echo())
        outcomes = []
        for i in range(500):
            try:
                net.rpc("c", "srv", WireMessage(Ping()))
                outcomes.append(1)
            except MessageDropped:
                outcomes.append(0)
        return outcomes, list(net.trace), net.total_bytes(), net.clock.now

    def test_same_seed_same_everything(self):
        a = self._trace(7)
        b = self._trace(7)
        assert a == b

    def test_different_seed_differs(self):
        assert self._trace(7)[0] != self._trace(8)[0]
