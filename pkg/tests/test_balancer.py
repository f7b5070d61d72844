"""Placement rule, rebalancing cascade, and the exact assignment oracle."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from swarmpipe.balancer import (RebalanceConfig, choose_start, greedy_fixpoint,
                                greedy_join_assignment, greedy_swarm_assignment,
                                measure_throughput, optimal_assignment_bruteforce,
                                propose_rebalance, swarm_throughput)
from swarmpipe.directory import ServerInfo
from swarmpipe.errors import ConfigurationError


def _srv(sid, start, end, thr, state="online"):
    return ServerInfo(sid, sid, start, end, thr, state)


class TestMeasureThroughput:
    @pytest.mark.parametrize("net,comp,want", [(100, 40, 40), (5, 500, 5), (7, 7, 7)])
    def test_min_rule(self, net, comp, want):
        assert measure_throughput(net, comp) == want

    def test_rejects_nonpositive(self):
        with pytest.raises(ConfigurationError):
            measure_throughput(0, 5)


class TestChooseStart:
    def test_weakest_window_wins(self):
        assert choose_start(4, 2, [10, 0, 0, 5]) == 1

    def test_all_zero_leftmost(self):
        assert choose_start(6, 3, [0.0] * 6) == 0

    def test_full_width_single_window(self):
        assert choose_start(5, 5, [9, 1, 4, 4, 4]) == 0

    def test_capacity_larger_than_blocks_rejected(self):
        with pytest.raises(ConfigurationError):
            choose_start(4, 5, [0.0] * 4)

    @settings(max_examples=120, deadline=None)
    @given(st.integers(1, 32), st.integers(0, 2 ** 31))
    def test_matches_exhaustive_enumeration(self, n_blocks, seed):
        rng = np.random.default_rng(seed)
        capacity = int(rng.integers(1, n_blocks + 1))
        loads = list(rng.uniform(0, 100, n_blocks))
        got = choose_start(n_blocks, capacity, loads)
        keys = [sorted(loads[s:s + capacity]) for s in range(n_blocks - capacity + 1)]
        want = min(range(len(keys)), key=lambda s: (keys[s], s))
        assert got == want
        assert 0 <= got <= n_blocks - capacity


class TestSwarmThroughput:
    def test_bottleneck_sum(self):
        snap = [_srv("a", 0, 2, 10.0), _srv("b", 1, 3, 5.0)]
        assert swarm_throughput(snap, 3) == 5.0

    def test_uncovered_block_zero(self):
        assert swarm_throughput([_srv("a", 0, 2, 10.0)], 3) == 0.0

    def test_single_full_cover(self):
        assert swarm_throughput([_srv("a", 0, 4, 7.0)], 4) == 7.0

    def test_joining_does_not_serve_yet(self):
        snap = [_srv("a", 0, 4, 7.0), _srv("b", 0, 4, 9.0, state="joining")]
        assert swarm_throughput(snap, 4) == 7.0


class TestRebalance:
    def test_balanced_fixpoint_proposes_nothing(self):
        snap = [_srv("a", 0, 2, 10.0), _srv("b", 2, 4, 10.0)]
        cfg = RebalanceConfig()
        for sid in ("a", "b"):
            assert propose_rebalance(sid, snap, 4, cfg) is None

    def test_gap_gets_covered(self):
        """Servers for the first blocks left; an extra replica elsewhere moves."""
        snap = [_srv("c", 2, 4, 10.0), _srv("d", 2, 4, 8.0)]
        cfg = RebalanceConfig()
        moves = {sid: propose_rebalance(sid, snap, 4, cfg) for sid in ("c", "d")}
        accepted = {sid: m for sid, m in moves.items() if m}
        assert accepted, "someone must move to cover the gap"
        sid, move = next(iter(accepted.items()))
        hyp = [r if r.server_id != sid else _srv(sid, move[0], move[1],
                                                 r.throughput)
               for r in snap]
        assert swarm_throughput(greedy_fixpoint(hyp, 4), 4) > 0

    def test_improvement_below_threshold_rejected(self):
        # moving b onto [0,1) would lift throughput 10 -> 11, only +10%
        snap = [_srv("a", 0, 1, 10.0), _srv("b", 1, 2, 10.0),
                _srv("c", 0, 2, 1.0)]
        cfg = RebalanceConfig(threshold_pct=20.0)
        assert propose_rebalance("c", snap, 2, cfg) is None

    def test_no_oscillation_within_three_sweeps(self):
        rng = np.random.default_rng(5)
        snap = []
        for i in range(10):
            cap = int(rng.integers(1, 5))
            start = int(rng.integers(0, 12 - cap + 1))
            snap.append(_srv(f"s{i:02d}", start, start + cap, float(rng.uniform(1, 100))))
        cfg = RebalanceConfig()
        sweeps_with_moves = 0
        for _ in range(3):
            moved = False
            for sid in sorted(r.server_id for r in snap):
                move = propose_rebalance(sid, snap, 12, cfg)
                if move:
                    moved = True
                    snap = [r if r.server_id != sid else
                            _srv(sid, move[0], move[1], r.throughput) for r in snap]
            sweeps_with_moves += moved
            if not moved:
                break
        # after at most three sweeps the population is quiescent
        for sid in sorted(r.server_id for r in snap):
            assert propose_rebalance(sid, snap, 12, RebalanceConfig()) is None


class TestBruteForce:
    def test_single_server_takes_everything(self):
        assign, value = optimal_assignment_bruteforce([(4, 9.0)], 4)
        assert assign[0] == (0, 4)
        assert value == 9.0

    def test_two_halves_split_disjointly(self):
        assign, value = optimal_assignment_bruteforce([(3, 8.0), (3, 5.0)], 6)
        assert value == 5.0
        (s0, e0), (s1, e1) = assign[0], assign[1]
        assert {(s0, e0), (s1, e1)} == {(0, 3), (3, 6)}

    def test_refuses_oversized_instances(self):
        with pytest.raises(ConfigurationError):
            optimal_assignment_bruteforce([(1, 1.0)] * 11, 4)
        with pytest.raises(ConfigurationError):
            optimal_assignment_bruteforce([(1, 1.0)], 15)

    def test_matches_naive_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(120):
            n = int(rng.integers(1, 5))
            n_blocks = int(rng.integers(2, 7))
            servers = [(int(rng.integers(1, n_blocks + 1)), float(rng.uniform(1, 100)))
                       for _ in range(n)]
            _, got = optimal_assignment_bruteforce(servers, n_blocks)
            best = 0.0
            ranges = [range(0, n_blocks - min(c, n_blocks) + 1) for c, _ in servers]
            for starts in itertools.product(*ranges):
                cover = [0.0] * n_blocks
                for (c, t), s in zip(servers, starts):
                    for b in range(s, s + min(c, n_blocks)):
                        cover[b] += t
                best = max(best, min(cover))
            assert got == pytest.approx(best)

    def test_greedy_never_beats_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            n = int(rng.integers(2, 7))
            servers = [(int(rng.integers(1, 6)), float(rng.uniform(0, 100)))
                       for _ in range(n)]
            _, opt = optimal_assignment_bruteforce(servers, 10)
            _, greedy = greedy_swarm_assignment(servers, 10)
            assert greedy <= opt + 1e-9


class TestGreedyJoin:
    def test_full_cover_when_capacity_sufficient(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n_blocks = int(rng.integers(4, 13))
            servers = []
            while sum(min(c, n_blocks) for c, _ in servers) < n_blocks:
                servers.append((int(rng.integers(1, 7)), float(rng.uniform(1, 100))))
            assign, value = greedy_join_assignment(servers, n_blocks)
            assert value > 0, (servers, n_blocks, assign)

    def test_join_order_respected(self):
        servers = [(2, 10.0), (2, 10.0)]
        a, _ = greedy_join_assignment(servers, 4, order=[0, 1])
        assert a[0] == (0, 2) and a[1] == (2, 4)
