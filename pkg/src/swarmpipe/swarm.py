"""Convenience builders: wire a simulated swarm (directory + block servers +
client factory) in one call, directly or from a JSON config file. Used by the
tests, the benchmark harness, and the demo scripts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .balancer import RebalanceConfig
from .client import RealClientEngine, SwarmClient, TimedClientEngine
from .directory import DirectoryBoard, DirectoryHandler
from .model import ModelConfig, init_model
from .netsim import ChurnSchedule, NetProfile, SimNetwork
from .server import BlockServer, RealServerEngine, ServerCfg, TimedServerEngine


@dataclass
class SimSwarm:
    net: SimNetwork
    board: DirectoryBoard
    servers: dict[str, BlockServer]
    model_config: ModelConfig
    engine_kind: str
    _client_seq: int = 0

    def client(self, name: str | None = None, **kw) -> SwarmClient:
        self._client_seq += 1
        name = name or f"client{self._client_seq}"
        engine = (RealClientEngine(self.model_config) if self.engine_kind == "real"
                  else TimedClientEngine(self.model_config))
        return SwarmClient(name, self.model_config, self.net, self.board,
                           engine=engine, **kw)

    def server_list(self) -> list[BlockServer]:
        return [self.servers[k] for k in sorted(self.servers)]


def stage_intervals(n_blocks: int, n_stages: int) -> list[tuple[int, int]]:
    """Split [0, n_blocks) into n_stages near-even contiguous spans."""
    base, extra = divmod(n_blocks, n_stages)
    out = []
    at = 0
    for s in range(n_stages):
        size = base + (1 if s < extra else 0)
        out.append((at, at + size))
        at += size
    return out


def build_sim_swarm(model: ModelConfig | None = None,
                    n_stages: int = 4,
                    replicas: int = 2,
                    profile: NetProfile | None = None,
                    engine: str = "real",
                    seed: int = 0,
                    compute_tokens_per_s: float = 100.0,
                    server_overrides: dict[str, dict] | None = None,
                    churn: dict[str, ChurnSchedule] | None = None,
                    balancer: bool = False,
                    trace: bool = False) -> SimSwarm:
    """Stand up a simulated swarm: one directory plus ``replicas`` servers per
    pipeline stage, all announced and ready to serve."""
    model = model or ModelConfig()
    profile = profile or NetProfile()
    net = SimNetwork(seed=seed, default_profile=profile, trace=trace)
    board = DirectoryBoard(model.n_blocks, lambda: net.clock.now)
    net.register("directory", DirectoryHandler(board))

    if engine == "real":
        shared_blocks = init_model(model)[0]
        def make_engine():
            return RealServerEngine(model, shared_blocks)
    else:
        def make_engine():
            return TimedServerEngine(model)

    servers: dict[str, BlockServer] = {}
    overrides = server_overrides or {}
    for si, (a, b) in enumerate(stage_intervals(model.n_blocks, n_stages)):
        for r in range(replicas):
            sid = f"s{si}{chr(ord('a') + r)}"
            kw = {"server_id": sid, "capacity": b - a, "start": a,
                  "compute_tokens_per_s": compute_tokens_per_s}
            kw.update(overrides.get(sid, {}))
            drop_override = kw.pop("drop_override", None)
            srv = BlockServer(ServerCfg(**kw), make_engine(), net, board)
            servers[sid] = srv
            net.register(sid, srv, churn=(churn or {}).get(sid),
                         drop_override=drop_override)
            srv.start_timers(balancer=balancer)
    net.clock.advance(0.1)   # let the initial announcements land
    return SimSwarm(net, board, servers, model, engine)


def build_swarm_from_config(config: dict | str) -> SimSwarm:
    """Stand up a simulated swarm from the JSON schema in docs/bench.md:
    model dimensions, link profile, and one entry per server with interval,
    capacity, throughput override, churn schedule, and failure hooks."""
    if isinstance(config, str):
        with open(config) as f:
            config = json.load(f)
    model = ModelConfig(**config.get("model", {}))
    profile = NetProfile(**config.get("profile", {}))
    seed = config.get("seed", 0)
    engine = config.get("engine", "real")
    net = SimNetwork(seed=seed, default_profile=profile)
    board = DirectoryBoard(model.n_blocks, lambda: net.clock.now)
    net.register("directory", DirectoryHandler(board))
    shared_blocks = init_model(model)[0] if engine == "real" else None

    servers: dict[str, BlockServer] = {}
    for entry in config["servers"]:
        entry = dict(entry)
        churn = (ChurnSchedule([tuple(iv) for iv in entry.pop("churn")])
                 if "churn" in entry else None)
        drop_override = entry.pop("drop_override", None)
        balancer = entry.pop("balancer", config.get("balancer", False))
        if "rebalance" in entry:
            entry["rebalance"] = RebalanceConfig(**entry["rebalance"])
        cfg = ServerCfg(**entry)
        eng = (RealServerEngine(model, shared_blocks) if engine == "real"
               else TimedServerEngine(model))
        srv = BlockServer(cfg, eng, net, board)
        servers[cfg.server_id] = srv
        net.register(cfg.server_id, srv, churn=churn, drop_override=drop_override)
        srv.start_timers(balancer=balancer)
    net.clock.advance(0.1)
    return SimSwarm(net, board, servers, model, engine)
