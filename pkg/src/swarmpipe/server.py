"""Block server: serves a contiguous span of transformer blocks, runs
restorable inference sessions, reorders beam caches, answers stateless
training passes, and periodically re-balances its block assignment.

Two payload engines sit behind the same protocol handler:

* ``RealServerEngine`` computes actual activations with the toy model, so
  distributed outputs can be checked against the single-process oracle.
* ``TimedServerEngine`` tracks only shapes. Wire sizes and virtual compute
  times are identical to the real engine, which is what the benchmark
  experiments measure; correctness suites always run the real engine.

Virtual compute costs (configurable): a single-position step costs
``step_s_per_block`` per block; batched passes (prefill, restore, stateless
forward) cost ``batch_base_s_per_block + batch_s_per_row * rows`` per block;
backward costs twice its forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .balancer import RebalanceConfig, measure_throughput, propose_rebalance
from .directory import ANNOUNCE_PERIOD_S, STATE_JOINING, STATE_ONLINE, DirectoryBoard, ServerInfo
from .errors import ProtocolError
from .netsim import HandlerContext, SimNetwork, SimulatedCrash
from .wire import (Announce, Backward, Close, Error, Forward, HiddenBlob,
                   OpenSession, Ping, Pong, Reorder, Restore, Step, StepResult,
                   WireMessage, fnv1a64)

SESSION_TTL_S = 300.0


@dataclass
class ComputeModel:
    """Virtual seconds charged per unit of work. The per-block step time is
    the inverse of the server's compute rate (default 100 tokens/s -> 10 ms);
    batched passes add a per-row term."""

    step_s_per_block: float = 0.010
    batch_s_per_row: float = 0.0005

    def stage_seconds(self, n_blocks: int, rows: int, single_position: bool) -> float:
        if single_position:
            return n_blocks * self.step_s_per_block
        return n_blocks * (self.step_s_per_block + self.batch_s_per_row * rows)


@dataclass
class ServerCfg:
    server_id: str
    capacity: int
    start: int = 0
    compute_tokens_per_s: float = 100.0
    net_tokens_per_s: float = 1e6
    session_ttl_s: float = SESSION_TTL_S
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    batch_s_per_row: float = 0.0005
    load_time_s_per_block: float = 0.0
    crash_after_messages: int | None = None   # failure injection

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ProtocolError("capacity must be >= 1")
        if self.compute_tokens_per_s <= 0:
            raise ProtocolError("compute rate must be > 0")
        self.compute = ComputeModel(1.0 / self.compute_tokens_per_s, self.batch_s_per_row)


# ---------------------------------------------------------------------------
# engines
# ---------------------------------------------------------------------------

class RealServerEngine:
    """Numpy-backed payload engine over the deterministic toy model."""

    def __init__(self, config: M.ModelConfig, blocks: list[M.BlockParams] | None = None):
        self.config = config
        self.blocks = blocks if blocks is not None else M.init_model(config)[0]

    def make_caches(self, start: int, end: int, width: int) -> list[M.KVCache]:
        return [M.KVCache.empty(self.config, width) for _ in range(start, end)]

    def cache_length(self, caches: list[M.KVCache]) -> int:
        lengths = {c.length for c in caches}
        if len(lengths) != 1:
            raise ProtocolError("per-block cache lengths diverged")
        return lengths.pop()

    def run_cached(self, start: int, end: int, caches: list[M.KVCache],
                   blob: HiddenBlob, width: int, n_new: int, quantized: bool) -> HiddenBlob:
        x = blob.array().reshape(width, n_new, self.config.hidden_dim)
        for bi, cache in zip(range(start, end), caches):
            x, k_new, v_new = M.block_forward_batched(
                self.blocks[bi], x, cache.keys, cache.values)
            cache.append(k_new, v_new)
        return HiddenBlob.from_array(x.reshape(width * n_new, -1), quantized)

    def reorder(self, caches: list[M.KVCache], parents_zero_based: list[int]) -> None:
        for c in caches:
            c.gather(parents_zero_based)

    def forward(self, start: int, end: int, blob: HiddenBlob, batch: int, tokens: int,
                micro_batch_tokens: int, record: list | None) -> HiddenBlob:
        x = blob.array().reshape(batch, tokens, self.config.hidden_dim)
        outs = []
        for chunk in _micro_batches(batch, tokens, micro_batch_tokens):
            xc = x[chunk]
            if record is not None:
                per_block = []
            for bi in range(start, end):
                if record is not None:
                    per_block.append(xc)
                xc, _, _ = M.block_forward_batched(
                    self.blocks[bi], xc,
                    np.zeros((xc.shape[0], 0, self.config.n_heads, self.config.head_dim), np.float32),
                    np.zeros((xc.shape[0], 0, self.config.n_heads, self.config.head_dim), np.float32))
            if record is not None:
                record.append((chunk, per_block))
            outs.append(xc)
        y = np.concatenate(outs, axis=0)
        return HiddenBlob.from_array(y.reshape(batch * tokens, -1))

    def backward(self, start: int, end: int, blob: HiddenBlob, batch: int, tokens: int,
                 record: list) -> HiddenBlob:
        g = blob.array().reshape(batch, tokens, self.config.hidden_dim)
        grads = []
        for chunk, per_block in record:
            gc = g[chunk]
            for offset, bi in enumerate(reversed(range(start, end))):
                xin = per_block[len(per_block) - 1 - offset]
                gc = M.block_backward(self.blocks[bi], M.HiddenStates(xin),
                                      M.HiddenStates(gc), self.config.n_heads).data
            grads.append(gc)
        out = np.concatenate(grads, axis=0)
        return HiddenBlob.from_array(out.reshape(batch * tokens, -1))

    def blob_checksum(self, blob: HiddenBlob) -> int:
        return fnv1a64(np.ascontiguousarray(blob.array()).tobytes())


@dataclass
class _TimedCaches:
    width: int
    length: int


class TimedServerEngine:
    """Shape-only engine: same protocol, no arithmetic. Sessions track cache
    shape; outputs are synthetic blobs of the right size."""

    def __init__(self, config: M.ModelConfig):
        self.config = config

    def make_caches(self, start: int, end: int, width: int) -> _TimedCaches:
        return _TimedCaches(width, 0)

    def cache_length(self, caches: _TimedCaches) -> int:
        return caches.length

    def run_cached(self, start: int, end: int, caches: _TimedCaches,
                   blob: HiddenBlob, width: int, n_new: int, quantized: bool) -> HiddenBlob:
        caches.length += n_new
        return HiddenBlob.shape_only(width * n_new, self.config.hidden_dim, quantized)

    def reorder(self, caches: _TimedCaches, parents_zero_based: list[int]) -> None:
        if parents_zero_based and max(parents_zero_based) >= caches.width:
            raise ProtocolError("reorder index out of range")
        caches.width = len(parents_zero_based)

    def forward(self, start: int, end: int, blob: HiddenBlob, batch: int, tokens: int,
                micro_batch_tokens: int, record: list | None) -> HiddenBlob:
        if record is not None:
            record.append((batch, tokens))
        return HiddenBlob.shape_only(batch * tokens, self.config.hidden_dim,
                                     blob.quantize_flag)

    def backward(self, start: int, end: int, blob: HiddenBlob, batch: int, tokens: int,
                 record: list) -> HiddenBlob:
        return HiddenBlob.shape_only(batch * tokens, self.config.hidden_dim)

    def blob_checksum(self, blob: HiddenBlob) -> int:
        return 0


def _micro_batches(batch: int, tokens: int, micro_batch_tokens: int):
    """Split sequence indices into chunks of at most micro_batch_tokens total
    tokens (whole sequences; a single long sequence runs unsplit)."""
    per_chunk = max(1, micro_batch_tokens // max(tokens, 1))
    for lo in range(0, batch, per_chunk):
        yield slice(lo, min(lo + per_chunk, batch))


# ---------------------------------------------------------------------------
# the server
# ---------------------------------------------------------------------------

@dataclass
class SessionState:
    session_id: int
    start: int
    end: int
    width: int
    quantized: bool
    caches: object
    positions: int
    last_activity: float
    desynced: bool = False
    relay_next: str = ""
    client_addr: str = ""


MICRO_BATCH_TOKENS = 1024


class BlockServer:
    """Protocol handler for one server node."""

    def __init__(self, cfg: ServerCfg, engine, net: SimNetwork,
                 board: DirectoryBoard, directory_addr: str = "directory"):
        self.cfg = cfg
        self.engine = engine
        self.net = net
        self.board = board
        self.directory_addr = directory_addr
        self.n_blocks = engine.config.n_blocks
        self.start = cfg.start
        self.end = min(cfg.start + cfg.capacity, self.n_blocks)
        self.sessions: dict[int, SessionState] = {}
        self.forward_records: dict[tuple[int, int], list] = {}
        self.replay: dict[int, tuple[int, WireMessage]] = {}   # session -> (req_id, reply)
        self.handled = 0
        self.loading_until: float | None = None
        self.block_moves = 0
        self._timers_started = False

    # -- lifecycle -----------------------------------------------------------

    @property
    def server_id(self) -> str:
        return self.cfg.server_id

    def self_measure(self) -> float:
        """Benchmark the compute rate (a 32-forward burst of one block in
        virtual time) and take the narrower of it and the network rate."""
        burst_s = 32 * self.cfg.compute.step_s_per_block
        return measure_throughput(self.cfg.net_tokens_per_s, 32.0 / burst_s)

    def throughput(self) -> float:
        return self.self_measure()

    def announce(self, state: str = STATE_ONLINE) -> None:
        rec = ServerInfo(self.server_id, self.server_id, self.start, self.end,
                         self.throughput(), state).to_dict()
        try:
            self.net.post(self.server_id, self.directory_addr, WireMessage(Announce(rec)))
        except Exception:
            pass

    def start_timers(self, balancer: bool = False) -> None:
        if self._timers_started:
            return
        self._timers_started = True
        self.announce()
        self._schedule_announce()
        if balancer:
            self._schedule_balance()

    def _phase(self) -> float:
        # servers do not share a clock: spread periodic work deterministically
        # so concurrent movers see each other's committed intentions
        h = M._splitmix64(sum(self.server_id.encode()), 1)[0]
        return float(h % 10_000) / 10_000.0

    def _schedule_announce(self) -> None:
        def tick() -> None:
            if self.net.online(self.server_id):
                self.announce(STATE_JOINING if self.loading_until and
                              self.net.clock.now < self.loading_until else STATE_ONLINE)
            self._schedule_announce()
        self.net.clock.schedule(self.net.clock.now + ANNOUNCE_PERIOD_S, tick)

    def _schedule_balance(self) -> None:
        period = self.cfg.rebalance.check_period_s
        first = not hasattr(self, "_balance_started")
        self._balance_started = True
        delay = period * (1.0 + self._phase()) if first else period

        def tick() -> None:
            if self.net.online(self.server_id) and self.loading_until is None:
                self.balance_once()
            self._schedule_balance()
        self.net.clock.schedule(self.net.clock.now + delay, tick)

    def balance_once(self) -> bool:
        """One rebalance check; commits and reloads blocks when worthwhile."""
        snap = self.board.snapshot()
        move = propose_rebalance(self.server_id, snap, self.n_blocks, self.cfg.rebalance)
        if move is None:
            return False
        self.start, self.end = move
        self.sessions.clear()       # block replacement resets attention caches
        self.block_moves += 1
        load_s = self.cfg.load_time_s_per_block * (self.end - self.start)
        if load_s > 0:
            self.loading_until = self.net.clock.now + load_s
            self.announce(STATE_JOINING)

            def done() -> None:
                self.loading_until = None
                self.announce(STATE_ONLINE)
            self.net.clock.schedule(self.loading_until, done)
        else:
            self.announce(STATE_ONLINE)
        return True

    # -- protocol ------------------------------------------------------------

    def handle(self, msg: WireMessage, ctx: HandlerContext) -> WireMessage:
        self.handled += 1
        if self.cfg.crash_after_messages is not None and self.handled > self.cfg.crash_after_messages:
            raise SimulatedCrash(self.server_id)
        if self.handled % 256 == 0:
            self._purge_stale()
        p = msg.payload
        if isinstance(p, Ping):
            return WireMessage(Pong())
        if isinstance(p, OpenSession):
            return self._open(msg.session_id, p, ctx)
        if isinstance(p, Step):
            return self._step(msg.session_id, p, ctx)
        if isinstance(p, Restore):
            return self._restore(msg.session_id, p, ctx)
        if isinstance(p, Reorder):
            return self._reorder(msg.session_id, p, ctx)
        if isinstance(p, Close):
            self.sessions.pop(msg.session_id, None)
            return WireMessage(Pong())
        if isinstance(p, Forward):
            return self._forward(msg.session_id, p, ctx)
        if isinstance(p, Backward):
            return self._backward(msg.session_id, p, ctx)
        return WireMessage(Error("protocol", f"unsupported kind {msg.kind.name}"))

    def _session(self, sid: int) -> SessionState | None:
        s = self.sessions.get(sid)
        if s is None:
            return None
        if self.net.clock.now - s.last_activity > self.cfg.session_ttl_s:
            del self.sessions[sid]
            return None
        return s

    def _purge_stale(self) -> None:
        """Abandoned sessions and replay entries age out; bounds memory under
        restart-heavy workloads."""
        now = self.net.clock.now
        for sid in [k for k, s in self.sessions.items()
                    if now - s.last_activity > self.cfg.session_ttl_s]:
            del self.sessions[sid]
        if len(self.replay) > 4096:
            for key in list(self.replay)[:len(self.replay) - 4096]:
                del self.replay[key]
        if len(self.forward_records) > 1024:
            for key in list(self.forward_records)[:len(self.forward_records) - 1024]:
                del self.forward_records[key]

    def _open(self, sid: int, p: OpenSession, ctx: HandlerContext) -> WireMessage:
        if self.loading_until is not None and self.net.clock.now < self.loading_until:
            return WireMessage(Error("not_serving", "loading blocks"))
        if not (self.start <= p.start and p.end <= self.end and p.start < p.end):
            return WireMessage(Error(
                "not_serving",
                f"serves [{self.start}, {self.end}), asked [{p.start}, {p.end})"))
        self.sessions[sid] = SessionState(
            sid, p.start, p.end, p.width, p.quantized,
            self.engine.make_caches(p.start, p.end, p.width), 0,
            self.net.clock.now, relay_next=p.relay_next, client_addr=p.client_addr)
        return WireMessage(Pong())

    def _step(self, sid: int, p: Step, ctx: HandlerContext) -> WireMessage:
        s = self._session(sid)
        if s is None:
            return WireMessage(Error("expired", "no such session"))
        if s.desynced:
            return WireMessage(Error("desync", "relay checksum mismatch"))
        if p.checksum and self.engine.blob_checksum(p.blob) != p.checksum:
            # relayed activations disagree with what the sender hashed
            s.desynced = True
            return WireMessage(Error("desync", "relay checksum mismatch"))
        if p.position_offset != s.positions:
            return WireMessage(Error(
                "desync", f"at position {s.positions}, step claims {p.position_offset}"))
        if p.width != s.width:
            return WireMessage(Error("desync", f"width {s.width} != {p.width}"))
        if p.position_offset + p.n_new > self.engine.config.max_seq_len:
            return WireMessage(Error("capacity", "sequence exceeds max_seq_len"))
        n_blocks = s.end - s.start
        rows = p.width * p.n_new
        ctx.consume(self.cfg.compute.stage_seconds(n_blocks, rows, p.n_new == 1))
        out = self.engine.run_cached(s.start, s.end, s.caches, p.blob,
                                     p.width, p.n_new, s.quantized)
        s.positions += p.n_new
        if self.engine.cache_length(s.caches) != s.positions:
            s.desynced = True
            return WireMessage(Error("desync", "cache length diverged"))
        s.last_activity = self.net.clock.now
        result = StepResult(p.position_offset, out, p.width, p.n_new)
        if s.client_addr:
            # relay mode: outputs go to both the client and the next stage
            checksum = self.engine.blob_checksum(out)
            result.checksum = checksum
            try:
                ctx.post(s.client_addr, WireMessage(
                    StepResult(p.position_offset, out, p.width, p.n_new, checksum), sid))
            except Exception:
                pass
            if s.relay_next:
                try:
                    ctx.post(s.relay_next, WireMessage(
                        Step(p.position_offset, out, p.width, p.n_new, checksum), sid))
                except Exception:
                    pass   # next hop offline; the client recovers via its timeout
        return WireMessage(result)

    def _restore(self, sid: int, p: Restore, ctx: HandlerContext) -> WireMessage:
        s = self._session(sid)
        if s is None:
            return WireMessage(Error("expired", "no such session"))
        if p.t > self.engine.config.max_seq_len:
            return WireMessage(Error("capacity", "history exceeds max_seq_len"))
        s.caches = self.engine.make_caches(s.start, s.end, p.width)
        s.width = p.width
        s.positions = 0
        s.desynced = False
        if p.t > 0:
            n_blocks = s.end - s.start
            ctx.consume(self.cfg.compute.stage_seconds(n_blocks, p.width * p.t, False))
            out = self.engine.run_cached(s.start, s.end, s.caches, p.blob,
                                         p.width, p.t, s.quantized)
            s.positions = p.t
        else:
            out = HiddenBlob.shape_only(0, self.engine.config.hidden_dim)
        s.last_activity = self.net.clock.now
        if not p.want_outputs:
            out = HiddenBlob.shape_only(0, self.engine.config.hidden_dim)
        return WireMessage(StepResult(0, out, p.width, p.t))

    def _reorder(self, sid: int, p: Reorder, ctx: HandlerContext) -> WireMessage:
        s = self._session(sid)
        if s is None:
            return WireMessage(Error("expired", "no such session"))
        if not p.indices or any(i < 1 or i > s.width for i in p.indices):
            return WireMessage(Error("bad_index",
                                     f"indices must be in [1, {s.width}]"))
        self.engine.reorder(s.caches, [i - 1 for i in p.indices])
        s.width = len(p.indices)
        s.last_activity = self.net.clock.now
        return WireMessage(Pong())

    def _forward(self, sid: int, p: Forward, ctx: HandlerContext) -> WireMessage:
        hit = self.replay.get(sid)
        if hit is not None and hit[0] == p.req_id:
            return hit[1]
        rows = p.batch * p.tokens
        n_blocks = self.end - self.start
        ctx.consume(self.cfg.compute.stage_seconds(n_blocks, rows, False))
        record: list | None = [] if p.record else None
        out = self.engine.forward(self.start, self.end, p.blob, p.batch, p.tokens,
                                  MICRO_BATCH_TOKENS, record)
        if p.quantize_reply and not out.synthetic:
            out = HiddenBlob.from_array(out.array(), quantized=True)
        elif p.quantize_reply:
            out = HiddenBlob.shape_only(out.rows, out.cols, quantized=True)
        if p.record:
            self.forward_records[(sid, p.req_id)] = record
            # one outstanding training pass per client session
            for key in [k for k in self.forward_records if k[0] == sid and k[1] != p.req_id]:
                del self.forward_records[key]
        reply = WireMessage(StepResult(0, out, p.batch, p.tokens))
        self.replay[sid] = (p.req_id, reply)
        return reply

    def _backward(self, sid: int, p: Backward, ctx: HandlerContext) -> WireMessage:
        record = self.forward_records.get((sid, p.req_id))
        if record is None:
            return WireMessage(Error("no_record",
                                     "no matching forward; repeat the pass"))
        rows = p.batch * p.tokens
        n_blocks = self.end - self.start
        ctx.consume(2 * self.cfg.compute.stage_seconds(n_blocks, rows, False))
        out = self.engine.backward(self.start, self.end, p.blob, p.batch, p.tokens, record)
        return WireMessage(StepResult(0, out, p.batch, p.tokens))
