"""Worker request handling, carriers, and the coordinator-side session.

A round is: the coordinator sends one request frame to every worker at once,
each worker streams back its replies followed by an Ack, and the coordinator
waits for all of them before it uses any. Replies are matched by ids, so
their arrival order does not matter.
"""
from __future__ import annotations

import logging
import os
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ..errors import (
    CapExceeded,
    ConnectionLost,
    FrameError,
    LRDSError,
    NumericalError,
    SpecError,
    Timeout,
    TransportError,
    TruncatedFrame,
    UsageError,
    WorkerFailure,
)
from ..model import BasisSpec, GaussianState
from ..worker import (
    OVERLAP_CAP,
    EMContribution,
    ServerData,
    SREStats,
    Summary,
    compute_augmented_summary,
    compute_em_contribution,
    compute_sre_stats,
    overlap_index,
    summarize,
)
from . import wire
from .wire import (
    Ack,
    AugmentedRequest,
    AugmentedSummaryReply,
    EMReply,
    ErrorReply,
    ParamBroadcast,
    PosteriorBroadcast,
    SRERequest,
    SREStatsReply,
    SummaryReply,
    TraceForm,
)

log = logging.getLogger(__name__)

DEFAULT_PORT = 7650
DEFAULT_TIMEOUT = 300.0

ERR_USAGE, ERR_NUMERICAL, ERR_TRANSPORT, ERR_INTERNAL = 1, 2, 3, 99


def default_port() -> int:
    return int(os.environ.get("LRDS_PORT", DEFAULT_PORT))


def _error_code(exc: Exception) -> int:
    if isinstance(exc, UsageError):
        return ERR_USAGE
    if isinstance(exc, NumericalError):
        return ERR_NUMERICAL
    if isinstance(exc, TransportError):
        return ERR_TRANSPORT
    return ERR_INTERNAL


# -- worker side --------------------------------------------------------------

class WorkerNode:
    """Answers coordinator requests from one server's data."""

    def __init__(self, data: ServerData, specs: Mapping[int, BasisSpec]):
        self.data = data
        self.specs = dict(specs)

    @property
    def server_id(self) -> int:
        return self.data.server_id

    def _spec(self, spec_id: int) -> BasisSpec:
        if spec_id not in self.specs:
            raise SpecError(f"unknown basis spec id {spec_id}")
        return self.specs[spec_id]

    def handle(self, msg) -> list:
        """Replies to one request, always ending with Ack or Error."""
        rid = getattr(msg, "round_id", 0)
        try:
            replies = self._dispatch(msg)
        except Exception as exc:  # reported to the coordinator, which aborts
            log.warning("server %d failed round %d: %s", self.server_id, rid, exc)
            return [ErrorReply(rid, self.server_id, _error_code(exc), f"{type(exc).__name__}: {exc}")]
        return replies + [Ack(rid, self.server_id, len(replies))]

    def _dispatch(self, msg) -> list:
        sid = self.server_id
        if isinstance(msg, ParamBroadcast):
            spec = self._spec(msg.spec_id)
            out = []
            for pid, row in zip(msg.particle_ids, msg.params):
                p = wire.params_from_vector(row)
                for t in msg.times:
                    s = summarize(self.data.shard(t), spec, p)
                    out.append(SummaryReply(msg.round_id, sid, int(pid), t, s.R, s.gamma,
                                            s.a, s.n))
            return out
        if isinstance(msg, PosteriorBroadcast):
            spec = self._spec(msg.spec_id)
            post = GaussianState.from_precision(msg.mean, msg.precision)
            trace = "omega" if msg.trace == TraceForm.OMEGA else "marginal"
            c = compute_em_contribution(self.data.shard(), spec, msg.fine_scale_var, post, trace)
            return [EMReply(msg.round_id, sid, c.scalar, c.n)]
        if isinstance(msg, SRERequest):
            st = compute_sre_stats(self.data.shard(msg.time_index), self._spec(msg.spec_id))
            return [SREStatsReply(msg.round_id, sid, st.time_index, st.BtB, st.Btz, st.ztz,
                                  st.n, st.noise_var)]
        if isinstance(msg, AugmentedRequest):
            spec = self._spec(msg.spec_id)
            p = wire.params_from_vector(msg.params)
            shard = self.data.shard()
            s = compute_augmented_summary(shard, spec, p, msg.overlap_locs)
            q = len(msg.overlap_locs)
            hit = overlap_index(shard, msg.overlap_locs) if q else np.zeros(0, dtype=int)
            ids = np.unique(hit[hit >= 0])
            return [AugmentedSummaryReply(msg.round_id, sid, 0, None, s.R, s.gamma, s.a, s.n,
                                          q=q, overlap_ids=ids)]
        raise SpecError(f"workers do not accept {type(msg).__name__}")

    def handle_frame(self, frame: wire.Frame) -> List[bytes]:
        try:
            msg = wire.decode_payload(frame.msg_type, frame.payload)
        except FrameError as exc:
            return [wire.encode(ErrorReply(0, self.server_id, ERR_TRANSPORT, str(exc)),
                                frame.session_id)]
        return [wire.encode(r, frame.session_id) for r in self.handle(msg)]


class WorkerServer:
    """Serves one WorkerNode over TCP, one coordinator connection at a time."""

    def __init__(self, node: WorkerNode, host: str = "127.0.0.1", port: Optional[int] = None,
                 max_connections: Optional[int] = None):
        self.node = node
        self.max_connections = max_connections
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._sock = socket.create_server((host, default_port() if port is None else port))
        self._sock.settimeout(0.2)

    @property
    def address(self) -> Tuple[str, int]:
        return self._sock.getsockname()[:2]

    def serve_forever(self):
        served = 0
        try:
            while not self._stop.is_set():
                if self.max_connections is not None and served >= self.max_connections:
                    break
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
                served += 1
                with conn:
                    self._serve_connection(conn)
        finally:
            self._sock.close()

    def _serve_connection(self, conn: socket.socket):
        conn.settimeout(None)
        rfile = conn.makefile("rb")
        try:
            while not self._stop.is_set():
                try:
                    frame = wire.read_frame(rfile)
                except EOFError:
                    return
                except FrameError as exc:
                    log.warning("dropping connection after a bad frame: %s", exc)
                    return
                for out in self.node.handle_frame(frame):
                    conn.sendall(out)
        except OSError as exc:
            log.warning("connection lost: %s", exc)
        finally:
            rfile.close()

    def start(self) -> "WorkerServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


# -- carriers -----------------------------------------------------------------

class InProcessChannel:
    """Frames handed directly to a WorkerNode in this process."""

    def __init__(self, node: WorkerNode):
        self.node = node
        self.server_id = node.server_id

    def open(self):
        pass

    def close(self):
        pass

    def exchange(self, frame: bytes, deadline: float) -> List[bytes]:
        return self.node.handle_frame(wire.decode_frame(frame))


class SocketChannel:
    """Length-prefixed frames over a TCP connection to a WorkerServer."""

    def __init__(self, server_id: int, host: str, port: Optional[int] = None,
                 connect_timeout: float = 10.0):
        self.server_id = server_id
        self.host = host
        self.port = default_port() if port is None else port
        self.connect_timeout = connect_timeout
        self._sock: Optional[socket.socket] = None
        self._rfile = None

    def open(self):
        try:
            self._sock = socket.create_connection((self.host, self.port), self.connect_timeout)
        except OSError as exc:
            raise ConnectionLost(self.server_id, f"cannot reach {self.host}:{self.port}: {exc}")
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")

    def close(self):
        if self._sock is not None:
            self._rfile.close()
            self._sock.close()
            self._sock = None

    def exchange(self, frame: bytes, deadline: float) -> List[bytes]:
        if self._sock is None:
            raise ConnectionLost(self.server_id, "not connected")
        out = []
        try:
            self._sock.settimeout(max(deadline - time.monotonic(), 1e-3))
            self._sock.sendall(frame)
            while True:
                self._sock.settimeout(max(deadline - time.monotonic(), 1e-3))
                f = wire.read_frame(self._rfile)
                out.append(f.to_bytes())
                if f.msg_type in (wire.MsgType.ACK, wire.MsgType.ERROR):
                    return out
        except socket.timeout:
            raise Timeout(self.server_id, round(deadline - time.monotonic(), 3))
        except (EOFError, TruncatedFrame, OSError) as exc:
            raise ConnectionLost(self.server_id, str(exc) or type(exc).__name__)


def parse_endpoint(text: str) -> Tuple[str, Optional[int]]:
    host, _, port = text.strip().rpartition(":")
    if not host:
        return port, None
    return host, int(port)


# -- coordinator side ---------------------------------------------------------

class Session:
    """Coordinator end of a star of workers; usable wherever a SummarySource is.

    ``bytes_received[j]`` counts every reply byte from worker j in the last
    round and ``total_bytes_received[j]`` over the session.
    """

    def __init__(self, channels: Sequence, spec: BasisSpec, spec_id: int = 0,
                 timeout: float = DEFAULT_TIMEOUT, session_id: int = 1):
        self.channels = sorted(channels, key=lambda c: c.server_id)
        ids = [c.server_id for c in self.channels]
        if len(set(ids)) != len(ids):
            raise SpecError("worker server ids must be distinct")
        self.spec = spec
        self.spec_id = spec_id
        self.timeout = timeout
        self.session_id = session_id
        self.round_id = 0
        self.bytes_received: Dict[int, int] = {}
        self.total_bytes_received: Dict[int, int] = {j: 0 for j in ids}
        self.reply_bytes: Dict[int, List[int]] = {}
        self._pool = ThreadPoolExecutor(max_workers=max(1, len(ids)))
        self._open = False

    @classmethod
    def in_process(cls, servers: Sequence[ServerData], spec: BasisSpec, **kw) -> "Session":
        return cls([InProcessChannel(WorkerNode(s, {0: spec})) for s in servers], spec, **kw)

    @property
    def server_ids(self) -> List[int]:
        return [c.server_id for c in self.channels]

    def __enter__(self):
        self.open()
        return self

    def __exit__(self, *exc):
        self.close()

    def open(self):
        if not self._open:
            for c in self.channels:
                c.open()
            self._open = True

    def close(self):
        for c in self.channels:
            c.close()
        self._pool.shutdown(wait=True)
        self._open = False

    def _round(self, make) -> Dict[int, list]:
        """Send ``make(round_id)`` to all workers and wait for every reply."""
        self.open()
        self.round_id += 1
        rid = self.round_id
        frame = wire.encode(make(rid), self.session_id)
        deadline = time.monotonic() + self.timeout
        futures = {c.server_id: self._pool.submit(c.exchange, frame, deadline)
                   for c in self.channels}
        raw: Dict[int, List[bytes]] = {}
        failure = None
        for j, fut in futures.items():
            try:
                raw[j] = fut.result()
            except WorkerFailure as exc:
                failure = failure or exc
            except LRDSError as exc:
                failure = failure or WorkerFailure(j, str(exc))
        if failure is not None:
            raise failure
        out: Dict[int, list] = {}
        self.bytes_received = {}
        self.reply_bytes = {}
        for j, frames in raw.items():
            self.bytes_received[j] = sum(len(b) for b in frames)
            self.total_bytes_received[j] += self.bytes_received[j]
            self.reply_bytes[j] = [len(b) for b in frames[:-1]]
            msgs = []
            for b in frames:
                f = wire.decode_frame(b)
                if f.session_id != self.session_id:
                    raise WorkerFailure(j, f"reply for session {f.session_id}")
                msgs.append(wire.decode_payload(f.msg_type, f.payload))
            last = msgs[-1]
            if isinstance(last, ErrorReply):
                raise WorkerFailure(j, f"error {last.code}: {last.text}")
            if not isinstance(last, Ack) or last.replies != len(msgs) - 1:
                raise WorkerFailure(j, "reply stream did not end with a matching Ack")
            for m in msgs:
                if m.round_id != rid:
                    raise WorkerFailure(j, f"reply for round {m.round_id}, expected {rid}")
                if m.server_id != j:
                    raise WorkerFailure(j, f"reply claims server {m.server_id}")
            out[j] = msgs[:-1]
        return out

    def summaries(self, params_list, times=(None,)):
        times = list(times)
        M = len(params_list)
        if M == 0:
            return []
        P = np.array([wire.params_to_vector(p) for p in params_list])
        replies = self._round(lambda rid: ParamBroadcast(rid, np.arange(M), P, times,
                                                         self.spec_id))
        table = [{t: [] for t in times} for _ in range(M)]
        for j in self.server_ids:
            got = {}
            for m in replies[j]:
                if not isinstance(m, SummaryReply):
                    raise WorkerFailure(j, f"unexpected {type(m).__name__}")
                got[(m.particle_id, m.time_index)] = m
            for pid in range(M):
                for t in times:
                    m = got.get((pid, t))
                    if m is None:
                        raise WorkerFailure(j, f"no summary for particle {pid}, time {t}")
                    table[pid][t].append(Summary(j, m.R, m.gamma, m.a, m.n, t))
        return table

    def em_contributions(self, posterior, fine_scale_var, trace="omega"):
        form = TraceForm.OMEGA if trace == "omega" else TraceForm.MARGINAL
        if trace not in ("omega", "marginal"):
            raise ValueError(f"unknown trace form {trace!r}")
        replies = self._round(lambda rid: PosteriorBroadcast(
            rid, posterior.mean, posterior.precision, float(fine_scale_var), form, self.spec_id))
        out = []
        for j in self.server_ids:
            (m,) = replies[j]
            out.append(EMContribution(m.scalar, m.n, j))
        return out

    def sre_stats(self, time_index=None):
        replies = self._round(lambda rid: SRERequest(rid, time_index, self.spec_id))
        out = []
        for j in self.server_ids:
            (m,) = replies[j]
            out.append(SREStats(m.BtB, m.Btz, m.ztz, m.n, j, m.time_index, m.noise_var))
        return out

    def augmented_summaries(self, params, overlap_locs, cap=OVERLAP_CAP):
        locs = np.asarray(overlap_locs, dtype=np.float64).reshape(-1, 2)
        if len(locs) > cap:
            raise CapExceeded(f"{len(locs)} overlap locations exceed the cap of {cap}")
        replies = self._round(lambda rid: AugmentedRequest(rid, wire.params_to_vector(params), locs,
                                                           self.spec_id))
        out = []
        for j in self.server_ids:
            (m,) = replies[j]
            out.append(Summary(j, m.R, m.gamma, m.a, m.n))
        return out
