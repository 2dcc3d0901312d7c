"""Binary frames and message payloads.

Frame layout (little-endian):

    magic "LRDS" | version u8 | msg_type u8 | session_id u64 | payload_len u32
    | payload | crc32(payload) u32

Reals are IEEE-754 binary64, symmetric matrices travel as their packed lower
triangle, and an absent time index is encoded as 0 (time steps start at 1).
"""
from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from ..errors import ChecksumMismatch, FrameError, TruncatedFrame, UnknownMsgType, UnknownVersion
from ..model import ModelParams
from ..numerics import SymMatrix, packed_size

MAGIC = b"LRDS"
VERSION = 1
HEADER = struct.Struct("<4sBBQI")
CRC = struct.Struct("<I")
MAX_PAYLOAD = 1 << 31

F64 = np.dtype("<f8")
U32 = np.dtype("<u4")


class MsgType(enum.IntEnum):
    PARAM_BROADCAST = 1
    SUMMARY_REPLY = 2
    POSTERIOR_BROADCAST = 3
    EM_REPLY = 4
    SRE_REQUEST = 5
    SRE_STATS_REPLY = 6
    AUGMENTED_REQUEST = 7
    AUGMENTED_SUMMARY_REPLY = 8
    ACK = 9
    ERROR = 10


class RKind(enum.IntEnum):
    DENSE = 0
    SPARSE = 1


class TraceForm(enum.IntEnum):
    MARGINAL = 0
    OMEGA = 1


def params_to_vector(p) -> np.ndarray:
    """Natural-scale parameter row; a bare fine-scale variance (fixed basis)
    travels with NaN in the four Matern/temporal slots."""
    if isinstance(p, ModelParams):
        return p.to_vector()
    return np.array([np.nan, np.nan, np.nan, np.nan, float(p)])


def params_from_vector(v):
    v = np.asarray(v, dtype=np.float64)
    if np.isnan(v[1]):
        return float(v[4])
    return ModelParams.from_vector(v)


# -- byte helpers -------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedFrame(f"payload ends at {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype=F64).astype(np.float64)

    def u32s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype=U32).astype(np.int64)

    def done(self):
        if self.pos != len(self.buf):
            raise FrameError(f"{len(self.buf) - self.pos} trailing payload bytes")


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype=F64).tobytes()


def _u32(a) -> bytes:
    return np.ascontiguousarray(a, dtype=U32).tobytes()


def _time(t: Optional[int]) -> int:
    return 0 if t is None else int(t)


def _untime(t: int) -> Optional[int]:
    return None if t == 0 else t


def _stored(R: SymMatrix) -> np.ndarray:
    """Packed positions a sparse encoding must carry (negative zeros included,
    so that decoding is bit-exact)."""
    return (R.data != 0) | np.signbit(R.data)


def _sparse_triplets(R: SymMatrix):
    rows, cols = np.tril_indices(R.dim)
    nz = np.flatnonzero(_stored(R))
    return rows[nz], cols[nz], R.data[nz]


def dense_r_bytes(r: int) -> int:
    return 8 * packed_size(r)


def sparse_r_bytes(nnz: int) -> int:
    return 4 + 16 * nnz


def _encode_r(R: SymMatrix) -> Tuple[int, bytes]:
    """Packed-dense or (l, m, value) triplets with l >= m, whichever is smaller."""
    nnz = int(np.count_nonzero(_stored(R)))
    if sparse_r_bytes(nnz) < dense_r_bytes(R.dim):
        l, m, v = _sparse_triplets(R)
        trip = np.zeros(nnz, dtype=[("l", U32), ("m", U32), ("v", F64)])
        trip["l"], trip["m"], trip["v"] = l, m, v
        return RKind.SPARSE, struct.pack("<I", nnz) + trip.tobytes()
    return RKind.DENSE, _f64(R.data)


def _decode_r(rd: _Reader, kind: int, r: int) -> SymMatrix:
    if kind == RKind.DENSE:
        return SymMatrix(r, rd.f64s(packed_size(r)))
    if kind != RKind.SPARSE:
        raise FrameError(f"unknown R encoding {kind}")
    (nnz,) = rd.unpack("I")
    trip = np.frombuffer(rd.take(16 * nnz), dtype=[("l", U32), ("m", U32), ("v", F64)])
    R = SymMatrix.zeros(r)
    l = trip["l"].astype(np.int64)
    m = trip["m"].astype(np.int64)
    if np.any(l >= r) or np.any(m > l):
        raise FrameError("sparse R index out of range")
    R.data[l * (l + 1) // 2 + m] = trip["v"]
    return R


# -- messages -----------------------------------------------------------------

@dataclass(eq=False)
class ParamBroadcast:
    """Request for summaries: one row per particle of natural-scale parameters
    (alpha, sigma, smoothness, scale, sigma2_delta; NaN alpha when absent)."""

    round_id: int
    particle_ids: np.ndarray
    params: np.ndarray
    times: List[Optional[int]] = field(default_factory=lambda: [None])
    spec_id: int = 0
    msg_type = MsgType.PARAM_BROADCAST

    def payload(self) -> bytes:
        ids = np.asarray(self.particle_ids, dtype="<u8")
        P = np.asarray(self.params, dtype=np.float64).reshape(len(ids), 5)
        return (struct.pack("<QII", self.round_id, self.spec_id, len(self.times))
                + _u32([_time(t) for t in self.times])
                + struct.pack("<I", len(ids)) + ids.tobytes() + _f64(P))

    @classmethod
    def parse(cls, rd: _Reader):
        round_id, spec_id, nt = rd.unpack("QII")
        times = [_untime(int(t)) for t in rd.u32s(nt)]
        (m,) = rd.unpack("I")
        ids = np.frombuffer(rd.take(8 * m), dtype="<u8").astype(np.int64)
        P = rd.f64s(5 * m).reshape(m, 5)
        return cls(round_id, ids, P, times, spec_id)


@dataclass(eq=False)
class SummaryReply:
    round_id: int
    server_id: int
    particle_id: int
    time_index: Optional[int]
    R: SymMatrix
    gamma: np.ndarray
    a: float
    n: int
    msg_type = MsgType.SUMMARY_REPLY

    def _body(self) -> bytes:
        kind, rbytes = _encode_r(self.R)
        return (struct.pack("<QIQIIBQd", self.round_id, self.server_id, self.particle_id,
                            _time(self.time_index), self.R.dim, kind, self.n, self.a)
                + _f64(self.gamma) + rbytes)

    def payload(self) -> bytes:
        return self._body()

    @classmethod
    def _parse_body(cls, rd: _Reader):
        round_id, sid, pid, t, r, kind, n, a = rd.unpack("QIQIIBQd")
        gamma = rd.f64s(r)
        R = _decode_r(rd, kind, r)
        return round_id, sid, pid, _untime(t), R, gamma, a, n

    @classmethod
    def parse(cls, rd: _Reader):
        return cls(*cls._parse_body(rd))

    @property
    def r_kind(self) -> RKind:
        return _encode_r(self.R)[0]

    def reals(self) -> int:
        """binary64 values carried for (R, gamma)."""
        nnz = int(np.count_nonzero(_stored(self.R)))
        R_reals = nnz if self.r_kind == RKind.SPARSE else packed_size(self.R.dim)
        return R_reals + len(self.gamma)


@dataclass(eq=False)
class AugmentedRequest:
    round_id: int
    params: np.ndarray
    overlap_locs: np.ndarray
    spec_id: int = 0
    msg_type = MsgType.AUGMENTED_REQUEST

    def payload(self) -> bytes:
        locs = np.asarray(self.overlap_locs, dtype=np.float64).reshape(-1, 2)
        return (struct.pack("<QI", self.round_id, self.spec_id) + _f64(self.params)
                + struct.pack("<I", len(locs)) + _f64(locs))

    @classmethod
    def parse(cls, rd: _Reader):
        round_id, spec_id = rd.unpack("QI")
        params = rd.f64s(5)
        (q,) = rd.unpack("I")
        return cls(round_id, params, rd.f64s(2 * q).reshape(q, 2), spec_id)


@dataclass(eq=False)
class AugmentedSummaryReply(SummaryReply):
    """Summary over the augmented basis, plus which overlap locations this
    server observed."""

    q: int = 0
    overlap_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    msg_type = MsgType.AUGMENTED_SUMMARY_REPLY

    def payload(self) -> bytes:
        ids = np.asarray(self.overlap_ids, dtype=np.int64)
        return struct.pack("<II", self.q, len(ids)) + _u32(ids) + self._body()

    @classmethod
    def parse(cls, rd: _Reader):
        q, k = rd.unpack("II")
        ids = rd.u32s(k)
        return cls(*cls._parse_body(rd), q=q, overlap_ids=ids)


@dataclass(eq=False)
class PosteriorBroadcast:
    """Posterior (nu_z, K_z^{-1} packed) for the second EM round."""

    round_id: int
    mean: np.ndarray
    precision: SymMatrix
    fine_scale_var: float
    trace: TraceForm = TraceForm.OMEGA
    spec_id: int = 0
    msg_type = MsgType.POSTERIOR_BROADCAST

    def payload(self) -> bytes:
        return (struct.pack("<QIBdI", self.round_id, self.spec_id, int(self.trace),
                            self.fine_scale_var, len(self.mean))
                + _f64(self.mean) + _f64(self.precision.data))

    @classmethod
    def parse(cls, rd: _Reader):
        round_id, spec_id, trace, s2, r = rd.unpack("QIBdI")
        mean = rd.f64s(r)
        prec = SymMatrix(r, rd.f64s(packed_size(r)))
        return cls(round_id, mean, prec, s2, TraceForm(trace), spec_id)


@dataclass(eq=False)
class EMReply:
    round_id: int
    server_id: int
    scalar: float
    n: int
    msg_type = MsgType.EM_REPLY

    def payload(self) -> bytes:
        return struct.pack("<QIdQ", self.round_id, self.server_id, self.scalar, self.n)

    @classmethod
    def parse(cls, rd: _Reader):
        return cls(*rd.unpack("QIdQ"))


@dataclass(eq=False)
class SRERequest:
    round_id: int
    time_index: Optional[int] = None
    spec_id: int = 0
    msg_type = MsgType.SRE_REQUEST

    def payload(self) -> bytes:
        return struct.pack("<QII", self.round_id, self.spec_id, _time(self.time_index))

    @classmethod
    def parse(cls, rd: _Reader):
        round_id, spec_id, t = rd.unpack("QII")
        return cls(round_id, _untime(t), spec_id)


@dataclass(eq=False)
class SREStatsReply:
    round_id: int
    server_id: int
    time_index: Optional[int]
    BtB: SymMatrix
    Btz: np.ndarray
    ztz: float
    n: int
    noise_var: float = math.nan
    msg_type = MsgType.SRE_STATS_REPLY

    def payload(self) -> bytes:
        return (struct.pack("<QIIIQdd", self.round_id, self.server_id, _time(self.time_index),
                            self.BtB.dim, self.n, self.ztz, self.noise_var)
                + _f64(self.Btz) + _f64(self.BtB.data))

    @classmethod
    def parse(cls, rd: _Reader):
        round_id, sid, t, r, n, ztz, nv = rd.unpack("QIIIQdd")
        Btz = rd.f64s(r)
        BtB = SymMatrix(r, rd.f64s(packed_size(r)))
        return cls(round_id, sid, _untime(t), BtB, Btz, ztz, n, nv)


@dataclass(eq=False)
class Ack:
    round_id: int
    server_id: int
    replies: int = 0
    msg_type = MsgType.ACK

    def payload(self) -> bytes:
        return struct.pack("<QII", self.round_id, self.server_id, self.replies)

    @classmethod
    def parse(cls, rd: _Reader):
        return cls(*rd.unpack("QII"))


@dataclass(eq=False)
class ErrorReply:
    round_id: int
    server_id: int
    code: int
    text: str
    msg_type = MsgType.ERROR

    def payload(self) -> bytes:
        raw = self.text.encode("utf-8")
        return struct.pack("<QIHI", self.round_id, self.server_id, self.code, len(raw)) + raw

    @classmethod
    def parse(cls, rd: _Reader):
        round_id, sid, code, k = rd.unpack("QIHI")
        return cls(round_id, sid, code, bytes(rd.take(k)).decode("utf-8"))


MESSAGES = {
    MsgType.PARAM_BROADCAST: ParamBroadcast,
    MsgType.SUMMARY_REPLY: SummaryReply,
    MsgType.POSTERIOR_BROADCAST: PosteriorBroadcast,
    MsgType.EM_REPLY: EMReply,
    MsgType.SRE_REQUEST: SRERequest,
    MsgType.SRE_STATS_REPLY: SREStatsReply,
    MsgType.AUGMENTED_REQUEST: AugmentedRequest,
    MsgType.AUGMENTED_SUMMARY_REPLY: AugmentedSummaryReply,
    MsgType.ACK: Ack,
    MsgType.ERROR: ErrorReply,
}


# -- frames -------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    msg_type: int
    session_id: int
    payload: bytes
    version: int = VERSION

    @property
    def checksum(self) -> int:
        return zlib.crc32(self.payload)

    def to_bytes(self) -> bytes:
        return (HEADER.pack(MAGIC, self.version, self.msg_type, self.session_id,
                            len(self.payload))
                + self.payload + CRC.pack(self.checksum))


def encode(msg, session_id: int = 0) -> bytes:
    return Frame(int(msg.msg_type), session_id, msg.payload()).to_bytes()


def parse_header(head: bytes) -> Tuple[int, int, int]:
    """Validate the fixed header; returns (msg_type, session_id, payload_len)."""
    if len(head) < HEADER.size:
        raise TruncatedFrame(f"header needs {HEADER.size} bytes, got {len(head)}")
    magic, version, msg_type, session_id, n = HEADER.unpack(head[:HEADER.size])
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnknownVersion(f"frame version {version}")
    if msg_type not in MESSAGES:
        raise UnknownMsgType(f"message type {msg_type}")
    if n > MAX_PAYLOAD:
        raise FrameError(f"payload length {n} exceeds limit")
    return msg_type, session_id, n


def decode_frame(data: bytes) -> Frame:
    msg_type, session_id, n = parse_header(data)
    end = HEADER.size + n + CRC.size
    if len(data) < end:
        raise TruncatedFrame(f"frame needs {end} bytes, got {len(data)}")
    if len(data) > end:
        raise FrameError(f"{len(data) - end} bytes after the frame")
    payload = bytes(data[HEADER.size:HEADER.size + n])
    (crc,) = CRC.unpack(data[HEADER.size + n:end])
    if crc != zlib.crc32(payload):
        raise ChecksumMismatch(f"crc {crc:#010x} != {zlib.crc32(payload):#010x}")
    return Frame(msg_type, session_id, payload)


def decode_payload(msg_type: int, payload: bytes):
    rd = _Reader(payload)
    msg = MESSAGES[MsgType(msg_type)].parse(rd)
    rd.done()
    return msg


def decode(data: bytes):
    f = decode_frame(data)
    return decode_payload(f.msg_type, f.payload)


def read_frame(stream) -> Frame:
    """Read one frame from a binary file-like object; EOFError at a clean end."""
    head = _read_exact(stream, HEADER.size, allow_eof=True)
    msg_type, session_id, n = parse_header(head)
    rest = _read_exact(stream, n + CRC.size)
    return decode_frame(head + rest)


def _read_exact(stream, n: int, allow_eof: bool = False) -> bytes:
    chunks = []
    got = 0
    while got < n:
        b = stream.read(n - got)
        if not b:
            if allow_eof and got == 0:
                raise EOFError("stream closed")
            raise TruncatedFrame(f"stream ended after {got} of {n} bytes")
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


def same_message(a, b) -> bool:
    """Exact equality of two messages, judged by their encodings."""
    return type(a) is type(b) and a.payload() == b.payload()
