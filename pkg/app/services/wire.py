"""
Binary wire format for the weight exchange.

Every message is a 28-byte little-endian header followed by the payload:

    magic        4s   b"FLML"
    version      u8   1
    msg_type     u8   1=JOIN 2=GLOBAL_MODEL 3=LOCAL_UPDATE 4=EVAL_REPORT 5=SHUTDOWN 6=ERROR
    dtype        u8   1=float32 2=float64
    reserved     u8   0
    round        u32
    sample_count u64  n_k, 0 where meaningless
    payload_len  u64

Model payloads are the flat parameter vector, little-endian, at the frame's
element width. No compression.
"""

import struct
from enum import IntEnum
from typing import NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, computed_field

from core.arch import ArchDescriptor
from core.errors import NonFiniteError, ProtocolError
from core.models import DType, FedConfig, ModelParams

MAGIC = b"FLML"
VERSION = 1
HEADER = struct.Struct("<4sBBBBIQQ")
HEADER_SIZE = HEADER.size  # 28

_JOIN = struct.Struct("<II")
_EVAL_REPORT = struct.Struct("<dd")

JOIN_PAYLOAD_SIZE = _JOIN.size  # 8
EVAL_REPORT_PAYLOAD_SIZE = _EVAL_REPORT.size  # 16

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


class MsgType(IntEnum):
    JOIN = 1
    GLOBAL_MODEL = 2
    LOCAL_UPDATE = 3
    EVAL_REPORT = 4
    SHUTDOWN = 5
    ERROR = 6

    @property
    def is_control(self) -> bool:
        """Session frames, metered under round 0."""
        return self in (MsgType.JOIN, MsgType.SHUTDOWN, MsgType.ERROR)


class FrameHeader(NamedTuple):
    msg_type: MsgType
    dtype: DType
    round: int
    sample_count: int
    payload_len: int


class Frame(BaseModel):
    """One wire message."""

    model_config = ConfigDict(frozen=True)

    msg_type: MsgType
    dtype: DType = DType.FLOAT32
    round: int = Field(default=0, ge=0, le=U32_MAX)
    sample_count: int = Field(default=0, ge=0, le=U64_MAX)
    payload: bytes = b""

    @computed_field
    @property
    def size(self) -> int:
        """Bytes on the wire, header included."""
        return HEADER_SIZE + len(self.payload)

    @property
    def meter_round(self) -> int:
        return 0 if self.msg_type.is_control else self.round

    def encode(self) -> bytes:
        header = HEADER.pack(
            MAGIC,
            VERSION,
            int(self.msg_type),
            self.dtype.wire_code,
            0,
            self.round,
            self.sample_count,
            len(self.payload),
        )
        return header + self.payload

    @classmethod
    def decode(cls, data: bytes) -> "Frame":
        """Decode one complete frame; trailing or missing bytes are a protocol error."""
        header = decode_header(data[:HEADER_SIZE])
        payload = bytes(data[HEADER_SIZE:])
        if len(payload) != header.payload_len:
            raise ProtocolError(
                f"payload length mismatch: header says {header.payload_len}, got {len(payload)}"
            )
        return cls.from_header(header, payload)

    @classmethod
    def from_header(cls, header: FrameHeader, payload: bytes) -> "Frame":
        return cls(
            msg_type=header.msg_type,
            dtype=header.dtype,
            round=header.round,
            sample_count=header.sample_count,
            payload=payload,
        )

    def __str__(self) -> str:
        return f"{self.msg_type.name}(round={self.round}, n={self.sample_count}, {len(self.payload)}B)"


def decode_header(data: bytes) -> FrameHeader:
    """
    Validate and unpack a 28-byte header.

    Raises:
        ProtocolError: short header, bad magic or version, unknown message
            type or dtype code, nonzero reserved byte.
    """
    if len(data) != HEADER_SIZE:
        raise ProtocolError(f"short header: {len(data)} of {HEADER_SIZE} bytes")
    magic, version, msg_type, dtype, reserved, round_, sample_count, payload_len = HEADER.unpack(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        kind = MsgType(msg_type)
    except ValueError as e:
        raise ProtocolError(f"unknown message type {msg_type}") from e
    try:
        dt = DType.from_wire(dtype)
    except ValueError as e:
        raise ProtocolError(f"unknown dtype code {dtype}") from e
    if reserved != 0:
        raise ProtocolError(f"reserved byte must be 0, got {reserved}")
    return FrameHeader(kind, dt, round_, sample_count, payload_len)


def serialize_params(w: ModelParams, dtype: Optional[DType] = None) -> bytes:
    """Canonical-order little-endian values at `dtype` (default: the params' own)."""
    dtype = dtype or w.dtype
    values = w.values.astype(dtype.numpy_dtype, copy=False)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"{w.arch_name}: values overflow {dtype.value}")
    return values.tobytes()


def deserialize_params(
    payload: bytes,
    dtype: DType,
    arch_name: str,
    expected_count: Optional[int] = None,
) -> ModelParams:
    """Inverse of serialize_params; checks the element count when one is expected."""
    if len(payload) % dtype.width:
        raise ProtocolError(f"{len(payload)}-byte payload is not a multiple of {dtype.width}")
    count = len(payload) // dtype.width
    if expected_count is not None and count != expected_count:
        raise ProtocolError(f"{arch_name} expects {expected_count} values, payload has {count}")
    values = np.frombuffer(payload, dtype=dtype.numpy_dtype).copy()
    try:
        return ModelParams(arch_name=arch_name, dtype=dtype, values=values)
    except ValidationError as e:
        raise ProtocolError(f"invalid parameter payload: {e.errors()[0]['msg']}") from e


def model_frame(msg_type: MsgType, round_: int, w: ModelParams, dtype: DType, sample_count: int = 0) -> Frame:
    return Frame(
        msg_type=msg_type,
        dtype=dtype,
        round=round_,
        sample_count=sample_count,
        payload=serialize_params(w, dtype),
    )


def join_frame(rank: int, world_size: int, n_k: int) -> Frame:
    return Frame(msg_type=MsgType.JOIN, sample_count=n_k, payload=_JOIN.pack(rank, world_size))


def parse_join(frame: Frame) -> Tuple[int, int, int]:
    """(rank, world_size, n_k)."""
    _expect(frame, MsgType.JOIN, JOIN_PAYLOAD_SIZE)
    rank, world_size = _JOIN.unpack(frame.payload)
    return rank, world_size, frame.sample_count


def eval_report_frame(round_: int, loss: float, wall_time_s: float, n_k: int) -> Frame:
    return Frame(
        msg_type=MsgType.EVAL_REPORT,
        dtype=DType.FLOAT64,
        round=round_,
        sample_count=n_k,
        payload=_EVAL_REPORT.pack(loss, wall_time_s),
    )


def parse_eval_report(frame: Frame) -> Tuple[float, float]:
    """(local_loss, wall_time_s)."""
    _expect(frame, MsgType.EVAL_REPORT, EVAL_REPORT_PAYLOAD_SIZE)
    return _EVAL_REPORT.unpack(frame.payload)


def shutdown_frame() -> Frame:
    return Frame(msg_type=MsgType.SHUTDOWN)


def error_frame(reason: str) -> Frame:
    return Frame(msg_type=MsgType.ERROR, payload=reason.encode("utf-8"))


def parse_error(frame: Frame) -> str:
    _expect(frame, MsgType.ERROR)
    return frame.payload.decode("utf-8", errors="replace")


def _expect(frame: Frame, msg_type: MsgType, payload_size: Optional[int] = None) -> None:
    if frame.msg_type != msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got {frame.msg_type.name}")
    if payload_size is not None and len(frame.payload) != payload_size:
        raise ProtocolError(f"{msg_type.name} payload must be {payload_size} bytes, got {len(frame.payload)}")


def model_frame_size(arch: ArchDescriptor, dtype: DType) -> int:
    return HEADER_SIZE + arch.transmitted_count * dtype.width


def round_traffic(arch: ArchDescriptor, cfg: FedConfig, include_control: bool = False) -> int:
    """
    Predicted bytes for one round: m * 2 * (28 + P * w), plus one
    EVAL_REPORT per sampled client when control frames are included.
    """
    m = cfg.clients_per_round
    total = m * 2 * model_frame_size(arch, cfg.wire_dtype)
    if include_control:
        total += m * (HEADER_SIZE + EVAL_REPORT_PAYLOAD_SIZE)
    return total


def run_traffic(arch: ArchDescriptor, cfg: FedConfig) -> int:
    """Whole-run prediction: K JOINs, T rounds with control frames, K SHUTDOWNs."""
    joins = cfg.num_clients * (HEADER_SIZE + JOIN_PAYLOAD_SIZE)
    shutdowns = cfg.num_clients * HEADER_SIZE
    return joins + cfg.rounds * round_traffic(arch, cfg, include_control=True) + shutdowns


__all__ = [
    "MAGIC",
    "VERSION",
    "HEADER_SIZE",
    "MsgType",
    "Frame",
    "FrameHeader",
    "decode_header",
    "serialize_params",
    "deserialize_params",
    "model_frame",
    "join_frame",
    "parse_join",
    "eval_report_frame",
    "parse_eval_report",
    "shutdown_frame",
    "error_frame",
    "parse_error",
    "round_traffic",
    "run_traffic",
]
