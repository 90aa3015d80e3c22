"""Framed byte protocol between the trusted zone and a host-zone process.

Little-endian throughout. Frame = [u32 payload_length][u8 message_type][payload].

Message types:
  0x01 HELLO   {u16 protocol_version, u8 precision (0=F32, 1=F64)}
  0x02 AUTH    {u16 token_length, token bytes}
  0x03 TENSOR  {u8 id_len, id bytes, u8 ndim, u32 dims[ndim], raw scalars row-major}
  0x04 COMPUTE {u8 op_code (0x10 attention-block, 0x11 mlp-block), u32 block_index}
  0x05 RESULT  same layout as TENSOR
  0x06 ERROR   {u16 code, u16 msg_len, utf-8 msg}
  0x07 BYE     empty

Unknown message types are answered with ERROR code 1 and the connection is
closed. Frames above 1 GiB are refused.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ProtocolError
from .numerics import Precision

MSG_HELLO = 0x01
MSG_AUTH = 0x02
MSG_TENSOR = 0x03
MSG_COMPUTE = 0x04
MSG_RESULT = 0x05
MSG_ERROR = 0x06
MSG_BYE = 0x07

OP_ATTENTION = 0x10
OP_MLP = 0x11

PROTOCOL_VERSION = 1
MAX_FRAME = 1 << 30

ERR_UNKNOWN_MESSAGE = 1
ERR_MALFORMED_FRAME = 2
ERR_AUTH = 3
ERR_VERSION = 4
ERR_COMPUTE = 5

_PRECISION_CODE = {Precision.F32: 0, Precision.F64: 1}
_CODE_PRECISION = {0: Precision.F32, 1: Precision.F64}
_WIRE_DTYPE = {Precision.F32: np.dtype("<f4"), Precision.F64: np.dtype("<f8")}


def pack_frame(msg_type: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds the 1 GiB limit")
    return struct.pack("<IB", len(payload), msg_type) + payload


def read_frame(stream) -> tuple:
    """Read one frame from a binary stream; raises ProtocolError on truncation."""
    header = stream.read(5)
    if len(header) == 0:
        raise ProtocolError("connection closed")
    if len(header) < 5:
        raise ProtocolError("truncated frame header")
    length, msg_type = struct.unpack("<IB", header)
    if length > MAX_FRAME:
        raise ProtocolError(f"declared payload of {length} bytes exceeds the 1 GiB limit")
    payload = stream.read(length)
    if len(payload) < length:
        raise ProtocolError(f"truncated frame payload ({len(payload)} of {length} bytes)")
    return msg_type, payload


def encode_hello(precision: Precision) -> bytes:
    return struct.pack("<HB", PROTOCOL_VERSION, _PRECISION_CODE[precision])


def decode_hello(payload: bytes):
    if len(payload) != 3:
        raise ProtocolError("malformed HELLO payload")
    version, code = struct.unpack("<HB", payload)
    if code not in _CODE_PRECISION:
        raise ProtocolError(f"unknown precision code {code}")
    return version, _CODE_PRECISION[code]


def encode_auth(token: bytes) -> bytes:
    if len(token) > 0xFFFF:
        raise ProtocolError("auth token too long")
    return struct.pack("<H", len(token)) + token


def decode_auth(payload: bytes) -> bytes:
    if len(payload) < 2:
        raise ProtocolError("malformed AUTH payload")
    (n,) = struct.unpack_from("<H", payload)
    if len(payload) != 2 + n:
        raise ProtocolError("AUTH length mismatch")
    return payload[2:]


def encode_tensor(tensor_id: str, arr: np.ndarray, precision: Precision) -> bytes:
    ident = tensor_id.encode("ascii")
    if len(ident) > 0xFF:
        raise ProtocolError("tensor id too long")
    if arr.ndim > 0xFF:
        raise ProtocolError("too many dimensions")
    head = struct.pack("<B", len(ident)) + ident + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    body = np.ascontiguousarray(arr).astype(_WIRE_DTYPE[precision], copy=False).tobytes()
    return head + body


def decode_tensor(payload: bytes, precision: Precision):
    try:
        (id_len,) = struct.unpack_from("<B", payload, 0)
        ident = payload[1 : 1 + id_len].decode("ascii")
        off = 1 + id_len
        (ndim,) = struct.unpack_from("<B", payload, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
    except (struct.error, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed TENSOR payload: {exc}") from exc
    dtype = _WIRE_DTYPE[precision]
    count = 1
    for d in dims:
        count *= d
    if len(payload) - off != count * dtype.itemsize:
        raise ProtocolError("TENSOR payload size does not match its dims")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(dims)
    # frombuffer views are read-only; the zones need owned, writable storage
    return ident, arr.astype(precision.dtype, copy=True)


def encode_compute(op_code: int, block_index: int) -> bytes:
    return struct.pack("<BI", op_code, block_index)


def decode_compute(payload: bytes):
    if len(payload) != 5:
        raise ProtocolError("malformed COMPUTE payload")
    return struct.unpack("<BI", payload)


def encode_error(code: int, message: str) -> bytes:
    msg = message.encode("utf-8")[:0xFFFF]
    return struct.pack("<HH", code, len(msg)) + msg


def decode_error(payload: bytes):
    if len(payload) < 4:
        raise ProtocolError("malformed ERROR payload")
    code, msg_len = struct.unpack_from("<HH", payload)
    if len(payload) != 4 + msg_len:
        raise ProtocolError("ERROR length mismatch")
    return code, payload[4:].decode("utf-8", errors="replace")
