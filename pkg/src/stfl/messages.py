"""Typed protocol messages and their binary framing.

Frame layout (all header integers big-endian)::

    version  u8
    sender   u16
    type     u8
    sequence u32
    length   u32   payload byte count
    payload  ...

Payload encodings:

* matrix: ``rows u32le, cols u32le`` followed by little-endian float64 data
* ID list: ``count u32le`` then per ID ``len u32le`` + UTF-8 bytes
* big-integer array: ``rows u32le, cols u32le, scale u32le, width u32le,
  bound (length-prefixed big-endian)`` then ``rows*cols`` fixed-width
  big-endian integers
"""

from __future__ import annotations

import enum
import io
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Type, Union

import numpy as np

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">BHBII")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 1 << 30

HOST_ID = 0


class ProtocolError(RuntimeError):
    """Malformed, unexpected or out-of-order message."""


class MessageType(enum.IntEnum):
    ACK = 0x01
    ABORT = 0x02
    SHUTDOWN = 0x03
    SCHEMA_REQUEST = 0x10
    SCHEMA = 0x11
    PSI_BLINDED = 0x12
    PSI_DOUBLE_BLINDED = 0x13
    PSI_REQUEST = 0x14
    INTERSECTION = 0x15
    LATENT_REQUEST = 0x20
    LATENT_BATCH = 0x21
    PREDICTIONS = 0x22
    PUBLIC_KEY = 0x30
    ENC_ACTIVATIONS = 0x31
    ENC_MASKED_LOGITS = 0x32
    MASKED_LOGITS = 0x33
    ENC_MASKED_WEIGHT_GRAD = 0x34
    MASKED_WEIGHT_GRAD = 0x35
    ENC_ACTIVATION_GRAD = 0x36


# Everything the self-taught protocol may put on the wire. No gradient and no
# raw-feature payload type appears here.
STFL_MESSAGE_TYPES = frozenset({
    MessageType.ACK,
    MessageType.ABORT,
    MessageType.SHUTDOWN,
    MessageType.SCHEMA_REQUEST,
    MessageType.SCHEMA,
    MessageType.PSI_BLINDED,
    MessageType.PSI_DOUBLE_BLINDED,
    MessageType.PSI_REQUEST,
    MessageType.INTERSECTION,
    MessageType.LATENT_REQUEST,
    MessageType.LATENT_BATCH,
    MessageType.PREDICTIONS,
})

GRADIENT_MESSAGE_TYPES = frozenset({
    MessageType.ENC_MASKED_WEIGHT_GRAD,
    MessageType.MASKED_WEIGHT_GRAD,
    MessageType.ENC_ACTIVATION_GRAD,
})


# -- payloads -------------------------------------------------------------------

@dataclass
class Control:
    code: int = 0
    text: str = ""


@dataclass
class IdList:
    ids: List[str]


@dataclass
class Schema:
    feature_names: List[str]
    latent_width: int


@dataclass
class BlindedIds:
    elements: List[int]
    width: int


@dataclass
class RowBatch:
    """Matrix whose rows belong to ``ids`` in order."""

    ids: List[str]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.ids):
            raise ProtocolError(f"{len(self.ids)} ids for a matrix of shape {self.matrix.shape}")


@dataclass
class Matrix:
    matrix: np.ndarray


@dataclass
class CipherBatch:
    """Encrypted matrix on the wire: raw ciphertext integers plus scale and bound."""

    values: np.ndarray  # object array of ints
    scale: int
    bound: int
    width: int


@dataclass
class MaskedGradient:
    gradient: np.ndarray
    encrypted_noise: CipherBatch


@dataclass
class Text:
    text: str


Payload = Union[Control, IdList, Schema, BlindedIds, RowBatch, Matrix, CipherBatch, MaskedGradient, Text]

PAYLOAD_OF: Dict[MessageType, Type] = {
    MessageType.ACK: Control,
    MessageType.ABORT: Control,
    MessageType.SHUTDOWN: Control,
    MessageType.SCHEMA_REQUEST: Control,
    MessageType.SCHEMA: Schema,
    MessageType.PSI_BLINDED: BlindedIds,
    MessageType.PSI_DOUBLE_BLINDED: BlindedIds,
    MessageType.PSI_REQUEST: Control,
    MessageType.INTERSECTION: IdList,
    MessageType.LATENT_REQUEST: IdList,
    MessageType.LATENT_BATCH: RowBatch,
    MessageType.PREDICTIONS: RowBatch,
    MessageType.PUBLIC_KEY: Text,
    MessageType.ENC_ACTIVATIONS: CipherBatch,
    MessageType.ENC_MASKED_LOGITS: CipherBatch,
    MessageType.MASKED_LOGITS: Matrix,
    MessageType.ENC_MASKED_WEIGHT_GRAD: CipherBatch,
    MessageType.MASKED_WEIGHT_GRAD: MaskedGradient,
    MessageType.ENC_ACTIVATION_GRAD: CipherBatch,
}


@dataclass
class ProtocolMessage:
    sender: int
    type: MessageType
    payload: Payload
    seq: int = 0
    version: int = PROTOCOL_VERSION

    def __post_init__(self) -> None:
        self.type = MessageType(self.type)
        expected = PAYLOAD_OF[self.type]
        if not isinstance(self.payload, expected):
            raise ProtocolError(
                f"{self.type.name} carries {expected.__name__}, got {type(self.payload).__name__}"
            )

    def encode(self) -> bytes:
        body = encode_payload(self.payload)
        if len(body) > MAX_PAYLOAD:
            raise ProtocolError("payload too large")
        return HEADER.pack(self.version, self.sender, int(self.type), self.seq, len(body)) + body

    @classmethod
    def decode(cls, frame: bytes) -> "ProtocolMessage":
        if len(frame) < HEADER_SIZE:
            raise ProtocolError("truncated header")
        version, sender, mtype, seq, length = HEADER.unpack_from(frame)
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"unsupported protocol version {version}")
        try:
            mtype = MessageType(mtype)
        except ValueError:
            raise ProtocolError(f"unknown message type 0x{mtype:02x}") from None
        body = frame[HEADER_SIZE:]
        if len(body) != length:
            raise ProtocolError(f"payload length {len(body)} != declared {length}")
        payload = decode_payload(PAYLOAD_OF[mtype], body)
        return cls(sender, mtype, payload, seq, version)


def parse_header(header: bytes) -> Tuple[int, int, int, int, int]:
    version, sender, mtype, seq, length = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {length} bytes is too large")
    return version, sender, mtype, seq, length


# -- primitive codecs -------------------------------------------------------------

def _put_u32(buf: io.BytesIO, v: int) -> None:
    buf.write(struct.pack("<I", v))


def _get_u32(buf: io.BytesIO) -> int:
    raw = buf.read(4)
    if len(raw) != 4:
        raise ProtocolError("truncated payload")
    return struct.unpack("<I", raw)[0]


def _get(buf: io.BytesIO, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise ProtocolError("truncated payload")
    return raw


def _put_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    _put_u32(buf, len(raw))
    buf.write(raw)


def _get_str(buf: io.BytesIO) -> str:
    return _get(buf, _get_u32(buf)).decode("utf-8")


def _put_ids(buf: io.BytesIO, ids: Sequence[str]) -> None:
    _put_u32(buf, len(ids))
    for s in ids:
        _put_str(buf, s)


def _get_ids(buf: io.BytesIO) -> List[str]:
    return [_get_str(buf) for _ in range(_get_u32(buf))]


def _put_matrix(buf: io.BytesIO, m: np.ndarray) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ProtocolError("only 2-D matrices can be sent")
    _put_u32(buf, m.shape[0])
    _put_u32(buf, m.shape[1])
    buf.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def _get_matrix(buf: io.BytesIO) -> np.ndarray:
    rows, cols = _get_u32(buf), _get_u32(buf)
    data = _get(buf, 8 * rows * cols)
    return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)


def _put_bigint(buf: io.BytesIO, v: int) -> None:
    raw = int(v).to_bytes((int(v).bit_length() + 7) // 8 or 1, "big")
    _put_u32(buf, len(raw))
    buf.write(raw)


def _get_bigint(buf: io.BytesIO) -> int:
    return int.from_bytes(_get(buf, _get_u32(buf)), "big")


def _put_cipher(buf: io.BytesIO, c: CipherBatch) -> None:
    rows, cols = c.values.shape
    for v in (rows, cols, c.scale, c.width):
        _put_u32(buf, v)
    _put_bigint(buf, c.bound)
    for v in c.values.ravel():
        buf.write(int(v).to_bytes(c.width, "big"))


def _get_cipher(buf: io.BytesIO) -> CipherBatch:
    rows, cols, scale, width = (_get_u32(buf) for _ in range(4))
    bound = _get_bigint(buf)
    raw = _get(buf, rows * cols * width)
    vals = np.empty((rows, cols), dtype=object)
    for k, idx in enumerate(np.ndindex(rows, cols)):
        vals[idx] = int.from_bytes(raw[k * width:(k + 1) * width], "big")
    return CipherBatch(vals, scale, bound, width)


def encode_payload(p: Payload) -> bytes:
    buf = io.BytesIO()
    if isinstance(p, Control):
        _put_u32(buf, p.code)
        _put_str(buf, p.text)
    elif isinstance(p, IdList):
        _put_ids(buf, p.ids)
    elif isinstance(p, Schema):
        _put_ids(buf, p.feature_names)
        _put_u32(buf, p.latent_width)
    elif isinstance(p, BlindedIds):
        _put_u32(buf, len(p.elements))
        _put_u32(buf, p.width)
        for e in p.elements:
            buf.write(int(e).to_bytes(p.width, "big"))
    elif isinstance(p, RowBatch):
        _put_ids(buf, p.ids)
        _put_matrix(buf, p.matrix)
    elif isinstance(p, Matrix):
        _put_matrix(buf, p.matrix)
    elif isinstance(p, CipherBatch):
        _put_cipher(buf, p)
    elif isinstance(p, MaskedGradient):
        _put_matrix(buf, p.gradient)
        _put_cipher(buf, p.encrypted_noise)
    elif isinstance(p, Text):
        _put_str(buf, p.text)
    else:
        raise ProtocolError(f"cannot encode payload {type(p).__name__}")
    return buf.getvalue()


def decode_payload(kind: Type, body: bytes) -> Payload:
    buf = io.BytesIO(body)
    if kind is Control:
        out: Payload = Control(_get_u32(buf), _get_str(buf))
    elif kind is IdList:
        out = IdList(_get_ids(buf))
    elif kind is Schema:
        out = Schema(_get_ids(buf), _get_u32(buf))
    elif kind is BlindedIds:
        count, width = _get_u32(buf), _get_u32(buf)
        raw = _get(buf, count * width)
        out = BlindedIds([int.from_bytes(raw[i * width:(i + 1) * width], "big") for i in range(count)], width)
    elif kind is RowBatch:
        out = RowBatch(_get_ids(buf), _get_matrix(buf))
    elif kind is Matrix:
        out = Matrix(_get_matrix(buf))
    elif kind is CipherBatch:
        out = _get_cipher(buf)
    elif kind is MaskedGradient:
        out = MaskedGradient(_get_matrix(buf), _get_cipher(buf))
    elif kind is Text:
        out = Text(_get_str(buf))
    else:
        raise ProtocolError(f"cannot decode payload {kind.__name__}")
    if buf.read(1):
        raise ProtocolError("trailing bytes after payload")
    return out
