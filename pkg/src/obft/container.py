"""Binary tensor container: magic "OBFT", u16 version, then TENSOR frames
exactly as on the wire ([u32 len][u8 0x03][id, ndim, dims, raw scalars]).

Element width is recovered per frame from payload size / element count, so
float32 and float64 tensors can share one file. Used for obfuscation-key
audit dumps, model checkpoints and adapter snapshots.
"""

from __future__ import annotations

import math
import struct
from io import BytesIO

import numpy as np

from .errors import ProtocolError
from .model import LORA_SITES, LoraAdapter, LoraAdapters, LoraConfig, ModelConfig
from .numerics import Precision
from .obfmat import KeyKind, ObfuscationKey
from . import wire

MAGIC = b"OBFT"
VERSION = 1

_KIND_CODES = {KeyKind.ORTHOGONAL: 0, KeyKind.PRESCRIBED_KAPPA: 1, KeyKind.RAW_RANDOM: 2}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _encode_any(tensor_id: str, arr: np.ndarray) -> bytes:
    precision = Precision.F64 if arr.dtype == np.float64 else Precision.F32
    return wire.pack_frame(wire.MSG_TENSOR, wire.encode_tensor(tensor_id, arr, precision))


def _decode_any(payload: bytes):
    (id_len,) = struct.unpack_from("<B", payload, 0)
    ident = payload[1 : 1 + id_len].decode("ascii")
    off = 1 + id_len
    (ndim,) = struct.unpack_from("<B", payload, off)
    off += 1
    dims = struct.unpack_from(f"<{ndim}I", payload, off)
    off += 4 * ndim
    count = 1
    for d in dims:
        count *= d
    body = len(payload) - off
    if count == 0:
        dtype = np.dtype("<f8")
    elif body == 8 * count:
        dtype = np.dtype("<f8")
    elif body == 4 * count:
        dtype = np.dtype("<f4")
    else:
        raise ProtocolError(f"tensor {ident!r}: {body} bytes do not fit {count} f32 or f64 scalars")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).reshape(dims)
    return ident, arr.astype(np.float64 if dtype.itemsize == 8 else np.float32, copy=True)


def write_tensors(path, tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<H", VERSION))
        for name, arr in tensors.items():
            fh.write(_encode_any(name, np.asarray(arr)))


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ProtocolError(f"bad container magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported container version {version}")
    stream = BytesIO(blob[6:])
    out = {}
    while True:
        pos = stream.tell()
        head = stream.read(5)
        if not head:
            break
        if len(head) < 5:
            raise ProtocolError(f"truncated frame header at offset {pos}")
        length, msg_type = struct.unpack("<IB", head)
        if msg_type != wire.MSG_TENSOR:
            raise ProtocolError(f"unexpected frame type {msg_type:#x} in container")
        payload = stream.read(length)
        if len(payload) < length:
            raise ProtocolError(f"truncated tensor frame at offset {pos}")
        ident, arr = _decode_any(payload)
        out[ident] = arr
    return out


def key_to_tensors(key: ObfuscationKey) -> dict:
    target = key.target_kappa if key.target_kappa is not None else math.nan
    meta = np.array(
        [_KIND_CODES[key.kind], target, key.measured_kappa,
         (key.seed >> 32) & 0xFFFFFFFF, key.seed & 0xFFFFFFFF,
         key.key_index, key.redraws],
        dtype=np.float64,
    )
    return {"r": key.r, "r_inv": key.r_inv, "meta": meta}


def key_from_tensors(tensors: dict) -> ObfuscationKey:
    meta = tensors["meta"]
    target = None if math.isnan(float(meta[1])) else float(meta[1])
    seed = (int(meta[3]) << 32) | int(meta[4])
    return ObfuscationKey(
        r=tensors["r"].astype(np.float64),
        r_inv=tensors["r_inv"].astype(np.float64),
        kind=_CODE_KINDS[int(meta[0])],
        target_kappa=target,
        measured_kappa=float(meta[2]),
        seed=seed,
        key_index=int(meta[5]),
        redraws=int(meta[6]),
    )


def save_key(path, key: ObfuscationKey) -> None:
    write_tensors(path, key_to_tensors(key))


def load_key(path) -> ObfuscationKey:
    return key_from_tensors(read_tensors(path))


def params_to_tensors(params) -> dict:
    cfg = params.config
    out = {
        "__config__": np.array(
            [cfg.n_layer, cfg.n_head, cfg.d_model, cfg.d_ff, cfg.vocab_size,
             cfg.context_len, cfg.layernorm_eps, 0 if cfg.precision is Precision.F32 else 1,
             cfg.embed_dropout, cfg.attn_dropout, cfg.resid_dropout],
            dtype=np.float64,
        ),
        "wte": params.wte,
        "wpe": params.wpe,
        "lnf_gain": params.lnf_gain,
        "lnf_bias": params.lnf_bias,
    }
    for i, bp in enumerate(params.blocks):
        for name in ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo",
                     "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2"):
            out[f"blk{i}.{name}"] = getattr(bp, name)
    return out


def params_from_tensors(tensors: dict):
    from .model import BlockParams, PlainParams

    c = tensors["__config__"]
    cfg = ModelConfig(
        n_layer=int(c[0]), n_head=int(c[1]), d_model=int(c[2]), d_ff=int(c[3]),
        vocab_size=int(c[4]), context_len=int(c[5]), layernorm_eps=float(c[6]),
        precision=Precision.F32 if int(c[7]) == 0 else Precision.F64,
        embed_dropout=float(c[8]), attn_dropout=float(c[9]), resid_dropout=float(c[10]),
    )
    dt = cfg.dtype
    blocks = []
    for i in range(cfg.n_layer):
        fields = {
            name: tensors[f"blk{i}.{name}"].astype(dt)
            for name in ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "bq", "bk", "bv", "wo", "bo",
                         "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2")
        }
        blocks.append(BlockParams(**fields))
    return PlainParams(
        config=cfg,
        wte=tensors["wte"].astype(dt), wpe=tensors["wpe"].astype(dt),
        blocks=blocks,
        lnf_gain=tensors["lnf_gain"].astype(dt), lnf_bias=tensors["lnf_bias"].astype(dt),
    )


def adapters_to_tensors(adapters: LoraAdapters) -> dict:
    lc = adapters.config
    out = {"__lora__": np.array([lc.rank, lc.alpha, lc.dropout, len(adapters.blocks)], dtype=np.float64)}
    for i, block in enumerate(adapters.blocks):
        for site in LORA_SITES:
            out[f"blk{i}.{site}.a"] = block[site].a
            out[f"blk{i}.{site}.b"] = block[site].b
    return out


def adapters_from_tensors(tensors: dict) -> LoraAdapters:
    meta = tensors["__lora__"]
    lc = LoraConfig(rank=int(meta[0]), alpha=float(meta[1]), dropout=float(meta[2]))
    blocks = []
    for i in range(int(meta[3])):
        blocks.append({site: LoraAdapter(a=tensors[f"blk{i}.{site}.a"], b=tensors[f"blk{i}.{site}.b"])
                       for site in LORA_SITES})
    return LoraAdapters(config=lc, blocks=blocks)
