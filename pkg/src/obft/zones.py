"""Two-zone executor: protected forward/backward with an audited boundary.

The trusted zone holds embeddings, layernorms, output-side biases, the final
head and the obfuscation keys. The host zone holds only obfuscated weight
matrices, the host-routed biases and the LoRA factors, and computes on
obfuscated activations. Per block and per forward pass there are exactly four
boundary crossings: attention input out / output in, MLP input out / output
in. Dropout masks are derived on the trusted side and ride along with the
activation crossing; gradients cross in the reverse direction obfuscated by
the same keys.

The host zone runs either in-process (same address space, ledger-mediated) or
as a separate process speaking the framed protocol in wire.py; both modes
execute the identical HostZone code and produce bit-identical logits.
"""

from __future__ import annotations

import hashlib
import hmac
import secrets
import socket
import struct
import subprocess
import sys
import time
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .errors import AuthenticationFailure, EnvelopeError, ObftError, ProtocolError, TransportError
from .model import (
    LORA_SITES,
    LoraAdapter,
    LoraAdapters,
    MaskSource,
    TokenBatch,
    block_attention_host,
    block_attention_host_backward,
    block_mlp_host,
    block_mlp_host_backward,
    cross_entropy,
    derive_block_masks,
    validate_batch,
)
from .numerics import layernorm_backward, layernorm_with_tape, matmul
from .partition import PartitionedModel
from . import wire

TEE_TO_HOST = "tee_to_host"
HOST_TO_TEE = "host_to_tee"

_ENVELOPE_TAG_LEN = 16

FORWARD_OPS = {"attention": wire.OP_ATTENTION, "mlp": wire.OP_MLP}


@dataclass
class Crossing:
    direction: str
    payload_kind: str
    elements: int
    nbytes: int
    timestamp: float


@dataclass
class ZoneLedger:
    """Record of every boundary crossing plus the wall-time split per zone."""

    crossings: list = field(default_factory=list)
    host_seconds: float = 0.0
    tee_seconds: float = 0.0

    def record(self, direction: str, payload_kind: str, arrays):
        elements = sum(int(a.size) for a in arrays)
        nbytes = sum(int(a.size) * int(a.itemsize) for a in arrays)
        self.crossings.append(Crossing(direction, payload_kind, elements, nbytes, time.perf_counter()))

    def count(self, direction: str | None = None) -> int:
        if direction is None:
            return len(self.crossings)
        return sum(1 for c in self.crossings if c.direction == direction)

    def totals(self) -> dict:
        out = {}
        for direction in (TEE_TO_HOST, HOST_TO_TEE):
            rows = [c for c in self.crossings if c.direction == direction]
            out[direction] = {
                "count": len(rows),
                "elements": sum(c.elements for c in rows),
                "bytes": sum(c.nbytes for c in rows),
            }
        return out


@dataclass(frozen=True)
class Envelope:
    """Opaque wrapper around a data batch in transit; stands in for transport
    encryption (a real AEAD is out of scope). Length-preserving body plus a
    16-byte integrity tag."""

    payload: bytes


@dataclass(frozen=True)
class AuthToken:
    caller_id: str
    secret: bytes


def wrap_batch(batch: TokenBatch) -> Envelope:
    has_targets = batch.targets is not None
    body = struct.pack("<IB", len(batch), int(has_targets))
    body += batch.tokens.astype("<u4").tobytes()
    if has_targets:
        body += batch.targets.astype("<u4").tobytes()
    return Envelope(body + hashlib.sha256(body).digest()[:_ENVELOPE_TAG_LEN])


def unwrap_envelope(envelope: Envelope) -> TokenBatch:
    """Open an envelope; only ever called inside the trusted zone."""
    raw = envelope.payload
    if len(raw) < 5 + _ENVELOPE_TAG_LEN:
        raise EnvelopeError("envelope too short")
    body, tag = raw[:-_ENVELOPE_TAG_LEN], raw[-_ENVELOPE_TAG_LEN:]
    if not hmac.compare_digest(hashlib.sha256(body).digest()[:_ENVELOPE_TAG_LEN], tag):
        raise EnvelopeError("envelope integrity tag mismatch")
    n, has_targets = struct.unpack_from("<IB", body)
    need = 5 + 4 * n * (2 if has_targets else 1)
    if len(body) != need:
        raise EnvelopeError("envelope body length mismatch")
    tokens = np.frombuffer(body, dtype="<u4", count=n, offset=5).astype(np.int64)
    targets = None
    if has_targets:
        targets = np.frombuffer(body, dtype="<u4", count=n, offset=5 + 4 * n).astype(np.int64)
    return TokenBatch(tokens, targets)


def host_tensor_map(pm: PartitionedModel, copy: bool = False):
    """Everything the host zone is allowed to see, as (dims, named tensors)."""
    dims = {
        "n_layer": pm.config.n_layer,
        "n_head": pm.config.n_head,
        "d_model": pm.config.d_model,
        "d_ff": pm.config.d_ff,
        "lora_rank": pm.lora_config.rank if pm.lora_config else 0,
        "lora_scaling": pm.lora_config.scaling if pm.lora_config else 0.0,
    }
    tensors = {}
    for i, hb in enumerate(pm.host_blocks):
        for site in LORA_SITES:
            tensors[f"blk{i}.{site}_star"] = hb.star(site)
        for name in ("bq", "bk", "bv", "b1"):
            tensors[f"blk{i}.{name}"] = getattr(hb, name)
        if hb.lora is not None:
            for site in LORA_SITES:
                tensors[f"blk{i}.lora.{site}.a"] = hb.lora[site].a
                tensors[f"blk{i}.lora.{site}.b"] = hb.lora[site].b
    if copy:
        tensors = {k: v.copy() for k, v in tensors.items()}
    return dims, tensors


class HostZone:
    """The untrusted compute zone. Sees only obfuscated weights, host-routed
    biases, LoRA factors and whatever crosses the boundary."""

    def __init__(self, dims: dict, tensors: dict):
        self.n_layer = int(dims["n_layer"])
        self.n_head = int(dims["n_head"])
        self.lora_rank = int(dims["lora_rank"])
        self.lora_scaling = float(dims["lora_scaling"])
        self.blocks = []
        for i in range(self.n_layer):
            blk = {
                name: tensors[f"blk{i}.{name}"]
                for name in ("wq_star", "wk_star", "wv_star", "wo_star", "w1_star", "w2_star",
                             "bq", "bk", "bv", "b1")
            }
            if self.lora_rank > 0:
                blk["lora"] = {
                    site: [tensors[f"blk{i}.lora.{site}.a"], tensors[f"blk{i}.lora.{site}.b"]]
                    for site in LORA_SITES
                }
            else:
                blk["lora"] = None
            self.blocks.append(blk)
        self._tapes = {}
        self.lora_grads = [dict() for _ in range(self.n_layer)]

    def tensor_map(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            for name in ("wq_star", "wk_star", "wv_star", "wo_star", "w1_star", "w2_star",
                         "bq", "bk", "bv", "b1"):
                out[f"blk{i}.{name}"] = blk[name]
            if blk["lora"] is not None:
                for site in LORA_SITES:
                    out[f"blk{i}.lora.{site}.a"] = blk["lora"][site][0]
                    out[f"blk{i}.lora.{site}.b"] = blk["lora"][site][1]
        return out

    def _lora(self, block: int):
        blk = self.blocks[block]
        if blk["lora"] is None:
            return {site: (None, None, 0.0) for site in LORA_SITES}
        return {site: (blk["lora"][site][0], blk["lora"][site][1], self.lora_scaling) for site in LORA_SITES}

    @staticmethod
    def _bundle(payload: dict, n_head: int) -> dict:
        bundle = {site: payload.get(f"m.{site}") for site in LORA_SITES}
        if f"m.attn.0" in payload:
            bundle["attn"] = [payload[f"m.attn.{h}"] for h in range(n_head)]
        else:
            bundle["attn"] = None
        return bundle

    def compute(self, op: str, block: int, payload: dict, train: bool = False) -> np.ndarray:
        blk = self.blocks[block]
        if op == "attention":
            bundle = self._bundle(payload, self.n_head)
            out, tapes = block_attention_host(
                payload["x"], blk["wq_star"], blk["wk_star"], blk["wv_star"],
                blk["bq"], blk["bk"], blk["bv"], blk["wo_star"],
                self._lora(block), self.n_head, bundle,
            )
            if train:
                self._tapes[(block, "attention")] = tapes
            return out
        if op == "mlp":
            bundle = self._bundle(payload, self.n_head)
            out, tapes = block_mlp_host(
                payload["x"], blk["w1_star"], blk["b1"], blk["w2_star"], self._lora(block), bundle,
            )
            if train:
                self._tapes[(block, "mlp")] = tapes
            return out
        if op == "attention_backward":
            d_x, grads = block_attention_host_backward(payload["d"], self._tapes[(block, "attention")])
            self._store_grads(block, grads)
            return d_x
        if op == "mlp_backward":
            d_x, grads = block_mlp_host_backward(payload["d"], self._tapes[(block, "mlp")])
            self._store_grads(block, grads)
            return d_x
        if op == "lora_update":
            self.apply_lora_update(float(payload["lr"][0]))
            return np.zeros(0, dtype=payload["lr"].dtype)
        raise ObftError(f"unknown host op {op!r}")

    def _store_grads(self, block: int, grads: dict):
        for site, (d_a, d_b) in grads.items():
            if d_a is not None:
                self.lora_grads[block][site] = (d_a, d_b)

    def apply_lora_update(self, lr: float):
        for block, blk in enumerate(self.blocks):
            if blk["lora"] is None:
                continue
            for site, (d_a, d_b) in self.lora_grads[block].items():
                a, b = blk["lora"][site]
                lr_t = a.dtype.type(lr)
                a -= lr_t * d_a
                b -= lr_t * d_b

    def lora_snapshot(self) -> dict:
        out = {}
        for i, blk in enumerate(self.blocks):
            if blk["lora"] is None:
                continue
            for site in LORA_SITES:
                out[f"blk{i}.lora.{site}.a"] = blk["lora"][site][0].copy()
                out[f"blk{i}.lora.{site}.b"] = blk["lora"][site][1].copy()
        return out


class InProcessBoundary:
    """Both zones in one address space; the ledger is the only hand-off point."""

    supports_training = True

    def __init__(self, host: HostZone):
        self.host = host

    def call(self, op: str, block: int, payload: dict, ledger: ZoneLedger,
             kind: str = "activation", train: bool = False) -> np.ndarray:
        ledger.record(TEE_TO_HOST, kind, list(payload.values()))
        t0 = time.perf_counter()
        result = self.host.compute(op, block, payload, train=train)
        ledger.host_seconds += time.perf_counter() - t0
        ledger.record(HOST_TO_TEE, "result", [result])
        return result

    def close(self):
        pass


class RemoteBoundary:
    """Host zone behind the framed wire protocol (forward op codes only)."""

    supports_training = False

    def __init__(self, sock: socket.socket, precision, retries: int = 0):
        self._sock = sock
        self._stream = sock.makefile("rwb")
        self.precision = precision
        self.retries = retries
        self.host = None

    def handshake(self, session_token: bytes):
        self._send(wire.MSG_HELLO, wire.encode_hello(self.precision))
        self._send(wire.MSG_AUTH, wire.encode_auth(session_token))

    def upload(self, dims: dict, tensors: dict, ledger: ZoneLedger):
        dims_vec = np.array(
            [dims["n_layer"], dims["n_head"], dims["d_model"], dims["d_ff"],
             dims["lora_rank"], dims["lora_scaling"]],
            dtype=self.precision.dtype,
        )
        self._send(wire.MSG_TENSOR, wire.encode_tensor("__dims__", dims_vec, self.precision))
        for name, arr in tensors.items():
            self._send(wire.MSG_TENSOR, wire.encode_tensor(f"w.{name}", arr, self.precision))
        ledger.record(TEE_TO_HOST, "weights", list(tensors.values()))

    def call(self, op: str, block: int, payload: dict, ledger: ZoneLedger,
             kind: str = "activation", train: bool = False) -> np.ndarray:
        if op not in FORWARD_OPS:
            raise ProtocolError(f"the wire protocol defines no op code for {op!r}; "
                                "training runs in-process")
        attempts = 0
        last_error = None
        while attempts <= self.retries:
            attempts += 1
            try:
                return self._call_once(op, block, payload, ledger, kind)
            except (OSError, TransportError) as exc:
                last_error = exc
        raise TransportError(f"boundary crossing failed after {attempts} attempt(s): {last_error}")

    def _call_once(self, op, block, payload, ledger, kind):
        ledger.record(TEE_TO_HOST, kind, list(payload.values()))
        t0 = time.perf_counter()
        for name, arr in payload.items():
            self._send(wire.MSG_TENSOR, wire.encode_tensor(f"call.{name}", arr, self.precision))
        self._send(wire.MSG_COMPUTE, wire.encode_compute(FORWARD_OPS[op], block))
        msg_type, frame = wire.read_frame(self._stream)
        if msg_type == wire.MSG_ERROR:
            code, message = wire.decode_error(frame)
            raise ProtocolError(f"host zone error {code}: {message}")
        if msg_type != wire.MSG_RESULT:
            raise ProtocolError(f"expected RESULT, got message type {msg_type:#x}")
        _, result = wire.decode_tensor(frame, self.precision)
        ledger.host_seconds += time.perf_counter() - t0
        ledger.record(HOST_TO_TEE, "result", [result])
        return result

    def _send(self, msg_type: int, payload: bytes):
        self._stream.write(wire.pack_frame(msg_type, payload))
        self._stream.flush()

    def close(self):
        try:
            self._send(wire.MSG_BYE, b"")
        except Exception:
            pass
        try:
            self._stream.close()
            self._sock.close()
        except Exception:
            pass


class ZoneExecutor:
    """One logical session: authenticated entry, lock-step zone hand-offs."""

    def __init__(self, model: PartitionedModel, boundary, auth_secret: bytes,
                 mode: str, host_proc=None):
        self.model = model
        self.boundary = boundary
        self.mode = mode
        self._secret = auth_secret
        self._proc = host_proc
        self.setup_ledger = ZoneLedger()
        dt = model.config.dtype
        self._keys = {}
        for key_id, key in model.keys.items():
            r, r_inv = key.cast(dt)
            self._keys[key_id] = SimpleNamespace(
                r=r, r_inv=r_inv,
                r_t=np.ascontiguousarray(r.T),
                r_inv_t=np.ascontiguousarray(r_inv.T),
            )

    def _authenticate(self, token: AuthToken):
        if not isinstance(token, AuthToken) or not hmac.compare_digest(token.secret, self._secret):
            raise AuthenticationFailure("caller token rejected; refusing to execute")

    def _masks_payload(self, bundle: dict, which: tuple, payload: dict):
        for site in which:
            if bundle[site] is not None:
                payload[f"m.{site}"] = bundle[site]
        if "attn" in which and bundle["attn"] is not None:
            for h, m in enumerate(bundle["attn"]):
                payload[f"m.attn.{h}"] = m

    def _run_forward(self, batch: TokenBatch, mode: str, mask_seed: int, step: int,
                     ledger: ZoneLedger, train: bool):
        pm = self.model
        cfg = pm.config
        masks = MaskSource(mask_seed, step, cfg.dtype) if mode == "train" else None
        lora_rank = pm.lora_config.rank if pm.lora_config else None
        lora_p = pm.lora_config.dropout if pm.lora_config else 0.0
        seq = len(batch)

        x = pm.wte[batch.tokens] + pm.wpe[:seq]
        embed_mask = masks.mask(cfg.embed_dropout, x.shape, -1, "embed") if masks else None
        if embed_mask is not None:
            x = x * embed_mask

        tee_tapes = []
        for i, tb in enumerate(pm.tee_blocks):
            bk = pm.host_blocks[i].keys
            k_ai, k_ao = self._keys[bk.attn_in], self._keys[bk.attn_out]
            k_mi, k_mo = self._keys[bk.mlp_in], self._keys[bk.mlp_out]
            bundle = derive_block_masks(masks, cfg, lora_rank, lora_p, i, seq)

            a0, ln1_tape = layernorm_with_tape(x, tb.ln1_gain, tb.ln1_bias, cfg.layernorm_eps)
            a0_star = matmul(a0, k_ai.r)  # obfuscate before leaving the TEE
            payload = {"x": a0_star}
            self._masks_payload(bundle, ("wq", "wk", "wv", "wo", "attn"), payload)
            o_star = self.boundary.call("attention", i, payload, ledger, train=train)
            o = matmul(o_star, k_ao.r_inv) + tb.bo  # de-obfuscate, bias lives TEE-side
            if bundle["resid_attn"] is not None:
                o = o * bundle["resid_attn"]
            x = x + o

            h2, ln2_tape = layernorm_with_tape(x, tb.ln2_gain, tb.ln2_bias, cfg.layernorm_eps)
            h2_star = matmul(h2, k_mi.r)
            payload = {"x": h2_star}
            self._masks_payload(bundle, ("w1", "w2"), payload)
            y_star = self.boundary.call("mlp", i, payload, ledger, train=train)
            y = matmul(y_star, k_mo.r_inv) + tb.b2
            if bundle["resid_mlp"] is not None:
                y = y * bundle["resid_mlp"]
            x = x + y

            tee_tapes.append((ln1_tape, ln2_tape, bundle["resid_attn"], bundle["resid_mlp"]))

        hf, lnf_tape = layernorm_with_tape(x, pm.lnf_gain, pm.lnf_bias, cfg.layernorm_eps)
        logits = matmul(hf, np.ascontiguousarray(pm.wte.T))
        return logits, tee_tapes, lnf_tape

    def forward(self, envelope: Envelope, token: AuthToken, mode: str = "eval",
                mask_seed: int = 0, step: int = 0):
        """Protected forward pass; logits go only to the authenticated caller."""
        self._authenticate(token)
        batch = unwrap_envelope(envelope)
        validate_batch(batch, self.model.config)
        ledger = ZoneLedger()
        t0 = time.perf_counter()
        logits, _, _ = self._run_forward(batch, mode, mask_seed, step, ledger, train=False)
        ledger.tee_seconds = (time.perf_counter() - t0) - ledger.host_seconds
        return logits, ledger

    def train_step(self, envelope: Envelope, token: AuthToken, lr: float,
                   mask_seed: int = 0, step: int = 0):
        """One protected LoRA step: loss in the TEE, mirrored backward split,
        SGD applied to the host-resident LoRA tensors."""
        self._authenticate(token)
        if not self.boundary.supports_training:
            raise ObftError("this executor's transport supports inference only; "
                            "use in_process mode for training")
        batch = unwrap_envelope(envelope)
        pm = self.model
        validate_batch(batch, pm.config, need_targets=True)
        ledger = ZoneLedger()
        t0 = time.perf_counter()

        logits, tee_tapes, lnf_tape = self._run_forward(batch, "train", mask_seed, step, ledger, train=True)
        loss, d_logits = cross_entropy(logits, batch.targets)

        d_hf = matmul(d_logits, pm.wte)
        dx = layernorm_backward(d_hf, lnf_tape)
        for i in range(pm.config.n_layer - 1, -1, -1):
            bk = pm.host_blocks[i].keys
            k_ai, k_ao = self._keys[bk.attn_in], self._keys[bk.attn_out]
            k_mi, k_mo = self._keys[bk.mlp_in], self._keys[bk.mlp_out]
            ln1_tape, ln2_tape, resid_attn_mask, resid_mlp_mask = tee_tapes[i]

            dy = dx * resid_mlp_mask if resid_mlp_mask is not None else dx
            d_y_star = matmul(dy, k_mo.r_inv_t)  # gradient crosses obfuscated
            d_h2_star = self.boundary.call("mlp_backward", i, {"d": d_y_star}, ledger, kind="gradient")
            d_h2 = matmul(d_h2_star, k_mi.r_t)
            dx = dx + layernorm_backward(d_h2, ln2_tape)

            do = dx * resid_attn_mask if resid_attn_mask is not None else dx
            d_o_star = matmul(do, k_ao.r_inv_t)
            d_a0_star = self.boundary.call("attention_backward", i, {"d": d_o_star}, ledger, kind="gradient")
            d_a0 = matmul(d_a0_star, k_ai.r_t)
            dx = dx + layernorm_backward(d_a0, ln1_tape)

        lr_arr = np.array([lr], dtype=pm.config.dtype)
        self.boundary.call("lora_update", -1, {"lr": lr_arr}, ledger, kind="control")
        ledger.tee_seconds = (time.perf_counter() - t0) - ledger.host_seconds

        lora_view = self._host_lora_view()
        return loss, lora_view, ledger

    def _host_lora_view(self) -> LoraAdapters | None:
        pm = self.model
        if pm.lora_config is None:
            return None
        host = self.boundary.host
        blocks = []
        for i in range(pm.config.n_layer):
            blk = host.blocks[i]["lora"]
            blocks.append({site: LoraAdapter(a=blk[site][0], b=blk[site][1]) for site in LORA_SITES})
        return LoraAdapters(config=pm.lora_config, blocks=blocks)

    def host_lora_grads(self):
        return self.boundary.host.lora_grads

    def close(self):
        self.boundary.close()
        if self._proc is not None:
            try:
                self._proc.terminate()
                self._proc.wait(timeout=10)
            except Exception:
                self._proc.kill()


def _spawn_host_process(session_token: bytes, timeout: float):
    proc = subprocess.Popen(
        [sys.executable, "-m", "obft.hostproc", "--port", "0", "--auth-hex", session_token.hex()],
        stdout=subprocess.PIPE,
        stderr=subprocess.DEVNULL,
        text=True,
    )
    line = proc.stdout.readline().strip()
    if not line.startswith("PORT "):
        proc.kill()
        raise TransportError(f"host process failed to report a port (got {line!r})")
    port = int(line.split()[1])
    sock = socket.create_connection(("127.0.0.1", port), timeout=timeout)
    sock.settimeout(timeout)
    return proc, sock


def serve_zones(model: PartitionedModel, mode: str = "in_process",
                auth_secret: bytes = b"", retries: int = 0,
                timeout: float = 60.0) -> ZoneExecutor:
    """Build an executor handle for one logical session."""
    if mode == "in_process":
        dims, tensors = host_tensor_map(model, copy=False)
        host = HostZone(dims, tensors)
        return ZoneExecutor(model, InProcessBoundary(host), auth_secret, mode)
    if mode == "two_process":
        session_token = secrets.token_bytes(16)
        proc, sock = _spawn_host_process(session_token, timeout)
        boundary = RemoteBoundary(sock, model.config.precision, retries=retries)
        executor = ZoneExecutor(model, boundary, auth_secret, mode, host_proc=proc)
        try:
            boundary.handshake(session_token)
            dims, tensors = host_tensor_map(model, copy=False)
            boundary.upload(dims, tensors, executor.setup_ledger)
        except Exception:
            executor.close()
            raise
        return executor
    raise ValueError(f"mode must be in_process or two_process, got {mode!r}")


def forward_protected(model: PartitionedModel, envelope: Envelope, token: AuthToken,
                      mode: str = "eval", mask_seed: int = 0, step: int = 0,
                      auth_secret: bytes | None = None):
    """One-shot protected forward pass through an in-process executor."""
    executor = serve_zones(model, "in_process",
                           auth_secret=token.secret if auth_secret is None else auth_secret)
    try:
        return executor.forward(envelope, token, mode=mode, mask_seed=mask_seed, step=step)
    finally:
        executor.close()


def train_step_protected(model: PartitionedModel, envelope: Envelope, token: AuthToken,
                         lr: float, mask_seed: int = 0, step: int = 0,
                         auth_secret: bytes | None = None):
    """One-shot protected training step; the model's host LoRA tensors are
    updated in place (the in-process host zone aliases them)."""
    executor = serve_zones(model, "in_process",
                           auth_secret=token.secret if auth_secret is None else auth_secret)
    try:
        return executor.train_step(envelope, token, lr, mask_seed=mask_seed, step=step)
    finally:
        executor.close()


def measure_slowdown(model: PartitionedModel, plain_params, adapters, batch: TokenBatch,
                     repetitions: int = 5, token: AuthToken | None = None):
    """Median protected vs plain forward time and their ratio."""
    from .model import forward_plain

    token = token or AuthToken("bench", b"bench-secret")
    executor = serve_zones(model, "in_process", auth_secret=token.secret)
    envelope = wrap_batch(batch)
    try:
        protected_times, plain_times = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            executor.forward(envelope, token)
            protected_times.append(time.perf_counter() - t0)
            t0 = time.perf_counter()
            forward_plain(plain_params, adapters, batch)
            plain_times.append(time.perf_counter() - t0)
    finally:
        executor.close()
    t_protected = float(np.median(protected_times))
    t_plain = float(np.median(plain_times))
    return t_protected, t_plain, t_protected / t_plain


def audit_zone_hygiene(host: HostZone, params) -> dict:
    """Walk the host zone's reachable base weight tensors and report the max
    abs difference from the corresponding plain weight. Host-routed bias
    vectors and LoRA factors are excluded: the former are plain on the host by
    design, the latter are data-derived randomness, not proprietary weights."""
    diffs = {}
    for name, arr in host.tensor_map().items():
        parts = name.split(".")
        if parts[1].endswith("_star"):
            i = int(parts[0][3:])
            site = parts[1][:-5]
            diffs[name] = float(np.max(np.abs(arr - getattr(params.blocks[i], site))))
    return diffs
