"""Toy GPT-2-style transformer: plain forward/backward, LoRA adapters,
byte-level tokenization, cross-entropy loss.

This is the unprotected reference path. The two-zone executor (zones.py) must
reproduce its outputs, so both are built from the same sub-layer helpers in
blocks.py and all dropout masks come from the same seeded substreams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import (
    activation,
    activation_backward,
    attention_heads,
    attention_heads_backward,
    linear_with_lora,
    linear_with_lora_backward,
)
from .errors import ObftError, ShapeMismatch
from .numerics import Precision, layernorm_backward, layernorm_with_tape, matmul
from .rng import substream

LORA_SITES = ("wq", "wk", "wv", "wo", "w1", "w2")
INIT_STD = 0.02
BYTE_VOCAB = 256


@dataclass(frozen=True)
class ModelConfig:
    n_layer: int
    n_head: int
    d_model: int
    d_ff: int | None = None
    vocab_size: int = BYTE_VOCAB
    context_len: int = 128
    layernorm_eps: float = 1e-5
    precision: Precision = Precision.F32
    embed_dropout: float = 0.0
    attn_dropout: float = 0.0
    resid_dropout: float = 0.0

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.n_layer < 0:
            raise ValueError("n_layer must be >= 0")
        for name in ("n_head", "d_model", "d_ff", "vocab_size", "context_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_head != 0:
            raise ValueError(f"d_model ({self.d_model}) must divide by n_head ({self.n_head})")

    @property
    def dtype(self):
        return self.precision.dtype

    def site_shape(self, site: str):
        d, f = self.d_model, self.d_ff
        return {"wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d), "w1": (d, f), "w2": (f, d)}[site]


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 16
    alpha: float = 32.0
    dropout: float = 0.05

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


@dataclass
class BlockParams:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class PlainParams:
    config: ModelConfig
    wte: np.ndarray
    wpe: np.ndarray
    blocks: list
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray


@dataclass
class LoraAdapter:
    a: np.ndarray  # d_in x rank
    b: np.ndarray  # rank x d_out


@dataclass
class LoraAdapters:
    config: LoraConfig
    blocks: list  # per block: dict site -> LoraAdapter

    @property
    def scaling(self) -> float:
        return self.config.scaling


@dataclass
class TokenBatch:
    tokens: np.ndarray
    targets: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.int64)
            if self.targets.shape != self.tokens.shape:
                raise ShapeMismatch("targets must match tokens in length")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def tokenize_bytes(data: bytes) -> TokenBatch:
    """Byte-level tokenizer: token id == byte value."""
    return TokenBatch(np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64))


def detokenize(batch: TokenBatch) -> bytes:
    return batch.tokens.astype(np.uint8).tobytes()


def _draw(seed: int, name: str, shape, std: float, dtype) -> np.ndarray:
    return (substream(seed, "init", name).standard_normal(shape) * std).astype(dtype)


def init_params(config: ModelConfig, seed: int) -> PlainParams:
    """Gaussian init, std 0.02; residual projections scaled by 1/sqrt(2 n_layer)."""
    dt = config.dtype
    d, f = config.d_model, config.d_ff
    resid_std = INIT_STD / math.sqrt(2 * config.n_layer) if config.n_layer > 0 else INIT_STD
    blocks = []
    for i in range(config.n_layer):
        blocks.append(
            BlockParams(
                ln1_gain=np.ones(d, dtype=dt),
                ln1_bias=np.zeros(d, dtype=dt),
                wq=_draw(seed, f"blk{i}.wq", (d, d), INIT_STD, dt),
                wk=_draw(seed, f"blk{i}.wk", (d, d), INIT_STD, dt),
                wv=_draw(seed, f"blk{i}.wv", (d, d), INIT_STD, dt),
                bq=np.zeros(d, dtype=dt),
                bk=np.zeros(d, dtype=dt),
                bv=np.zeros(d, dtype=dt),
                wo=_draw(seed, f"blk{i}.wo", (d, d), resid_std, dt),
                bo=np.zeros(d, dtype=dt),
                ln2_gain=np.ones(d, dtype=dt),
                ln2_bias=np.zeros(d, dtype=dt),
                w1=_draw(seed, f"blk{i}.w1", (d, f), INIT_STD, dt),
                b1=np.zeros(f, dtype=dt),
                w2=_draw(seed, f"blk{i}.w2", (f, d), resid_std, dt),
                b2=np.zeros(d, dtype=dt),
            )
        )
    return PlainParams(
        config=config,
        wte=_draw(seed, "wte", (config.vocab_size, d), INIT_STD, dt),
        wpe=_draw(seed, "wpe", (config.context_len, d), INIT_STD, dt),
        blocks=blocks,
        lnf_gain=np.ones(d, dtype=dt),
        lnf_bias=np.zeros(d, dtype=dt),
    )


def init_lora(config: ModelConfig, lora_config: LoraConfig, seed: int) -> LoraAdapters:
    """A Gaussian (std 0.02), B zero: the base function is preserved at step 0."""
    dt = config.dtype
    r = lora_config.rank
    blocks = []
    for i in range(config.n_layer):
        site_map = {}
        for site in LORA_SITES:
            d_in, d_out = config.site_shape(site)
            site_map[site] = LoraAdapter(
                a=_draw(seed, f"blk{i}.lora.{site}.a", (d_in, r), INIT_STD, dt),
                b=np.zeros((r, d_out), dtype=dt),
            )
        blocks.append(site_map)
    return LoraAdapters(config=lora_config, blocks=blocks)


class MaskSource:
    """Seeded dropout masks, derived per (step, block, site) so the plain and
    protected paths draw identical masks regardless of evaluation order."""

    def __init__(self, seed: int, step: int, dtype):
        self.seed = seed
        self.step = step
        self.dtype = dtype

    def mask(self, p: float, shape, *site):
        if p <= 0.0:
            return None
        u = substream(self.seed, "mask", self.step, *site).random(shape)
        keep = (u >= p).astype(self.dtype)
        return keep * np.dtype(self.dtype).type(1.0 / (1.0 - p))


def validate_batch(batch: TokenBatch, config: ModelConfig, need_targets: bool = False):
    if len(batch) < 1:
        raise ShapeMismatch("batch must contain at least one token")
    if len(batch) > config.context_len:
        raise ShapeMismatch(f"batch length {len(batch)} exceeds context {config.context_len}")
    if batch.tokens.min() < 0 or batch.tokens.max() >= config.vocab_size:
        raise ObftError(f"token id out of range for vocab {config.vocab_size}")
    if need_targets:
        if batch.targets is None:
            raise ObftError("batch has no targets")
        if batch.targets.min() < 0 or batch.targets.max() >= config.vocab_size:
            raise ObftError(f"target id out of range for vocab {config.vocab_size}")


@dataclass
class _BlockTape:
    ln1: tuple
    attn_tapes: dict
    resid_attn_mask: np.ndarray | None
    ln2: tuple
    mlp_tapes: dict
    resid_mlp_mask: np.ndarray | None


@dataclass
class _ForwardTape:
    logits: np.ndarray
    blocks: list
    lnf: tuple
    embed_mask: np.ndarray | None


def _adapter(adapters: LoraAdapters | None, block: int, site: str):
    if adapters is None:
        return None, None, 0.0, 0.0
    ad = adapters.blocks[block][site]
    return ad.a, ad.b, adapters.scaling, adapters.config.dropout


def _forward_tape(params: PlainParams, adapters, batch, mode, mask_seed, step) -> _ForwardTape:
    cfg = params.config
    train = mode == "train"
    masks = MaskSource(mask_seed, step, cfg.dtype) if train else None
    tokens = batch.tokens
    seq = len(batch)
    lora_rank = adapters.config.rank if adapters is not None else None
    lora_p = adapters.config.dropout if adapters is not None else 0.0

    x = params.wte[tokens] + params.wpe[:seq]
    embed_mask = masks.mask(cfg.embed_dropout, x.shape, -1, "embed") if train else None
    if embed_mask is not None:
        x = x * embed_mask

    block_tapes = []
    for i, bp in enumerate(params.blocks):
        bundle = derive_block_masks(masks, cfg, lora_rank, lora_p, i, seq)
        lora = _lora_bundle(adapters, i)

        a0, ln1_tape = layernorm_with_tape(x, bp.ln1_gain, bp.ln1_bias, cfg.layernorm_eps)
        attn_out, tapes = block_attention_host(
            a0, bp.wq, bp.wk, bp.wv, bp.bq, bp.bk, bp.bv, bp.wo, lora, cfg.n_head, bundle,
        )
        o = attn_out + bp.bo
        if bundle["resid_attn"] is not None:
            o = o * bundle["resid_attn"]
        x = x + o

        h2, ln2_tape = layernorm_with_tape(x, bp.ln2_gain, bp.ln2_bias, cfg.layernorm_eps)
        mlp_tapes_out = block_mlp_host(h2, bp.w1, bp.b1, bp.w2, lora, bundle)
        y = mlp_tapes_out[0] + bp.b2
        if bundle["resid_mlp"] is not None:
            y = y * bundle["resid_mlp"]
        x = x + y

        block_tapes.append(
            _BlockTape(
                ln1=ln1_tape,
                attn_tapes=tapes,
                resid_attn_mask=bundle["resid_attn"],
                ln2=ln2_tape,
                mlp_tapes=mlp_tapes_out[1],
                resid_mlp_mask=bundle["resid_mlp"],
            )
        )

    hf, lnf_tape = layernorm_with_tape(x, params.lnf_gain, params.lnf_bias, cfg.layernorm_eps)
    logits = matmul(hf, np.ascontiguousarray(params.wte.T))
    return _ForwardTape(logits=logits, blocks=block_tapes, lnf=lnf_tape, embed_mask=embed_mask)


def _lora_bundle(adapters: LoraAdapters | None, block: int):
    """Per-site (a, b, scaling) for one block; all None without adapters."""
    if adapters is None:
        return {site: (None, None, 0.0) for site in LORA_SITES}
    scale = adapters.scaling
    return {site: (adapters.blocks[block][site].a, adapters.blocks[block][site].b, scale) for site in LORA_SITES}


def derive_block_masks(masks: MaskSource | None, cfg: ModelConfig, lora_rank: int | None,
                       lora_p: float, block: int, seq: int) -> dict:
    """All dropout masks one block consumes, keyed by site.

    Derived on the trusted/plain side only; the host zone receives them as
    data. LoRA masks land on the rank-space intermediate (post-A), which is
    identical in the plain and obfuscated coordinate systems.
    """
    bundle = {site: None for site in LORA_SITES}
    bundle.update(attn=None, resid_attn=None, resid_mlp=None)
    if masks is None:
        return bundle
    if lora_rank:
        for site in LORA_SITES:
            bundle[site] = masks.mask(lora_p, (seq, lora_rank), block, "lora", site)
    if cfg.attn_dropout > 0.0:
        bundle["attn"] = [masks.mask(cfg.attn_dropout, (seq, seq), block, "attn", h) for h in range(cfg.n_head)]
    bundle["resid_attn"] = masks.mask(cfg.resid_dropout, (seq, cfg.d_model), block, "resid", "attn")
    bundle["resid_mlp"] = masks.mask(cfg.resid_dropout, (seq, cfg.d_model), block, "resid", "mlp")
    return bundle


def block_attention_host(a0, wq, wk, wv, bq, bk, bv, wo, lora, n_head, mask_bundle):
    """QKV projections, causal attention, output projection (bias excluded).

    The host-zone half of an attention sub-layer; the plain path runs the same
    code with plain weights, so the op sequence matches exactly.
    """
    q, t_q = linear_with_lora(a0, wq, *lora["wq"], drop_mask=mask_bundle["wq"], bias=bq)
    k, t_k = linear_with_lora(a0, wk, *lora["wk"], drop_mask=mask_bundle["wk"], bias=bk)
    v, t_v = linear_with_lora(a0, wv, *lora["wv"], drop_mask=mask_bundle["wv"], bias=bv)
    h_all, t_attn = attention_heads(q, k, v, n_head, mask_bundle["attn"])
    out, t_o = linear_with_lora(h_all, wo, *lora["wo"], drop_mask=mask_bundle["wo"], bias=None)
    return out, {"q": t_q, "k": t_k, "v": t_v, "attn": t_attn, "o": t_o}


def block_attention_host_backward(d_out, tapes):
    """Mirror of block_attention_host; returns (d_a0, site gradients)."""
    d_h_all, d_ao, d_bo = linear_with_lora_backward(d_out, tapes["o"])
    d_q, d_k, d_v = attention_heads_backward(d_h_all, tapes["attn"])
    d_a0_q, d_aq, d_bq = linear_with_lora_backward(d_q, tapes["q"])
    d_a0_k, d_ak, d_bk = linear_with_lora_backward(d_k, tapes["k"])
    d_a0_v, d_av, d_bv = linear_with_lora_backward(d_v, tapes["v"])
    d_a0 = d_a0_q + d_a0_k + d_a0_v
    grads = {"wq": (d_aq, d_bq), "wk": (d_ak, d_bk), "wv": (d_av, d_bv), "wo": (d_ao, d_bo)}
    return d_a0, grads


def block_mlp_host(h2, w1, b1, w2, lora, mask_bundle):
    """First linear (bias included), gelu, second linear (bias excluded)."""
    u, t_1 = linear_with_lora(h2, w1, *lora["w1"], drop_mask=mask_bundle["w1"], bias=b1)
    g = activation(u)
    y, t_2 = linear_with_lora(g, w2, *lora["w2"], drop_mask=mask_bundle["w2"], bias=None)
    return y, {"lin1": t_1, "pre_act": u, "lin2": t_2}


def block_mlp_host_backward(d_out, tapes):
    """Mirror of block_mlp_host; returns (d_h2, site gradients)."""
    d_g, d_a2, d_b2 = linear_with_lora_backward(d_out, tapes["lin2"])
    d_u = activation_backward(d_g, tapes["pre_act"])
    d_h2, d_a1, d_b1 = linear_with_lora_backward(d_u, tapes["lin1"])
    return d_h2, {"w1": (d_a1, d_b1), "w2": (d_a2, d_b2)}


def forward_plain(params: PlainParams, adapters: LoraAdapters | None, batch: TokenBatch,
                  mode: str = "eval", mask_seed: int = 0, step: int = 0) -> np.ndarray:
    """Unprotected forward pass; returns logits of shape (seq, vocab)."""
    validate_batch(batch, params.config)
    return _forward_tape(params, adapters, batch, mode, mask_seed, step).logits


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean next-token cross entropy and its gradient w.r.t. the logits."""
    seq = logits.shape[0]
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    z = np.sum(e, axis=-1, keepdims=True)
    nll = np.log(z)[:, 0] - shifted[np.arange(seq), targets]
    loss = float(np.mean(nll))
    d_logits = e / z
    d_logits[np.arange(seq), targets] -= logits.dtype.type(1.0)
    d_logits /= logits.dtype.type(seq)
    return loss, d_logits


def _backward_tape(tape: _ForwardTape, params: PlainParams, adapters, d_logits):
    """Reverse pass through the taped forward; LoRA gradients only."""
    cfg = params.config
    d_hf = matmul(d_logits, params.wte)
    dx = layernorm_backward(d_hf, tape.lnf)

    grads = [dict() for _ in range(cfg.n_layer)]
    for i in range(cfg.n_layer - 1, -1, -1):
        bt = tape.blocks[i]

        dy = dx * bt.resid_mlp_mask if bt.resid_mlp_mask is not None else dx
        d_h2, mlp_grads = block_mlp_host_backward(dy, bt.mlp_tapes)
        dx = dx + layernorm_backward(d_h2, bt.ln2)

        do = dx * bt.resid_attn_mask if bt.resid_attn_mask is not None else dx
        d_a0, attn_grads = block_attention_host_backward(do, bt.attn_tapes)
        dx = dx + layernorm_backward(d_a0, bt.ln1)

        if adapters is not None:
            grads[i] = {**attn_grads, **mlp_grads}
    return grads


def loss_and_grads_plain(params: PlainParams, adapters: LoraAdapters | None, batch: TokenBatch,
                         mode: str = "train", mask_seed: int = 0, step: int = 0):
    """Cross-entropy loss plus gradients w.r.t. the LoRA parameters (base frozen)."""
    validate_batch(batch, params.config, need_targets=True)
    tape = _forward_tape(params, adapters, batch, mode, mask_seed, step)
    loss, d_logits = cross_entropy(tape.logits, batch.targets)
    grads = _backward_tape(tape, params, adapters, d_logits)
    return loss, grads


def sgd_step(adapters: LoraAdapters, grads, lr: float) -> LoraAdapters:
    """Plain gradient descent on the LoRA parameters; returns new adapters."""
    new_blocks = []
    for block, site_grads in zip(adapters.blocks, grads):
        new_map = {}
        for site, ad in block.items():
            if site in site_grads and site_grads[site][0] is not None:
                d_a, d_b = site_grads[site]
                lr_t = ad.a.dtype.type(lr)
                new_map[site] = LoraAdapter(a=ad.a - lr_t * d_a, b=ad.b - lr_t * d_b)
            else:
                new_map[site] = LoraAdapter(a=ad.a.copy(), b=ad.b.copy())
        new_blocks.append(new_map)
    return LoraAdapters(config=adapters.config, blocks=new_blocks)
