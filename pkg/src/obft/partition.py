"""Split a plain model into TEE-resident and host-resident halves.

Host residency gets every large weight matrix, stored only in obfuscated form:
input-side matrices (wq, wk, wv, w1) are left-multiplied by the inverse of the
block's input key, output-side matrices (wo, w2) are right-multiplied by the
output key. Randomly initialized LoRA factors are placed on the host as they
are; the trusted side's plain-basis view of an adapter is the key-rotated one
(recover_plain_adapters). Under orthogonal keys that view is an isometric
rotation, so protected LoRA training follows exactly the same trajectory as
plain training of the viewed adapters; under ill-conditioned keys the key
spectrum leaks into the effective update geometry, which is one of the ways
badly conditioned obfuscation degrades finetuning. The TEE keeps embeddings,
layernorm parameters, the output-side biases (bo, b2), the final head, and
the key ring. The q/k/v and first-MLP biases stay on the host in the clear:
they attach to intermediates that are already plain there, and routing them
through the TEE would cost two extra crossings per block.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .model import LORA_SITES, BlockParams, LoraAdapter, LoraAdapters, LoraConfig, ModelConfig, PlainParams
from .numerics import matmul
from .obfmat import KeyKind, ObfuscationKey, make_key

KEY_SLOTS = ("attn_in", "attn_out", "mlp_in", "mlp_out")
# site -> (key slot, which side of the product the key lands on)
SITE_KEYS = {
    "wq": ("attn_in", "left"),
    "wk": ("attn_in", "left"),
    "wv": ("attn_in", "left"),
    "wo": ("attn_out", "right"),
    "w1": ("mlp_in", "left"),
    "w2": ("mlp_out", "right"),
}


@dataclass(frozen=True)
class BlockKeys:
    attn_in: str
    attn_out: str
    mlp_in: str
    mlp_out: str

    def slot(self, name: str) -> str:
        return getattr(self, name)


@dataclass
class HostBlock:
    """Host-resident tensors for one transformer block."""

    wq_star: np.ndarray
    wk_star: np.ndarray
    wv_star: np.ndarray
    wo_star: np.ndarray
    w1_star: np.ndarray
    w2_star: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    b1: np.ndarray
    lora: dict | None  # site -> LoraAdapter in host basis
    keys: BlockKeys

    def star(self, site: str) -> np.ndarray:
        return getattr(self, f"{site}_star")


@dataclass
class TeeBlock:
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray
    bo: np.ndarray
    b2: np.ndarray


@dataclass
class PartitionedModel:
    config: ModelConfig
    lora_config: LoraConfig | None
    wte: np.ndarray
    wpe: np.ndarray
    tee_blocks: list
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    host_blocks: list
    keys: dict  # key id -> ObfuscationKey; never leaves the TEE side
    key_policy: str
    key_kind: KeyKind
    target_kappa: float | None
    seed: int


@dataclass(frozen=True)
class ParamCounts:
    embeddings: int
    layernorm: int
    tee_biases: int
    host_biases: int
    attn_weights: int
    mlp_weights: int
    lora: int

    @property
    def tee_total(self) -> int:
        return self.embeddings + self.layernorm + self.tee_biases

    @property
    def host_total(self) -> int:
        return self.attn_weights + self.mlp_weights + self.host_biases + self.lora

    @property
    def total(self) -> int:
        return self.tee_total + self.host_total

    @property
    def plain_total(self) -> int:
        return self.total - self.lora


@dataclass
class PartitionReport:
    tee_param_count: int
    host_param_count: int
    tee_fraction: float
    breakdown: dict

    def as_text(self) -> str:
        lines = [
            f"tee_param_count: {self.tee_param_count}",
            f"host_param_count: {self.host_param_count}",
            f"tee_fraction: {self.tee_fraction:.6f}",
        ]
        lines += [f"{k}: {v}" for k, v in self.breakdown.items()]
        return "\n".join(lines)


def count_params(config: ModelConfig, lora_config: LoraConfig | None = None) -> ParamCounts:
    """Closed-form per-category parameter counts (exact integers)."""
    d, f, n = config.d_model, config.d_ff, config.n_layer
    lora = 0
    if lora_config is not None:
        r = lora_config.rank
        per_block = 4 * (d * r + r * d) + (d * r + r * f) + (f * r + r * d)
        lora = n * per_block
    return ParamCounts(
        embeddings=config.vocab_size * d + config.context_len * d,
        layernorm=(2 * n + 1) * 2 * d,
        tee_biases=n * 2 * d,           # bo, b2
        host_biases=n * (3 * d + f),    # bq, bk, bv, b1
        attn_weights=n * 4 * d * d,
        mlp_weights=n * 2 * d * f,
        lora=lora,
    )


def partition_report(config: ModelConfig, lora_config: LoraConfig | None = None) -> PartitionReport:
    c = count_params(config, lora_config)
    return PartitionReport(
        tee_param_count=c.tee_total,
        host_param_count=c.host_total,
        tee_fraction=c.tee_total / c.total,
        breakdown={
            "embeddings": c.embeddings,
            "layernorm": c.layernorm,
            "tee_biases": c.tee_biases,
            "host_biases": c.host_biases,
            "attn_weights_obfuscated": c.attn_weights,
            "mlp_weights_obfuscated": c.mlp_weights,
            "lora_host": c.lora,
            "total": c.total,
        },
    )


def _obfuscate(w: np.ndarray, key: ObfuscationKey, side: str) -> np.ndarray:
    """Key product in float64; result cast back to the run precision."""
    w64 = w.astype(np.float64, copy=False)
    if side == "left":
        out = matmul(key.r_inv, w64)
    else:
        out = matmul(w64, key.r)
    return out.astype(w.dtype)


def _deobfuscate(star: np.ndarray, key: ObfuscationKey, side: str) -> np.ndarray:
    s64 = star.astype(np.float64, copy=False)
    if side == "left":
        return matmul(key.r, s64)
    return matmul(s64, key.r_inv)


def _check_key_dims(key: ObfuscationKey, d_model: int):
    if key.n != d_model:
        raise ShapeMismatch(f"key size {key.n} does not match d_model {d_model}")


def _place_adapter(ad: LoraAdapter, key: ObfuscationKey, side: str, basis: str) -> LoraAdapter:
    """Host copy of one LoRA adapter.

    basis="host": the randomly initialized factors land on the host as-is (the
    rotated factor is simply whatever was drawn; under orthogonal keys this is
    distributionally identical to a plain-basis draw). basis="plain": the
    factors are a plain-basis view and the key rotation is applied, preserving
    the effective adapter; re-obfuscation uses this path.
    """
    if basis == "host":
        return LoraAdapter(a=ad.a.copy(), b=ad.b.copy())
    if side == "left":
        return LoraAdapter(a=_obfuscate(ad.a, key, "left"), b=ad.b.copy())
    return LoraAdapter(a=ad.a.copy(), b=_obfuscate(ad.b, key, "right"))


def obfuscate_attention_block(bp: BlockParams, key_in: ObfuscationKey, key_out: ObfuscationKey,
                              lora_block=None, adapter_basis: str = "host"):
    """Host tensors for one attention sub-layer: wq*/wk*/wv* = key_in^-1 W,
    wo* = W key_out; q/k/v biases ride along in the clear, bo stays TEE-side."""
    _check_key_dims(key_in, bp.wq.shape[0])
    _check_key_dims(key_out, bp.wo.shape[1])
    stars = {site: _obfuscate(getattr(bp, site), key_in, "left") for site in ("wq", "wk", "wv")}
    stars["wo"] = _obfuscate(bp.wo, key_out, "right")
    lora_host = None
    if lora_block is not None:
        lora_host = {site: _place_adapter(lora_block[site], key_in, "left", adapter_basis)
                     for site in ("wq", "wk", "wv")}
        lora_host["wo"] = _place_adapter(lora_block["wo"], key_out, "right", adapter_basis)
    return stars, lora_host


def obfuscate_mlp_block(bp: BlockParams, key_in: ObfuscationKey, key_out: ObfuscationKey,
                        lora_block=None, adapter_basis: str = "host"):
    """Host tensors for one MLP sub-layer: w1* = key_in^-1 W1, w2* = W2 key_out;
    b1 rides along in the clear, b2 stays TEE-side."""
    _check_key_dims(key_in, bp.w1.shape[0])
    _check_key_dims(key_out, bp.w2.shape[1])
    stars = {
        "w1": _obfuscate(bp.w1, key_in, "left"),
        "w2": _obfuscate(bp.w2, key_out, "right"),
    }
    lora_host = None
    if lora_block is not None:
        lora_host = {
            "w1": _place_adapter(lora_block["w1"], key_in, "left", adapter_basis),
            "w2": _place_adapter(lora_block["w2"], key_out, "right", adapter_basis),
        }
    return stars, lora_host


def _make_keys(config: ModelConfig, key_policy: str, key_kind: KeyKind, kappa, seed: int):
    if key_policy not in ("shared", "per_block"):
        raise ValueError(f"key_policy must be shared or per_block, got {key_policy!r}")
    keys: dict[str, ObfuscationKey] = {}
    block_keys = []
    d = config.d_model

    def new_key(key_id: str, index: int):
        keys[key_id] = make_key(key_kind, d, seed, key_index=index, kappa=kappa)

    if key_policy == "shared":
        for idx, slot in enumerate(KEY_SLOTS):
            new_key(f"shared.{slot}", idx)
        shared = BlockKeys(*(f"shared.{slot}" for slot in KEY_SLOTS))
        block_keys = [shared] * config.n_layer
    else:
        for i in range(config.n_layer):
            for j, slot in enumerate(KEY_SLOTS):
                new_key(f"blk{i}.{slot}", 4 * i + j)
            block_keys.append(BlockKeys(*(f"blk{i}.{slot}" for slot in KEY_SLOTS)))
    return keys, block_keys


def partition_model(params: PlainParams, adapters: LoraAdapters | None = None,
                    key_policy: str = "shared", key_kind: KeyKind = KeyKind.ORTHOGONAL,
                    kappa: float | None = None, seed: int = 0, adapter_basis: str = "host"):
    """Generate keys per policy, obfuscate every block, tag residency."""
    if adapter_basis not in ("host", "plain"):
        raise ValueError(f"adapter_basis must be host or plain, got {adapter_basis!r}")
    config = params.config
    keys, block_keys = _make_keys(config, key_policy, key_kind, kappa, seed)

    host_blocks, tee_blocks = [], []
    for i, bp in enumerate(params.blocks):
        bk = block_keys[i]
        lora_block = adapters.blocks[i] if adapters is not None else None
        attn_stars, attn_lora = obfuscate_attention_block(
            bp, keys[bk.attn_in], keys[bk.attn_out], lora_block, adapter_basis)
        mlp_stars, mlp_lora = obfuscate_mlp_block(
            bp, keys[bk.mlp_in], keys[bk.mlp_out], lora_block, adapter_basis)
        lora_host = None
        if lora_block is not None:
            lora_host = {**attn_lora, **mlp_lora}
        host_blocks.append(
            HostBlock(
                wq_star=attn_stars["wq"], wk_star=attn_stars["wk"], wv_star=attn_stars["wv"],
                wo_star=attn_stars["wo"], w1_star=mlp_stars["w1"], w2_star=mlp_stars["w2"],
                bq=bp.bq.copy(), bk=bp.bk.copy(), bv=bp.bv.copy(), b1=bp.b1.copy(),
                lora=lora_host, keys=bk,
            )
        )
        tee_blocks.append(
            TeeBlock(
                ln1_gain=bp.ln1_gain.copy(), ln1_bias=bp.ln1_bias.copy(),
                ln2_gain=bp.ln2_gain.copy(), ln2_bias=bp.ln2_bias.copy(),
                bo=bp.bo.copy(), b2=bp.b2.copy(),
            )
        )

    model = PartitionedModel(
        config=config,
        lora_config=adapters.config if adapters is not None else None,
        wte=params.wte.copy(), wpe=params.wpe.copy(),
        tee_blocks=tee_blocks,
        lnf_gain=params.lnf_gain.copy(), lnf_bias=params.lnf_bias.copy(),
        host_blocks=host_blocks,
        keys=keys,
        key_policy=key_policy,
        key_kind=key_kind,
        target_kappa=kappa,
        seed=seed,
    )
    return model, partition_report(config, model.lora_config)


def recover_plain_weights(pm: PartitionedModel) -> PlainParams:
    """De-obfuscate the host weights back into a plain parameter set (TEE-side op)."""
    blocks = []
    dt = pm.config.dtype
    for tb, hb in zip(pm.tee_blocks, pm.host_blocks):
        k_ai, k_ao = pm.keys[hb.keys.attn_in], pm.keys[hb.keys.attn_out]
        k_mi, k_mo = pm.keys[hb.keys.mlp_in], pm.keys[hb.keys.mlp_out]
        blocks.append(
            BlockParams(
                ln1_gain=tb.ln1_gain.copy(), ln1_bias=tb.ln1_bias.copy(),
                wq=_deobfuscate(hb.wq_star, k_ai, "left").astype(dt),
                wk=_deobfuscate(hb.wk_star, k_ai, "left").astype(dt),
                wv=_deobfuscate(hb.wv_star, k_ai, "left").astype(dt),
                bq=hb.bq.copy(), bk=hb.bk.copy(), bv=hb.bv.copy(),
                wo=_deobfuscate(hb.wo_star, k_ao, "right").astype(dt),
                bo=tb.bo.copy(),
                ln2_gain=tb.ln2_gain.copy(), ln2_bias=tb.ln2_bias.copy(),
                w1=_deobfuscate(hb.w1_star, k_mi, "left").astype(dt),
                b1=hb.b1.copy(),
                w2=_deobfuscate(hb.w2_star, k_mo, "right").astype(dt),
                b2=tb.b2.copy(),
            )
        )
    return PlainParams(
        config=pm.config,
        wte=pm.wte.copy(), wpe=pm.wpe.copy(),
        blocks=blocks,
        lnf_gain=pm.lnf_gain.copy(), lnf_bias=pm.lnf_bias.copy(),
    )


def recover_plain_adapters(pm: PartitionedModel) -> LoraAdapters | None:
    """Host LoRA factors mapped back to the plain basis (TEE-side op)."""
    if pm.lora_config is None:
        return None
    blocks = []
    dt = pm.config.dtype
    for hb in pm.host_blocks:
        site_map = {}
        for site in LORA_SITES:
            slot, side = SITE_KEYS[site]
            key = pm.keys[hb.keys.slot(slot)]
            ad = hb.lora[site]
            if side == "left":
                site_map[site] = LoraAdapter(a=_deobfuscate(ad.a, key, "left").astype(dt), b=ad.b.copy())
            else:
                site_map[site] = LoraAdapter(a=ad.a.copy(), b=_deobfuscate(ad.b, key, "right").astype(dt))
        blocks.append(site_map)
    return LoraAdapters(config=pm.lora_config, blocks=blocks)


def recover_plain_lora_grads(pm: PartitionedModel, host_grads):
    """Map host-basis LoRA gradients to the plain basis.

    Input-side factors: the host gradient is key^T times the plain gradient,
    so multiply by the inverse transpose. Output-side factors: the host
    gradient is the plain gradient times key^-T, so multiply by key^T.
    """
    out = []
    for hb, site_grads in zip(pm.host_blocks, host_grads):
        mapped = {}
        for site, (d_a, d_b) in site_grads.items():
            slot, side = SITE_KEYS[site]
            key = pm.keys[hb.keys.slot(slot)]
            if side == "left":
                d_a_plain = matmul(np.ascontiguousarray(key.r_inv.T), d_a.astype(np.float64)).astype(d_a.dtype)
                mapped[site] = (d_a_plain, d_b.copy())
            else:
                d_b_plain = matmul(d_b.astype(np.float64), np.ascontiguousarray(key.r.T)).astype(d_b.dtype)
                mapped[site] = (d_a.copy(), d_b_plain)
        out.append(mapped)
    return out


def reobfuscate(pm: PartitionedModel, new_seed: int):
    """Fresh keys, re-obfuscated host tensors; returns (model, wall_seconds).
    The effective adapters are preserved: the recovered plain-basis view is
    rotated into the new keys' bases."""
    t0 = time.perf_counter()
    plain = recover_plain_weights(pm)
    adapters = recover_plain_adapters(pm)
    new_model, _ = partition_model(
        plain, adapters,
        key_policy=pm.key_policy, key_kind=pm.key_kind, kappa=pm.target_kappa, seed=new_seed,
        adapter_basis="plain",
    )
    return new_model, time.perf_counter() - t0


def audit_host_tensors(pm: PartitionedModel, params: PlainParams):
    """Max abs difference between every host-resident base weight matrix and
    its plain counterpart. Zone hygiene wants these all well above zero for
    non-identity keys. Host-routed biases and LoRA factors are excluded: the
    biases are plain by design, and LoRA factors are data-derived randomness,
    not proprietary weights."""
    diffs = {}
    for i, hb in enumerate(pm.host_blocks):
        bp = params.blocks[i]
        for site in LORA_SITES:
            diffs[f"blk{i}.{site}"] = float(np.max(np.abs(hb.star(site) - getattr(bp, site))))
    return diffs
