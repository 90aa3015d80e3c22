"""Experiment drivers and structured result emission.

Every driver takes an ExperimentConfig and returns an ExperimentReport whose
rows are (experiment, config_digest, seed, kappa, metric, value). Reports are
deterministic for a fixed config: all randomness flows through per-seed
substreams, so identical configs emit byte-identical CSV files. Timing metrics
(the bench driver) are inherently machine-dependent and are the one exception.
"""

from __future__ import annotations

import csv
import importlib.resources
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import ObftError
from .model import (
    LoraAdapters,
    PlainParams,
    TokenBatch,
    forward_plain,
    init_lora,
    init_params,
    loss_and_grads_plain,
    sgd_step,
)
from .obfmat import KeyKind
from .partition import partition_model, partition_report
from .rng import substream
from .zones import AuthToken, measure_slowdown, serve_zones, wrap_batch

CSV_HEADER = ("experiment", "config_digest", "seed", "kappa", "metric", "value")

# Sentinel recorded when a training run diverges to a non-finite loss.
DIVERGED = float("nan")

_HARNESS_SECRET = b"obft-harness-session"
_TOKEN = AuthToken("data-owner", _HARNESS_SECRET)


@dataclass
class ReportRow:
    experiment: str
    config_digest: str
    seed: int
    kappa: str
    metric: str
    value: float

    def as_record(self):
        return (self.experiment, self.config_digest, str(self.seed), self.kappa,
                self.metric, repr(float(self.value)))


@dataclass
class ExperimentReport:
    rows: list = field(default_factory=list)

    def add(self, experiment, digest, seed, kappa, metric, value):
        self.rows.append(ReportRow(experiment, digest, int(seed), str(kappa), metric, float(value)))

    def write(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_HEADER)
            for row in self.rows:
                writer.writerow(row.as_record())

    @staticmethod
    def read(path) -> "ExperimentReport":
        report = ExperimentReport()
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != CSV_HEADER:
                raise ObftError(f"unexpected CSV header {header}")
            for rec in reader:
                report.add(rec[0], rec[1], int(rec[2]), rec[3], rec[4], float(rec[5]))
        return report

    def values(self, metric: str, kappa: str | None = None):
        return [r.value for r in self.rows
                if r.metric == metric and (kappa is None or r.kappa == kappa)]


def default_corpus() -> bytes:
    return importlib.resources.files("obft.data").joinpath("tiny_corpus.txt").read_bytes()


def load_corpus(cfg: ExperimentConfig) -> bytes:
    if cfg.corpus is None:
        return default_corpus()
    with open(cfg.corpus, "rb") as fh:
        return fh.read()


def batch_from_corpus(corpus: bytes, seq_len: int, seed: int, step: int,
                      with_targets: bool = True, vocab_size: int = 256) -> TokenBatch:
    """Deterministic window sample; targets are the next-byte sequence.
    Byte values are folded modulo the vocab for sub-byte toy vocabularies."""
    data = np.frombuffer(corpus, dtype=np.uint8)
    span = seq_len + (1 if with_targets else 0)
    if len(data) < span:
        raise ObftError(f"corpus of {len(data)} bytes is too short for seq_len {seq_len}")
    offset = int(substream(seed, "batch", step).integers(0, len(data) - span + 1))
    window = data[offset : offset + span].astype(np.int64) % vocab_size
    tokens = window[:seq_len]
    targets = window[1 : seq_len + 1] if with_targets else None
    return TokenBatch(tokens, targets)


def build_model(cfg: ExperimentConfig, seed: int):
    model_cfg = cfg.model_config()
    params = init_params(model_cfg, seed)
    adapters = init_lora(model_cfg, cfg.lora_config(), seed)
    return params, adapters


KEY_KINDS = {
    "orthogonal": KeyKind.ORTHOGONAL,
    "prescribed": KeyKind.PRESCRIBED_KAPPA,
    "prescribed_kappa": KeyKind.PRESCRIBED_KAPPA,
    "raw": KeyKind.RAW_RANDOM,
    "raw_random": KeyKind.RAW_RANDOM,
}


def _partition_for(cfg: ExperimentConfig, params, adapters, seed, kind=None, kappa=None):
    if kind is None:
        if cfg.key_kind not in KEY_KINDS:
            raise ObftError(f"unknown key kind {cfg.key_kind!r} (have {sorted(KEY_KINDS)})")
        kind = KEY_KINDS[cfg.key_kind]
    if kind is KeyKind.PRESCRIBED_KAPPA and kappa is None:
        kappa = cfg.kappa if cfg.kappa is not None else 1.0
    pm, _ = partition_model(params, adapters, key_policy=cfg.key_policy,
                            key_kind=kind, kappa=kappa, seed=seed)
    return pm


def _equivalence_tolerance(cfg: ExperimentConfig) -> float:
    return 1e-4 if cfg.precision == "f32" else 1e-10


def run_equivalence(cfg: ExperimentConfig):
    """Protected vs plain logits and loss, per seed; pass/fail at the
    precision-matched tolerance. With two_process=true it also checks that the
    remote mode reproduces the in-process logits bit for bit."""
    report = ExperimentReport()
    digest = cfg.digest()
    corpus = load_corpus(cfg)
    tol = _equivalence_tolerance(cfg)
    passed = True
    mode = "two_process" if cfg.two_process else "in_process"

    for seed in cfg.seeds:
        params, adapters = build_model(cfg, seed)
        pm = _partition_for(cfg, params, adapters, seed)
        batch = batch_from_corpus(corpus, cfg.seq_len, seed, step=0,
                                  vocab_size=params.config.vocab_size)
        envelope = wrap_batch(batch)

        logits_plain = forward_plain(params, adapters, batch)
        executor = serve_zones(pm, mode, auth_secret=_HARNESS_SECRET)
        try:
            logits_prot, _ = executor.forward(envelope, _TOKEN)
            if cfg.two_process:
                in_proc = serve_zones(pm, "in_process", auth_secret=_HARNESS_SECRET)
                try:
                    logits_ref, _ = in_proc.forward(envelope, _TOKEN)
                finally:
                    in_proc.close()
                identical = float(logits_prot.tobytes() == logits_ref.tobytes())
                report.add("equivalence", digest, seed, "-", "mode_bitwise_equal", identical)
                passed = passed and identical == 1.0
        finally:
            executor.close()

        max_diff = float(np.max(np.abs(logits_prot.astype(np.float64) - logits_plain.astype(np.float64))))
        loss_plain, _ = loss_and_grads_plain(params, adapters, batch, mode="train",
                                             mask_seed=seed, step=0)
        pm_loss = _partition_for(cfg, params, adapters, seed)
        loss_prot, _, _ = _protected_loss(pm_loss, batch, lr=0.0, mask_seed=seed, step=0)
        loss_rel = abs(loss_prot - loss_plain) / max(abs(loss_plain), 1e-12)

        report.add("equivalence", digest, seed, "-", "max_abs_logit_diff", max_diff)
        report.add("equivalence", digest, seed, "-", "loss_rel_diff", loss_rel)
        passed = passed and max_diff <= tol
    return report, passed


def _protected_loss(pm, batch, lr, mask_seed, step):
    executor = serve_zones(pm, "in_process", auth_secret=_HARNESS_SECRET)
    try:
        return executor.train_step(wrap_batch(batch), _TOKEN, lr, mask_seed=mask_seed, step=step)
    finally:
        executor.close()


def final_loss_of(losses, tail: int = 10) -> float:
    """Smoothed end-of-run loss: mean of the last `tail` per-step losses. A
    diverged run (any non-finite entry in the tail) reports the NaN sentinel."""
    window = losses[-tail:] if len(losses) >= tail else losses
    if not window or not all(math.isfinite(x) for x in window):
        return DIVERGED
    return float(np.mean(window))


def train_protected(pm, corpus: bytes, steps: int, lr: float, seq_len: int, seed: int):
    """Protected LoRA training; returns per-step losses (NaN-padded after a
    divergence) and the executor's final ledger."""
    losses = []
    executor = serve_zones(pm, "in_process", auth_secret=_HARNESS_SECRET)
    ledger = None
    vocab = pm.config.vocab_size
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            for step in range(steps):
                batch = batch_from_corpus(corpus, seq_len, seed, step, vocab_size=vocab)
                loss, _, ledger = executor.train_step(
                    wrap_batch(batch), _TOKEN, lr, mask_seed=seed, step=step)
                losses.append(loss)
                if not math.isfinite(loss):
                    losses.extend([DIVERGED] * (steps - len(losses)))
                    break
    finally:
        executor.close()
    return losses, ledger


def train_plain(params: PlainParams, adapters: LoraAdapters, corpus: bytes,
                steps: int, lr: float, seq_len: int, seed: int):
    losses = []
    vocab = params.config.vocab_size
    with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
        for step in range(steps):
            batch = batch_from_corpus(corpus, seq_len, seed, step, vocab_size=vocab)
            loss, grads = loss_and_grads_plain(params, adapters, batch, mode="train",
                                               mask_seed=seed, step=step)
            losses.append(loss)
            if not math.isfinite(loss):
                losses.extend([DIVERGED] * (steps - len(losses)))
                break
            adapters = sgd_step(adapters, grads, lr)
    return losses, adapters


def run_kappa_sweep(cfg: ExperimentConfig):
    """Forward divergence and final training loss per condition number.

    Columns: the prescribed-kappa grid from cfg.kappas plus (optionally) the
    raw-random baseline recorded under kappa="random". A non-finite training
    loss is recorded as the NaN sentinel (treated as worst-possible by the
    monotonicity checks)."""
    report = ExperimentReport()
    digest = cfg.digest()
    corpus = load_corpus(cfg)
    passed = True

    columns = [(f"{k:g}", KeyKind.PRESCRIBED_KAPPA, float(k)) for k in cfg.kappas]
    if cfg.include_raw:
        columns.append(("random", KeyKind.RAW_RANDOM, None))

    divergences = {}
    for label, kind, kappa in columns:
        for seed in cfg.seeds:
            params, adapters = build_model(cfg, seed)
            pm = _partition_for(cfg, params, adapters, seed, kind=kind, kappa=kappa)
            measured = max(k.measured_kappa for k in pm.keys.values())

            batch = batch_from_corpus(corpus, cfg.seq_len, seed, step=0,
                                      vocab_size=params.config.vocab_size)
            logits_plain = forward_plain(params, adapters, batch).astype(np.float64)
            executor = serve_zones(pm, "in_process", auth_secret=_HARNESS_SECRET)
            try:
                logits_prot, _ = executor.forward(wrap_batch(batch), _TOKEN)
            finally:
                executor.close()
            divergence = float(np.max(np.abs(logits_prot.astype(np.float64) - logits_plain)))

            report.add("kappa_sweep", digest, seed, label, "measured_kappa", measured)
            report.add("kappa_sweep", digest, seed, label, "forward_divergence", divergence)
            if cfg.steps > 0:
                losses, _ = train_protected(pm, corpus, cfg.steps, cfg.lr, cfg.seq_len, seed)
                report.add("kappa_sweep", digest, seed, label, "initial_loss", losses[0])
                report.add("kappa_sweep", digest, seed, label, "final_loss", final_loss_of(losses))
            divergences.setdefault(seed, []).append((label, divergence))

    if cfg.assert_monotone:
        for seed, column in divergences.items():
            prescribed = [d for label, d in column if label != "random"]
            if any(b < a for a, b in zip(prescribed, prescribed[1:])):
                passed = False
    return report, passed


def run_partition_report(cfg: ExperimentConfig):
    report = ExperimentReport()
    digest = cfg.digest()
    model_cfg = cfg.model_config()
    pr = partition_report(model_cfg, cfg.lora_config())
    report.add("partition_report", digest, 0, "-", "tee_fraction", pr.tee_fraction)
    report.add("partition_report", digest, 0, "-", "tee_param_count", pr.tee_param_count)
    report.add("partition_report", digest, 0, "-", "host_param_count", pr.host_param_count)
    for name, value in pr.breakdown.items():
        report.add("partition_report", digest, 0, "-", f"count_{name}", value)
    return report, pr


def run_train_toy(cfg: ExperimentConfig):
    """Protected LoRA training on the toy corpus; per-seed loss trajectory."""
    report = ExperimentReport()
    digest = cfg.digest()
    corpus = load_corpus(cfg)
    passed = True
    for seed in cfg.seeds:
        params, adapters = build_model(cfg, seed)
        pm = _partition_for(cfg, params, adapters, seed)
        losses, _ = train_protected(pm, corpus, cfg.steps, cfg.lr, cfg.seq_len, seed)
        final = final_loss_of(losses)
        report.add("train_toy", digest, seed, "-", "initial_loss", losses[0])
        report.add("train_toy", digest, seed, "-", "final_loss", final)
        stride = max(1, cfg.steps // 20)
        for step in range(0, cfg.steps, stride):
            report.add("train_toy", digest, seed, "-", f"loss_step_{step:05d}", losses[step])
        ok = math.isfinite(final) and final < losses[0]
        passed = passed and ok
    return report, passed


def run_bench(cfg: ExperimentConfig):
    """Protected/plain forward slowdown; ratio is reported, not asserted
    against any particular hardware."""
    from .backend import backend_name

    report = ExperimentReport()
    digest = cfg.digest()
    corpus = load_corpus(cfg)
    passed = True
    for seed in cfg.seeds:
        params, adapters = build_model(cfg, seed)
        pm = _partition_for(cfg, params, adapters, seed)
        batch = batch_from_corpus(corpus, cfg.seq_len, seed, step=0,
                                  vocab_size=params.config.vocab_size)
        t_prot, t_plain, ratio = measure_slowdown(pm, params, adapters, batch,
                                                  repetitions=cfg.repetitions)
        report.add("bench", digest, seed, "-", "t_protected_s", t_prot)
        report.add("bench", digest, seed, "-", "t_plain_s", t_plain)
        report.add("bench", digest, seed, "-", "slowdown_ratio", ratio)
        report.add("bench", digest, seed, "-", "kernel_backend_compiled", 1.0 if backend_name() == "compiled" else 0.0)
        passed = passed and t_plain > 0 and ratio >= 1.0
    return report, passed
