"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s`. Criteria and tolerances are
pinned here; the kappa-sweep training settings (steps=400, lr=0.03, seq 64)
are the calibrated defaults recorded in the suite itself so reruns are
deterministic.
"""

import math
import socket
import struct
import subprocess
import sys
import textwrap
import time

import numpy as np
import pytest

from obft.config import ExperimentConfig
from obft.harness import (
    batch_from_corpus,
    default_corpus,
    final_loss_of,
    run_bench,
    run_kappa_sweep,
    train_plain,
    train_protected,
)
from obft.model import (
    LORA_SITES,
    LoraConfig,
    ModelConfig,
    forward_plain,
    init_lora,
    init_params,
)
from obft.numerics import Precision
from obft.obfmat import KeyKind, random_orthogonal, random_prescribed_kappa
from obft.partition import partition_model, recover_plain_adapters
from obft.rng import substream
from obft.zones import (
    AuthToken,
    HOST_TO_TEE,
    TEE_TO_HOST,
    serve_zones,
    wrap_batch,
)

SECRET = b"acceptance-secret"
TOKEN = AuthToken("data-owner", SECRET)

TOY = dict(n_layer=4, n_head=4, d_model=128, d_ff=512, vocab_size=256, context_len=128)
# Training-run settings, calibrated once and frozen: criterion 2 wants a clean
# loss decrease (lr 0.03); the kappa sweep wants the baseline learning and the
# ill-conditioned columns visibly degraded (lr 0.12, 300 steps).
TRAIN_LR = 3e-2
SWEEP_STEPS = 300
SWEEP_LR = 1.2e-1
SWEEP_SEQ = 64


def _report(num, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}"
    print(f"\n{line}")
    assert ok, line


def _toy_model(precision, seed, lora_dropout=0.05, randomize_b=True):
    cfg = ModelConfig(precision=precision, **TOY)
    params = init_params(cfg, seed)
    adapters = init_lora(cfg, LoraConfig(rank=16, alpha=32.0, dropout=lora_dropout), seed + 1)
    if randomize_b:
        g = substream(seed, "acceptance-b")
        for block in adapters.blocks:
            for ad in block.values():
                ad.b += (g.standard_normal(ad.b.shape) * 0.02).astype(ad.b.dtype)
    return cfg, params, adapters


def test_criterion_1_forward_equivalence():
    """Toy config, 100 seeds, orthogonal keys: protected logits match plain."""
    t0 = time.perf_counter()
    corpus = default_corpus()
    worst = {}
    for precision, tol in ((Precision.F32, 1e-4), (Precision.F64, 1e-10)):
        worst_diff = 0.0
        for seed in range(100):
            cfg, params, adapters = _toy_model(precision, seed)
            pm, _ = partition_model(params, adapters, key_policy="shared",
                                    key_kind=KeyKind.ORTHOGONAL, seed=seed)
            view = recover_plain_adapters(pm)
            batch = batch_from_corpus(corpus, 32, seed, 0)
            plain = forward_plain(params, view, batch)
            executor = serve_zones(pm, "in_process", auth_secret=SECRET)
            try:
                prot, _ = executor.forward(wrap_batch(batch), TOKEN)
            finally:
                executor.close()
            worst_diff = max(worst_diff, float(np.max(np.abs(
                prot.astype(np.float64) - plain.astype(np.float64)))))
        worst[precision] = (worst_diff, tol)
    elapsed = time.perf_counter() - t0
    ok = all(diff <= tol for diff, tol in worst.values())
    _report(1, ok,
            f"equivalence over 100 seeds: f32 max abs diff {worst[Precision.F32][0]:.3g} "
            f"(tol 1e-4), f64 {worst[Precision.F64][0]:.3g} (tol 1e-10); {elapsed:.0f}s")


def test_criterion_2_training_equivalence():
    """200 protected vs 200 plain LoRA steps, shared seeds and masks."""
    t0 = time.perf_counter()
    corpus = default_corpus()
    seed = 0
    cfg, params, adapters = _toy_model(Precision.F32, seed, randomize_b=False)
    pm, _ = partition_model(params, adapters, key_policy="shared",
                            key_kind=KeyKind.ORTHOGONAL, seed=seed)
    plain_view = recover_plain_adapters(pm)

    losses_prot, _ = train_protected(pm, corpus, 200, TRAIN_LR, SWEEP_SEQ, seed)
    losses_plain, _ = train_plain(params, plain_view, corpus, 200, TRAIN_LR, SWEEP_SEQ, seed)

    rels = [abs(p - q) / max(abs(q), 1e-12) for p, q in zip(losses_prot, losses_plain)]
    worst_rel = max(rels)
    final = final_loss_of(losses_prot)
    decreased = math.isfinite(final) and final < losses_prot[0]
    elapsed = time.perf_counter() - t0
    ok = worst_rel <= 1e-3 and decreased
    _report(2, ok,
            f"200-step training: worst per-step loss rel diff {worst_rel:.3g} (tol 1e-3), "
            f"loss {losses_prot[0]:.3f} -> {final:.3f} (must decrease); {elapsed:.0f}s")


def test_criterion_3_gradient_correctness():
    """Protected-path LoRA gradients vs central finite differences (F64)."""
    t0 = time.perf_counter()
    h = 1e-3
    worst = 0.0
    for draw in range(20):
        cfg = ModelConfig(n_layer=1, n_head=2, d_model=8, d_ff=32, vocab_size=11,
                          context_len=16, precision=Precision.F64)
        params = init_params(cfg, 1000 + draw)
        adapters = init_lora(cfg, LoraConfig(rank=2, alpha=4.0, dropout=0.0), 2000 + draw)
        g = substream(draw, "acceptance-fd-b")
        for block in adapters.blocks:
            for ad in block.values():
                ad.b += g.standard_normal(ad.b.shape) * 0.02
        pm, _ = partition_model(params, adapters, key_policy="per_block",
                                key_kind=KeyKind.ORTHOGONAL, seed=3000 + draw)
        gen = substream(draw, "acceptance-fd-batch")
        tokens = gen.integers(0, 11, 6)
        targets = gen.integers(0, 11, 6)
        from obft.model import TokenBatch

        env = wrap_batch(TokenBatch(tokens, targets))
        executor = serve_zones(pm, "in_process", auth_secret=SECRET)
        try:
            def loss_at_point():
                return executor.train_step(env, TOKEN, 0.0, mask_seed=0, step=0)[0]

            loss_at_point()
            grads = [{site: (d_a.copy(), d_b.copy()) for site, (d_a, d_b) in blk.items()}
                     for blk in executor.host_lora_grads()]
            host_lora = pm.host_blocks[0].lora
            for site in LORA_SITES:
                for factor_name, got in (("a", grads[0][site][0]), ("b", grads[0][site][1])):
                    tensor = getattr(host_lora[site], factor_name)
                    fd = np.zeros(tensor.shape)
                    flat = tensor.reshape(-1)
                    fd_flat = fd.reshape(-1)
                    for idx in range(flat.size):
                        keep = flat[idx]
                        flat[idx] = keep + h
                        up = loss_at_point()
                        flat[idx] = keep - h
                        down = loss_at_point()
                        flat[idx] = keep
                        fd_flat[idx] = (up - down) / (2 * h)
                    denom = max(np.linalg.norm(fd), np.linalg.norm(got), 1e-30)
                    rel = float(np.linalg.norm(fd - got) / denom)
                    worst = max(worst, rel)
        finally:
            executor.close()
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4
    _report(3, ok,
            f"protected LoRA gradients vs central differences (h=1e-3, F64, 20 draws): "
            f"worst per-tensor relative error {worst:.3g} (tol 1e-4); {elapsed:.0f}s")


def test_criterion_4_partition_fraction(capsys):
    """CLI partition-report for the GPT2-XL dims lands in [0.049, 0.055]."""
    from obft.cli import main

    code = main(["partition-report", "--preset", "gpt2-xl"])
    out = capsys.readouterr().out
    fraction = float(next(l for l in out.splitlines() if l.startswith("tee_fraction:")).split()[1])
    with capsys.disabled():
        _report(4, code == 0 and 0.049 <= fraction <= 0.055,
                f"gpt2-xl tee_fraction {fraction:.4f} in [0.049, 0.055]")


def _finite_or_inf(x):
    return x if math.isfinite(x) else math.inf


SWEEP_GRID = (1.0, 8.0, 32.0, 128.0, 1e3, 1e4)


@pytest.fixture(scope="module")
def kappa_sweep_results():
    """One shared sweep run: forward divergence over 10 seeds, training over 4."""
    t0 = time.perf_counter()
    div_cfg = ExperimentConfig(preset="toy", kappas=SWEEP_GRID, include_raw=False,
                               seeds=tuple(range(10)), steps=0, seq_len=SWEEP_SEQ)
    div_report, _ = run_kappa_sweep(div_cfg)
    div_means = [float(np.mean(div_report.values("forward_divergence", f"{k:g}")))
                 for k in SWEEP_GRID]

    train_cfg = ExperimentConfig(preset="toy", kappas=SWEEP_GRID, include_raw=True,
                                 seeds=(0, 1, 2, 3), steps=SWEEP_STEPS, lr=SWEEP_LR,
                                 seq_len=SWEEP_SEQ)
    train_report, _ = run_kappa_sweep(train_cfg)

    def mean_final(label):
        vals = [_finite_or_inf(v) for v in train_report.values("final_loss", label)]
        return float(np.mean(vals)) if vals else math.nan

    finals = {f"{k:g}": mean_final(f"{k:g}") for k in SWEEP_GRID}
    finals["random"] = mean_final("random")
    return div_means, finals, time.perf_counter() - t0


def test_criterion_5a_divergence_monotone_in_kappa(kappa_sweep_results):
    """Mean forward divergence nondecreasing in kappa over 10 seeds."""
    div_means, _, elapsed = kappa_sweep_results
    monotone = all(b >= a for a, b in zip(div_means, div_means[1:]))
    _report("5a", monotone,
            f"mean forward divergence over kappa {list(SWEEP_GRID)}: "
            f"{['%.2e' % m for m in div_means]} nondecreasing={monotone}; "
            f"sweep total {elapsed:.0f}s")


def test_criterion_5b_high_kappa_training_degrades(kappa_sweep_results):
    """Mean final loss at kappa >= 1e3 exceeds the kappa=1 final by >= 10%."""
    _, finals, _ = kappa_sweep_results
    base = finals["1"]
    ok = finals["1000"] >= 1.1 * base and finals["10000"] >= 1.1 * base
    _report("5b", ok,
            f"mean final loss: kappa=1 {base:.3f}, kappa=1e3 {finals['1000']:.3f} "
            f"(x{finals['1000'] / base:.3f}), kappa=1e4 {finals['10000']:.3f} "
            f"(x{finals['10000'] / base:.3f}); both must be >= {1.1 * base:.3f}")


def test_criterion_5c_raw_no_better_than_worst_prescribed(kappa_sweep_results):
    """Raw-random keys must perform no better (mean final loss no lower) than
    the worst prescribed-kappa point.

    Expected red at this scale: a raw Gaussian key at n=128 measures
    kappa ~ 3e2, better conditioned than the grid's 1e3/1e4 points, and under
    float32 its training degrades (clearly worse than kappa=1) without quite
    reaching the deliberately degraded columns.
    """
    _, finals, _ = kappa_sweep_results
    worst_prescribed = max(v for k, v in finals.items() if k != "random")
    ok = finals["random"] >= worst_prescribed
    _report("5c", ok,
            f"raw mean final loss {finals['random']:.3f} vs worst prescribed "
            f"{worst_prescribed:.3f} (raw must not be lower); "
            f"kappa=1 baseline {finals['1']:.3f}")


def test_criterion_6_generator_contracts():
    """Orthogonal keys: kappa 1 and exact-transpose inverse. Prescribed keys
    hit their target within 1%."""
    t0 = time.perf_counter()
    ok = True
    details = []
    for n in (16, 64, 256):
        for seed in (0, 1):
            key = random_orthogonal(n, seed)
            if abs(key.measured_kappa - 1.0) > 1e-6 or not np.array_equal(key.r_inv, key.r.T):
                ok = False
                details.append(f"orthogonal n={n} seed={seed} failed")
    worst_rel = 0.0
    for target in (8.0, 32.0, 128.0, 160.0):
        for n in (64, 256):
            key = random_prescribed_kappa(n, target, seed=7)
            rel = abs(key.measured_kappa - target) / target
            worst_rel = max(worst_rel, rel)
            if rel > 0.01:
                ok = False
                details.append(f"prescribed n={n} target={target} measured {key.measured_kappa}")
    elapsed = time.perf_counter() - t0
    _report(6, ok,
            f"orthogonal kappa=1+-1e-6 with exact transpose inverse; prescribed targets "
            f"{{8,32,128,160}} x n in {{64,256}} worst rel error {worst_rel:.2e} (tol 1%); "
            f"{'; '.join(details) if details else 'all hit'}; {elapsed:.0f}s")


def test_criterion_7_ledger_exactness():
    """Crossings = 4 n_layer per forward pass; bytes = elements x item size."""
    t0 = time.perf_counter()
    ok = True
    details = []
    for n_layer in (1, 2, 4, 8):
        cfg = ModelConfig(n_layer=n_layer, n_head=2, d_model=32, vocab_size=64, context_len=32)
        params = init_params(cfg, n_layer)
        adapters = init_lora(cfg, LoraConfig(rank=4, alpha=8.0, dropout=0.05), n_layer + 1)
        pm, _ = partition_model(params, adapters, seed=n_layer)
        batch = batch_from_corpus(default_corpus(), 16, n_layer, 0, vocab_size=64)
        executor = serve_zones(pm, "in_process", auth_secret=SECRET)
        try:
            for mode in ("eval", "train"):
                _, ledger = executor.forward(wrap_batch(batch), TOKEN, mode=mode)
                if ledger.count() != 4 * n_layer:
                    ok = False
                    details.append(f"n_layer={n_layer} mode={mode}: {ledger.count()} crossings")
                itemsize = cfg.precision.itemsize
                if any(c.nbytes != c.elements * itemsize for c in ledger.crossings):
                    ok = False
                    details.append(f"n_layer={n_layer} mode={mode}: byte totals off")
                totals = ledger.totals()
                for direction in (TEE_TO_HOST, HOST_TO_TEE):
                    if totals[direction]["bytes"] != totals[direction]["elements"] * itemsize:
                        ok = False
        finally:
            executor.close()
    elapsed = time.perf_counter() - t0
    _report(7, ok,
            f"crossing count == 4 x n_layer for n_layer in {{1,2,4,8}} (eval and train), "
            f"byte totals exact{'; ' + '; '.join(details) if details else ''}; {elapsed:.0f}s")


_FAULT_DRIVER = textwrap.dedent("""
    import socket, struct, sys, threading
    import numpy as np
    from obft import wire
    from obft.errors import ProtocolError, TransportError
    from obft.numerics import Precision
    from obft.zones import RemoteBoundary, ZoneLedger

    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.bind(("127.0.0.1", 0))
    server.listen(1)
    port = server.getsockname()[1]

    def fake_host():
        conn, _ = server.accept()
        stream = conn.makefile("rwb")
        try:
            while True:
                msg_type, _ = wire.read_frame(stream)
                if msg_type == wire.MSG_COMPUTE:
                    conn.sendall(struct.pack("<IB", 400, wire.MSG_RESULT) + b"zz")
                    conn.shutdown(socket.SHUT_WR)
                    return
        except Exception:
            pass

    threading.Thread(target=fake_host, daemon=True).start()
    sock = socket.create_connection(("127.0.0.1", port), timeout=15)
    sock.settimeout(15)
    boundary = RemoteBoundary(sock, Precision.F32, retries=0)
    boundary.handshake(b"session")
    try:
        boundary.call("attention", 0, {"x": np.zeros((2, 4), np.float32)}, ZoneLedger())
    except (ProtocolError, TransportError) as exc:
        print(f"clean protocol error: {exc}")
        sys.exit(1)
    sys.exit(0)
""")


def test_criterion_8_mode_equivalence():
    """in_process and two_process logits bitwise identical over 10 seeds; a
    truncated frame yields a clean error and nonzero exit, with no hang."""
    t0 = time.perf_counter()
    corpus = default_corpus()
    all_bitwise = True
    for seed in range(10):
        cfg, params, adapters = _toy_model(Precision.F32, seed)
        pm, _ = partition_model(params, adapters, key_policy="shared", seed=seed)
        batch = batch_from_corpus(corpus, 32, seed, 0)
        env = wrap_batch(batch)
        in_proc = serve_zones(pm, "in_process", auth_secret=SECRET)
        try:
            ref, _ = in_proc.forward(env, TOKEN)
        finally:
            in_proc.close()
        remote = serve_zones(pm, "two_process", auth_secret=SECRET)
        try:
            got, _ = remote.forward(env, TOKEN)
        finally:
            remote.close()
        if got.tobytes() != ref.tobytes():
            all_bitwise = False

    proc = subprocess.run([sys.executable, "-c", _FAULT_DRIVER],
                          capture_output=True, text=True, timeout=60)
    fault_ok = proc.returncode == 1 and "clean protocol error" in proc.stdout

    elapsed = time.perf_counter() - t0
    _report(8, all_bitwise and fault_ok,
            f"10/10 seeds bitwise identical across modes: {all_bitwise}; truncated-frame "
            f"driver exit={proc.returncode} (want 1, got clean error: {fault_ok}); {elapsed:.0f}s")


def test_criterion_9_slowdown_measurement():
    """Bench completes and the in-process protected/plain ratio is >= 1."""
    t0 = time.perf_counter()
    cfg = ExperimentConfig(preset="toy", seeds=(0,), seq_len=SWEEP_SEQ, repetitions=7)
    report, passed = run_bench(cfg)
    ratio = report.values("slowdown_ratio")[0]
    t_prot = report.values("t_protected_s")[0]
    t_plain = report.values("t_plain_s")[0]
    elapsed = time.perf_counter() - t0
    _report(9, passed and ratio >= 1.0,
            f"protected {t_prot * 1e3:.1f}ms vs plain {t_plain * 1e3:.1f}ms, "
            f"ratio {ratio:.2f} (>= 1 required); {elapsed:.0f}s")
