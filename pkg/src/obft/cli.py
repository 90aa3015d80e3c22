"""Command-line entry point.

Subcommands: equivalence, kappa-sweep, partition-report, train-toy, bench,
gen-matrix. Exit codes: 0 success, 1 failed assertion, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import PRESETS, ExperimentConfig, load_config
from .errors import ObftError


def _add_common(parser):
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--out", help="write the report CSV here")
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--precision", choices=("f32", "f64"))
    parser.add_argument("--seeds", help="comma-separated seed list")
    parser.add_argument("--seq-len", type=int, dest="seq_len")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--key-policy", choices=("shared", "per_block"), dest="key_policy")
    parser.add_argument("--key-kind", choices=("orthogonal", "prescribed", "raw"), dest="key_kind")
    parser.add_argument("--kappa", type=float)
    parser.add_argument("--corpus")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obft",
        description="Simulated two-zone execution of an obfuscated toy transformer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("equivalence", help="protected vs plain logits and loss")
    _add_common(p)
    p.add_argument("--two-process", action="store_true", dest="two_process",
                   help="run the host zone as a separate process and check both modes agree")

    p = sub.add_parser("kappa-sweep", help="forward divergence and final loss per condition number")
    _add_common(p)
    p.add_argument("--kappas", help="comma-separated condition-number grid")
    p.add_argument("--no-raw", action="store_true", help="skip the raw-random baseline column")
    p.add_argument("--assert-monotone", action="store_true", dest="assert_monotone",
                   help="exit 1 if the divergence column is not nondecreasing within a seed")

    p = sub.add_parser("partition-report", help="TEE/host parameter split for a preset")
    _add_common(p)

    p = sub.add_parser("train-toy", help="protected LoRA training run")
    _add_common(p)

    p = sub.add_parser("bench", help="protected/plain slowdown measurement")
    _add_common(p)
    p.add_argument("--repetitions", type=int)

    p = sub.add_parser("gen-matrix", help="generate an obfuscation key and report its condition number")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--kind", choices=("orthogonal", "prescribed", "raw"), default="orthogonal")
    p.add_argument("--kappa", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the key as an OBFT container")
    return parser


_OVERRIDE_FIELDS = ("preset", "precision", "seq_len", "steps", "lr", "key_policy",
                    "key_kind", "kappa", "corpus", "out", "repetitions")


def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(getattr(args, "config", None))
    updates = {}
    for name in _OVERRIDE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    if getattr(args, "seeds", None):
        updates["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "kappas", None):
        updates["kappas"] = tuple(float(k) for k in args.kappas.split(","))
    if getattr(args, "no_raw", False):
        updates["include_raw"] = False
    if getattr(args, "assert_monotone", False):
        updates["assert_monotone"] = True
    if getattr(args, "two_process", False):
        updates["two_process"] = True
    return replace(cfg, **updates)


def _emit(report, cfg: ExperimentConfig):
    if cfg.out:
        report.write(cfg.out)
        print(f"report: {cfg.out} ({len(report.rows)} rows)")
    else:
        for row in report.rows:
            print(",".join(row.as_record()))


def _cmd_equivalence(args) -> int:
    from .harness import run_equivalence

    cfg = _config_from_args(args)
    report, passed = run_equivalence(cfg)
    _emit(report, cfg)
    tol = 1e-4 if cfg.precision == "f32" else 1e-10
    print(f"equivalence: {'PASS' if passed else 'FAIL'} (tolerance {tol:g}, {len(cfg.seeds)} seed(s))")
    return 0 if passed else 1


def _cmd_kappa_sweep(args) -> int:
    from .harness import run_kappa_sweep

    cfg = _config_from_args(args)
    report, passed = run_kappa_sweep(cfg)
    _emit(report, cfg)
    if cfg.assert_monotone:
        print(f"kappa-sweep monotonicity: {'PASS' if passed else 'FAIL'}")
        return 0 if passed else 1
    return 0


def _cmd_partition_report(args) -> int:
    from .harness import run_partition_report

    cfg = _config_from_args(args)
    report, pr = run_partition_report(cfg)
    print(pr.as_text())
    if cfg.out:
        report.write(cfg.out)
        print(f"report: {cfg.out}")
    return 0


def _cmd_train_toy(args) -> int:
    from .harness import run_train_toy

    cfg = _config_from_args(args)
    report, passed = run_train_toy(cfg)
    _emit(report, cfg)
    print(f"train-toy: {'PASS' if passed else 'FAIL'} (final < initial loss)")
    return 0 if passed else 1


def _cmd_bench(args) -> int:
    from .harness import run_bench
    from .backend import backend_name

    cfg = _config_from_args(args)
    report, passed = run_bench(cfg)
    _emit(report, cfg)
    print(f"bench: kernel backend = {backend_name()}; {'PASS' if passed else 'FAIL'} (ratio >= 1)")
    return 0 if passed else 1


def _cmd_gen_matrix(args) -> int:
    from .container import save_key
    from .obfmat import KeyKind, make_key

    kind = {"orthogonal": KeyKind.ORTHOGONAL, "prescribed": KeyKind.PRESCRIBED_KAPPA,
            "raw": KeyKind.RAW_RANDOM}[args.kind]
    key = make_key(kind, args.n, args.seed, kappa=args.kappa)
    print(f"kind: {key.kind.value}")
    print(f"n: {key.n}")
    print(f"seed: {key.seed}")
    if key.target_kappa is not None:
        print(f"target_kappa: {key.target_kappa:g}")
    print(f"measured_kappa: {key.measured_kappa:.6g}")
    if args.out:
        save_key(args.out, key)
        print(f"container: {args.out}")
    return 0


_COMMANDS = {
    "equivalence": _cmd_equivalence,
    "kappa-sweep": _cmd_kappa_sweep,
    "partition-report": _cmd_partition_report,
    "train-toy": _cmd_train_toy,
    "bench": _cmd_bench,
    "gen-matrix": _cmd_gen_matrix,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ObftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
