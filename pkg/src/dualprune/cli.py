"""``dualprune`` command line: synth, prune, evaluate, verify.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 data error (bad manifest, unreadable or inconsistent files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, DataError, DualPruneError
from .evaluation import METHODS, emit_report, evaluate, read_selection, run_method, selection_to_dict
from .metrics import HeadReduce, QueryMode, Scorer, SimilaritySpace
from .selection import PenaltyForm, PruneConfig
from .tensor_io import SynthSpec, generate_synthetic_batch, load_batch, save_batch
from .verify import FAULTS, run_checks

log = logging.getLogger("dualprune")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

# lambda used by mmr-additive when --lambda is not given (its weight lives in [0, 1])
ADDITIVE_DEFAULT_LAMBDA = 0.5


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")
    return text == "on"


def _values(enum) -> list[str]:
    return [m.value for m in enum]


def _add_prune_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", required=True, help="batch manifest JSON")
    budget = p.add_mutually_exclusive_group()
    budget.add_argument("--budget", type=float, default=None, help="reduction ratio rho (fraction removed)")
    budget.add_argument("--keep-ratio", type=float, default=None, help="fraction of image tokens kept (1 - rho)")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="penalty strength (default 5)")
    p.add_argument("--b0", type=int, default=2, help="initial chunk size")
    p.add_argument("--growth", type=float, default=2.0, help="chunk growth factor g")
    p.add_argument("--penalty", choices=_values(PenaltyForm), default=PenaltyForm.POWER.value)
    p.add_argument("--scorer", choices=_values(Scorer), default=Scorer.IWP.value)
    p.add_argument("--space", choices=_values(SimilaritySpace), default=SimilaritySpace.DUAL_WEIGHT.value)
    p.add_argument("--query-mode", choices=_values(QueryMode), default=QueryMode.MEAN_TEXT.value)
    p.add_argument("--head-reduce", choices=_values(HeadReduce), default=HeadReduce.MEAN_OF_SQUARES.value)
    p.add_argument("--rope-magnitude", type=_on_off, default=False, metavar="{on,off}")
    p.add_argument("--rope-duplication", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="output file (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualprune", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dualprune {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a planted-redundancy batch")
    s.add_argument("--n-img", type=int, default=64)
    s.add_argument("--n-text", type=int, default=8)
    s.add_argument("--heads", type=int, default=2)
    s.add_argument("--dim", type=int, default=16)
    s.add_argument("--dim-v", type=int, default=None, help="value dim (default: --dim)")
    s.add_argument("--clusters", type=int, default=4)
    s.add_argument("--noise", type=float, default=0.05)
    s.add_argument("--key-norm-cap", type=float, default=None)
    s.add_argument("--amplitude-spread", type=float, default=0.2)
    s.add_argument("--layer", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--out", required=True, help="output directory")

    p = sub.add_parser("prune", help="select image tokens and print a selection JSON")
    p.add_argument("--method", choices=[m for m in METHODS if m != "none"], default="iwp")
    _add_prune_flags(p)

    e = sub.add_parser("evaluate", help="score selections against the full batch")
    e.add_argument("--methods", default=None, help="comma-separated methods to run inline")
    e.add_argument("--selection", action="append", default=[], help="selection JSON (repeatable)")
    e.add_argument("--format", choices=["json", "csv"], default="json")
    e.add_argument("--timing", action="store_true", help="record wall_time_ms (breaks byte-reproducibility)")
    _add_prune_flags(e)

    v = sub.add_parser("verify", help="run the identity/invariant suite")
    v.add_argument("--trials", type=int, default=500)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--break", dest="faults", action="append", default=[], choices=FAULTS,
                   help="inject a fault into one check (test hook)")
    return parser


def _config(args: argparse.Namespace, method: str | None = None) -> PruneConfig:
    if args.keep_ratio is not None:
        rho = 1.0 - args.keep_ratio
    elif args.budget is not None:
        rho = args.budget
    else:
        rho = 0.0
    lam = args.lam
    if lam is None:
        lam = ADDITIVE_DEFAULT_LAMBDA if method == "mmr-additive" else 5.0
    return PruneConfig(
        rho=rho,
        lam=lam,
        b0=args.b0,
        g=args.growth,
        penalty_form=args.penalty,
        scorer=args.scorer,
        space=args.space,
        query_mode=args.query_mode,
        rope_magnitude=args.rope_magnitude,
        rope_duplication=args.rope_duplication,
        rope_base=args.rope_base,
        head_reduce=args.head_reduce,
        seed=args.seed,
    )


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        H=args.heads,
        N_img=args.n_img,
        N_text=args.n_text,
        d=args.dim,
        d_v=args.dim_v if args.dim_v is not None else args.dim,
        cluster_count=args.clusters,
        cluster_noise=args.noise,
        key_norm_cap=args.key_norm_cap,
        value_amplitude_spread=args.amplitude_spread,
        seed=args.seed,
        layer=args.layer,
    )
    path = save_batch(generate_synthetic_batch(spec), args.out)
    print(path)
    return EXIT_OK


def cmd_prune(args: argparse.Namespace) -> int:
    cfg = _config(args, args.method)
    batch = load_batch(args.manifest)
    result = run_method(args.method, batch, cfg)
    doc = selection_to_dict(args.method, result, batch, cfg)
    _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()] if args.methods else []
    cfg = _config(args, methods[0] if len(methods) == 1 else None)
    batch = load_batch(args.manifest)
    selections = {}
    for path in args.selection:
        name, kept = read_selection(path, batch)
        if name in selections:
            name = f"{name}:{Path(path).name}"
        selections[name] = kept
    report = evaluate(batch, cfg, methods, selections, timing=args.timing)
    text = emit_report(report, args.format, args.out)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    if args.trials < 1:
        raise ConfigError("--trials must be >= 1")
    results = run_checks(args.trials, args.seed, set(args.faults))
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"verification failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "prune": cmd_prune, "evaluate": cmd_evaluate, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DualPruneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
