"""Command-line entry point.

Every run writes a manifest next to its primary output; ``localcal replay``
re-executes a manifest and checks that the outputs are byte-identical.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, IoFailure, LocalCalError, NumericalError

log = logging.getLogger("localcal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _sizes(text: str) -> dict:
    out = {}
    for item in text.split(","):
        k, _, v = item.partition("=")
        out[k.strip()] = int(v)
    return out


# --------------------------------------------------------------------------
# run context


class Run:
    """Collects inputs, outputs and resolved config for the manifest."""

    def __init__(self, command: str, argv: list[str], threads: int):
        self.command = command
        self.argv = argv
        self.threads = threads
        self.config: dict = {}
        self.inputs: dict = {}
        self.outputs: list = []
        self.seed = None
        self.start = time.perf_counter()

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise IoFailure(f"input file not found: {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def output(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p))
        return p

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "version": __version__,
            "inputs": self.inputs,
            "outputs": {p: _sha256(p) for p in self.outputs if Path(p).exists()},
            "threads": self.threads,
            "wall_clock_s": round(time.perf_counter() - self.start, 3),
        }


def _manifest_path(args, run: Run) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if run.outputs:
        return Path(run.outputs[0] + ".manifest.json")
    return None


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, run: Run) -> int:
    from .dataset import save_dataset
    from .synth import default_benchmark, generate, load_synth_spec, spec_to_dict

    overrides = {"seed": args.seed, "n": args.n}
    if args.spec:
        spec = load_synth_spec(run.input(args.spec), **overrides)
    else:
        spec = replace(default_benchmark(), **{k: v for k, v in overrides.items() if v is not None})
    d, p_true = generate(spec)
    run.seed = spec.seed
    run.config = {"spec": spec_to_dict(spec), "format": args.format}
    save_dataset(d, run.output(args.out), format=args.format)
    if args.truth:
        np.savetxt(run.output(args.truth), p_true, delimiter=",", fmt="%.17g")
    log.info("wrote %d rows (C=%d, m=%d) to %s", d.n, d.C, d.m, args.out)
    return EXIT_OK


def cmd_split(args, run: Run) -> int:
    from .dataset import SplitSpec, load_dataset, save_dataset, split

    d = load_dataset(run.input(args.data))
    fracs = []
    for item in args.fractions.split(","):
        name, _, val = item.partition("=")
        fracs.append((name.strip(), float(val)))
    parts = split(d, SplitSpec(tuple(fracs), args.seed))
    # every part carries the first part's label frequencies as its priors
    priors = parts[0].label_priors()
    run.seed = args.seed
    run.config = {"fractions": fracs, "priors_from": fracs[0][0]}
    for (name, _), part in zip(fracs, parts):
        out = f"{args.out_prefix}.{name}{Path(args.data).suffix or '.lcds'}"
        save_dataset(part.with_priors(priors), run.output(out), format=args.format)
    return EXIT_OK


def _fit_config_dict(args) -> dict:
    return {
        "method": args.method,
        "val_frac": args.val_frac,
        "seed": args.seed,
        "gamma": args.gamma,
        "lambda": args.lam,
        "hidden": args.hidden,
        "epochs": args.epochs,
        "dropout": args.dropout,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "pca_dim": args.pca_dim,
    }


def cmd_fit(args, run: Run) -> int:
    from .calibrators import FitConfig, fit
    from .dataset import load_dataset

    cal = load_dataset(run.input(args.cal))
    run.seed = args.seed
    run.config = _fit_config_dict(args)
    if args.method == "lcn":
        from .lcn import LcnConfig, train_lcn

        cfg = LcnConfig(
            hidden_dim=args.hidden,
            dropout=args.dropout,
            lam=args.lam,
            gamma=args.gamma,
            pca_dim=args.pca_dim,
            lr=args.lr if args.lr is not None else 1e-3,
            epochs=args.epochs,
            batch_size=args.batch_size,
            seed=args.seed,
            val_frac=args.val_frac,
        )
        model, trace = train_lcn(cal, cfg)
        text = model.to_json()
        if args.trace:
            run.output(args.trace).write_text(json.dumps(trace.to_dict(), indent=1) + "\n")
    else:
        cfg = FitConfig(val_frac=args.val_frac, seed=args.seed, **({"lr": args.lr} if args.lr is not None else {}))
        text = fit(args.method, cal, cfg).to_json()
    run.output(args.out).write_text(text)
    return EXIT_OK


def load_model(path):
    from .calibrators import calibrator_from_dict

    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read model {path}: {exc}") from None
    if obj.get("method") == "lcn":
        from .lcn import LcnModel

        return LcnModel.from_dict(obj)
    return calibrator_from_dict(obj)


def cmd_apply(args, run: Run) -> int:
    from .dataset import load_dataset, replace_representation, save_dataset
    from .errors import ClassCountMismatch

    model = load_model(run.input(args.model))
    d = load_dataset(run.input(args.data))
    run.config = {"model": getattr(model, "method", "?"), "emit_representation": args.emit_representation}
    if model.method == "lcn":
        from .lcn import lcn_apply

        if d.C != model.n_classes:
            raise ClassCountMismatch(f"model has {model.n_classes} classes, data has {d.C}")
        phi, probs = lcn_apply(model, d)
        feats = phi if args.emit_representation else None
    else:
        from .calibrators import apply

        probs = apply(model, d)
        feats = None
    logits = np.log(np.maximum(probs, 1e-300))
    out = replace_representation(d, feats, logits - logits.max(axis=1, keepdims=True))
    save_dataset(out, run.output(args.out), format=args.format)
    return EXIT_OK


def cmd_eval(args, run: Run) -> int:
    from .dataset import load_dataset
    from .metrics import MetricConfig, evaluate
    from .numerics import softmax

    d = load_dataset(run.input(args.data))
    source = args.priors
    if args.priors == "train":
        if args.train_data:
            priors = load_dataset(run.input(args.train_data)).label_priors()
        else:
            # split/synth store the training priors in the file
            priors = d.priors
    else:
        priors = d.label_priors()
    cfg = MetricConfig(args.bins, args.min_bin, args.gamma, not args.include_self, args.variant, source)
    run.config = cfg.to_dict()
    probs = softmax(d.logits)
    report = evaluate(probs, d.labels, d.features, priors, cfg)
    text = report.to_json()
    if args.report:
        run.output(args.report).write_text(text)
    else:
        sys.stdout.write(text)
    if args.figdir:
        from .plotting import reliability_diagram

        reliability_diagram(probs, d.labels, run.output(Path(args.figdir) / "reliability.png"), args.bins)
    return EXIT_OK


# ---- verify


def _write_table(path, rows: list[dict], run: Run) -> None:
    if not rows:
        return
    with open(run.output(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.12g}" if isinstance(v, float) else v) for k, v in r.items()})


def _emit_lines(lines, out, run: Run) -> None:
    text = "".join(line + "\n" for line in lines)
    if out:
        run.output(out).write_text(text)
    else:
        sys.stdout.write(text)


def _base_spec(args):
    from .synth import default_benchmark, load_synth_spec

    if getattr(args, "spec", None):
        return load_synth_spec(args.spec)
    return default_benchmark()


def verify_thm2(args, run: Run) -> int:
    from .theory import verify_theorem2

    run.seed = args.seed
    base = _base_spec(args)
    run.config = {"trials": args.trials, "n": args.n, "bins": args.bins, "eps": args.eps, "delta": args.delta}
    reports = []
    for eps in args.eps:
        reports += verify_theorem2(args.trials, args.n, args.bins, eps, args.delta, args.seed, base)
    _emit_lines([r.to_json_line() for r in reports], args.out, run)
    rows = []
    for eps in args.eps:
        sub = [r for r in reports if r.meta["eps"] == eps]
        rows.append(
            {
                "eps": eps,
                "trials": len(sub),
                "hold_rate": float(np.mean([r.holds for r in sub])),
                "observed_mean": float(np.mean([r.observed for r in sub])),
                "bound_mean": float(np.mean([r.bound for r in sub])),
            }
        )
    if args.table:
        _write_table(args.table, rows, run)
    if args.figdir:
        from .plotting import bound_scatter

        bound_scatter(reports, run.output(Path(args.figdir) / "thm2_bound.png"))
    for r in rows:
        log.info("eps=%g: bound held in %.1f%% of %d trials", r["eps"], 100 * r["hold_rate"], r["trials"])
    return EXIT_OK


def verify_thm3(args, run: Run) -> int:
    from .dataset import load_dataset
    from .numerics import softmax
    from .synth import generate, inject_local_miscalibration
    from .theory import gamma_sweep, verify_theorem3

    run.seed = args.seed
    run.config = {
        "gamma": args.gamma,
        "delta": args.delta,
        "eps_mode": args.eps_mode,
        "representation": args.representation,
        "sweep": args.sweep,
        "seeds": args.seeds,
        "n": args.n,
        "eps": args.eps,
    }
    datasets = []
    if args.data:
        datasets.append((args.seed, load_dataset(run.input(args.data))))
    else:
        base = _base_spec(args)
        for s in range(args.seed, args.seed + args.seeds):
            d, p = generate(replace(base, n=args.n, seed=s))
            datasets.append((s, inject_local_miscalibration(d, p, args.eps, seed=s)[0]))
    reports, sweeps = [], []
    for s, d in datasets:
        probs = softmax(d.logits)
        r = verify_theorem3(
            d, probs, args.eps_hat, args.gamma, args.delta, args.representation, eps_mode=args.eps_mode, seed=s
        )
        r.meta["seed"] = s
        reports.append(r)
        if args.sweep:
            for row in gamma_sweep(d, probs, args.sweep, args.delta, args.representation):
                sweeps.append(dict(seed=s, **row))
    _emit_lines([r.to_json_line() for r in reports], args.out, run)
    if args.table:
        _write_table(args.table, sweeps or [dict(seed=r.meta["seed"], observed=r.observed, bound=r.bound) for r in reports], run)
    if args.figdir and sweeps:
        from .plotting import bias_variance_sweep

        bias_variance_sweep([x for x in sweeps if x["seed"] == datasets[0][0]], run.output(Path(args.figdir) / "thm3_sweep.png"))
    log.info("bound held in %d of %d runs", sum(r.holds for r in reports), len(reports))
    return EXIT_OK


def verify_thm5(args, run: Run) -> int:
    from .numerics import softmax
    from .synth import SynthSpec, generate, inject_local_miscalibration
    from .theory import global_eps, verify_theorem5

    run.seed = args.seed
    run.config = {"k": args.k, "delta": args.delta, "seeds": args.seeds, "n": args.n, "eps": args.eps, "biased": args.biased}
    reports = []
    for s in range(args.seed, args.seed + args.seeds):
        if args.biased:
            d, _ = generate(SynthSpec(generator="proximity_biased", n=args.n, seed=s))
            probs = softmax(d.logits)
            eps = global_eps(probs, d.labels) if args.eps_hat is None else args.eps_hat
        else:
            d, p = generate(replace(_base_spec(args), n=args.n, seed=s))
            d, realized = inject_local_miscalibration(d, p, args.eps, seed=s)
            probs = softmax(d.logits)
            eps = float(realized.max()) if args.eps_hat is None else args.eps_hat
        reports.append(verify_theorem5(d, probs, eps, args.k, args.delta))
    _emit_lines([r.to_json_line() for r in reports], args.out, run)
    if args.table:
        rows = []
        for s, r in zip(range(args.seed, args.seed + args.seeds), reports):
            for p in r.pairs:
                rows.append({"seed": s, "bin": p.bin, "freq_gap": p.freq_gap, "bound": p.bound, "holds": p.holds})
        _write_table(args.table, rows, run)
    if args.figdir:
        from .plotting import proximity_pairs

        proximity_pairs(reports, run.output(Path(args.figdir) / "thm5_pairs.png"))
    pairs = [p for r in reports for p in r.pairs]
    log.info("sub-bin bound held for %d of %d pairs", sum(p.holds for p in pairs), len(pairs))
    return EXIT_OK


def verify_jsd(args, run: Run) -> int:
    from .lcn import jsd_consistency_experiment
    from .synth import SynthSpec

    spec = SynthSpec(n_classes=2, dim=args.dim, separation=args.separation)
    gamma0 = args.gamma0 if args.gamma0 is not None else 0.5 * spec.sigma
    run.seed = args.seed
    run.config = {"sizes": args.sizes, "seeds": args.seeds, "gamma0": gamma0, "dim": args.dim}
    rows = jsd_consistency_experiment(spec, args.sizes, gamma0, range(args.seed, args.seed + args.seeds))
    _emit_lines([json.dumps({k: (float(f"{v:.12g}") if isinstance(v, float) else v) for k, v in r.items()}) for r in rows], args.out, run)
    if args.table:
        _write_table(args.table, rows, run)
    if args.figdir:
        from .plotting import consistency_plot

        consistency_plot(rows, run.output(Path(args.figdir) / "jsd_consistency.png"))
    return EXIT_OK


def verify_toy(args, run: Run) -> int:
    from .theory import toy_example, toy_report_lines

    sizes = {k: 1 for k in "ABCDEF"}
    if args.sizes:
        sizes.update(_sizes(args.sizes))
    run.config = {"sizes": sizes}
    _emit_lines(toy_report_lines(toy_example(sizes)), args.out, run)
    return EXIT_OK


VERIFY = {"thm2": verify_thm2, "thm3": verify_thm3, "thm5": verify_thm5, "jsd": verify_jsd, "toy": verify_toy}


def cmd_verify(args, run: Run) -> int:
    return VERIFY[args.harness](args, run)


def cmd_replay(args, run: Run) -> int:
    """Re-run a manifest's argv and compare output digests."""
    try:
        manifest = json.loads(Path(args.manifest_file).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read manifest {args.manifest_file}: {exc}") from None
    argv = list(manifest["argv"])
    threads = args.replay_threads if args.replay_threads is not None else args.threads
    if threads is not None:
        argv = ["--threads", str(threads)] + argv
    code = main(argv)
    if code != EXIT_OK:
        return code
    mismatched = [p for p, digest in manifest["outputs"].items() if not Path(p).exists() or _sha256(p) != digest]
    for p in mismatched:
        log.error("output differs from manifest: %s", p)
    if mismatched:
        raise NumericalError(f"{len(mismatched)} output(s) differ from the manifest")
    log.info("replay reproduced %d output(s) byte-for-byte", len(manifest["outputs"]))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="localcal", description="Local calibration metrics, calibrators and bound harnesses.")
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (env LCAL_THREADS overrides)")
    p.add_argument("--manifest", default=None, help="manifest path (default: <first output>.manifest.json)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"localcal {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--spec", help="INI file with a [synth] section")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--format", choices=("binary", "csv"), default="binary")
    s.add_argument("--truth", help="also write the exact conditionals as CSV")

    s = sub.add_parser("split", help="seeded disjoint row split")
    s.add_argument("--data", required=True)
    s.add_argument("--fractions", default="cal=0.5,test=0.5")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-prefix", required=True)
    s.add_argument("--format", choices=("binary", "csv"), default="binary")

    s = sub.add_parser("fit", help="fit a calibrator or LoCal Net")
    s.add_argument("--method", choices=("ts", "platt", "isotonic", "dirichlet", "lcn"), required=True)
    s.add_argument("--cal", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--val-frac", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gamma", type=float, default=10.0)
    s.add_argument("--lambda", dest="lam", type=float, default=1.0)
    s.add_argument("--hidden", type=int, default=64)
    s.add_argument("--epochs", type=int, default=60)
    s.add_argument("--dropout", type=float, default=0.3)
    s.add_argument("--batch-size", type=int, default=1024)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--pca-dim", type=int, default=50)
    s.add_argument("--trace", help="write the LCN training trace JSON here")

    s = sub.add_parser("apply", help="apply a fitted model to a dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("binary", "csv"), default="binary")
    s.add_argument("--emit-representation", action="store_true", help="LCN: replace features with the learned representation")

    s = sub.add_parser("eval", help="compute the six metrics")
    s.add_argument("--data", required=True)
    s.add_argument("--bins", type=int, default=15)
    s.add_argument("--gamma", type=float, default=10.0)
    s.add_argument("--min-bin", type=int, default=20)
    s.add_argument("--priors", choices=("train", "eval"), default="train")
    s.add_argument("--train-data", help="dataset whose label frequencies give the training priors")
    s.add_argument("--variant", choices=("classwise", "vector"), default="classwise")
    s.add_argument("--include-self", action="store_true", help="keep the anchor in its own kernel estimate")
    s.add_argument("--report")
    s.add_argument("--figdir")

    s = sub.add_parser("verify", help="bound verification harnesses")
    vs = s.add_subparsers(dest="harness", required=True, parser_class=_Parser)

    def common(v, seeds=True):
        v.add_argument("--seed", type=int, default=0)
        v.add_argument("--out", help="JSON lines output (default: stdout)")
        v.add_argument("--table", help="CSV summary table")
        v.add_argument("--figdir")
        v.add_argument("--spec", help="INI synth spec for the base generator")
        if seeds:
            v.add_argument("--delta", type=float, default=0.05)

    v = vs.add_parser("thm2")
    common(v)
    v.add_argument("--trials", type=int, default=200)
    v.add_argument("--n", type=int, default=20000)
    v.add_argument("--bins", type=int, default=15)
    v.add_argument("--eps", type=_floats, default=[0.0, 0.05, 0.1])

    v = vs.add_parser("thm3")
    common(v)
    v.add_argument("--data")
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--n", type=int, default=4000)
    v.add_argument("--eps", type=float, default=0.05)
    v.add_argument("--eps-hat", type=float)
    v.add_argument("--eps-mode", choices=("two_split", "self"), default="two_split")
    v.add_argument("--gamma", type=float, default=10.0)
    v.add_argument("--representation", choices=("logits", "features"), default="logits")
    v.add_argument("--sweep", type=_floats, default=None)

    v = vs.add_parser("thm5")
    common(v)
    v.add_argument("--seeds", type=int, default=20)
    v.add_argument("--n", type=int, default=4000)
    v.add_argument("--k", type=int, default=10)
    v.add_argument("--eps", type=float, default=0.05)
    v.add_argument("--eps-hat", type=float)
    v.add_argument("--biased", action="store_true", help="use the proximity-biased generator")

    v = vs.add_parser("jsd")
    common(v, seeds=False)
    v.add_argument("--sizes", type=_ints, default=[500, 2000, 8000])
    v.add_argument("--seeds", type=int, default=5)
    v.add_argument("--dim", type=int, default=2)
    v.add_argument("--separation", type=float, default=1.0)
    v.add_argument("--gamma0", type=float)

    v = vs.add_parser("toy")
    v.add_argument("--sizes", help="region sizes, e.g. A=10,B=5,C=5")
    v.add_argument("--out")

    s = sub.add_parser("replay", help="re-run a manifest and check outputs are identical")
    s.add_argument("manifest_file")
    s.add_argument("--threads", dest="replay_threads", type=int, help="thread cap for the re-run")
    return p


COMMANDS = {
    "synth": cmd_synth,
    "split": cmd_split,
    "fit": cmd_fit,
    "apply": cmd_apply,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "replay": cmd_replay,
}


def _resolve_threads(flag) -> int:
    env = os.environ.get("LCAL_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"LCAL_THREADS must be an integer, got {env!r}") from None
    if flag is not None:
        return max(1, flag)
    return os.cpu_count() or 1


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        threads = _resolve_threads(args.threads)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE

    from threadpoolctl import threadpool_limits

    # the manifest records argv without thread flags so replays can vary them
    clean = _strip_global(argv)
    run = Run(args.command, clean, threads)
    try:
        with threadpool_limits(limits=threads), warnings.catch_warnings():
            warnings.simplefilter("default")
            code = COMMANDS[args.command](args, run)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LocalCalError as exc:  # pragma: no cover - every subclass is data or numerical
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.command != "replay":
        mpath = _manifest_path(args, run)
        if mpath is not None:
            mpath.parent.mkdir(parents=True, exist_ok=True)
            mpath.write_text(json.dumps(run.manifest(), indent=1) + "\n")
    return code


def _strip_global(argv: list[str]) -> list[str]:
    out, skip = [], False
    for i, tok in enumerate(argv):
        if skip:
            skip = False
            continue
        if tok in ("--threads", "--manifest"):
            skip = True
            if tok == "--manifest":
                out += argv[i : i + 2]
            continue
        if tok.startswith("--threads="):
            continue
        out.append(tok)
    return out


if __name__ == "__main__":
    sys.exit(main())
