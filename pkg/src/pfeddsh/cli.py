"""Command-line front end.

Exit codes: 0 ok, 2 configuration or usage error, 3 numeric failure,
4 verification mismatch.

Any config key can also be set from the environment as
``PFEDDSH_<SECTION>__<KEY>=value`` (for example ``PFEDDSH_MASK__LAMBDA=1e-3``);
environment values are applied after the config file and before flags.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from . import __version__, _backend, config, federation, gradcheck
from .errors import ConfigError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

SWEEP_KEYS = {
    "lambda": "mask.lambda",
    "embed_dim": "hypernet.embed_dim",
    "gamma": "mask.gamma",
    "alpha_dirichlet": "data.alpha",
    "seed": "run.seed",
}
SWEEP_HEADER = ["value", "accuracy", "PA", "RI", "sparsity", "active_neuron_fraction"]

log = logging.getLogger("pfeddsh")


def _load_config(args) -> config.ExperimentConfig:
    cfg = config.load(args.config) if args.config else config.bundled()
    config.apply_env(cfg)
    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.method is not None:
        cfg.set("run.method", args.method)
    return cfg.validate()


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path("runs") / f"{cfg.run.method}-seed{cfg.run.seed}"
    man = federation.run_experiment(cfg, out, jobs=args.jobs, force=args.force)
    s = man.summary
    print(f"wrote {out}")
    print(f"accuracy {s['accuracy']:.2f}  PA {s['PA']:.2f}  RI {s['RI']:.2f}  sparsity {s.get('sparsity', 0.0):.1f}%")
    return EXIT_OK


def _parse_values(raw: list[str]) -> list:
    return [config._literal(v) for v in raw]


def cmd_sweep(args) -> int:
    if args.parameter not in SWEEP_KEYS:
        raise ConfigError(f"unknown sweep parameter; choose from {', '.join(SWEEP_KEYS)}", args.parameter)
    values = _parse_values(args.values)
    if not values:
        raise ConfigError("sweep needs at least one value", args.parameter)
    base = _load_config(args)
    key = SWEEP_KEYS[args.parameter]
    cfgs = []
    for v in values:
        cfg = base.copy()
        cfg.set(key, v)
        cfgs.append(cfg.validate())  # fail before any compute
    out = Path(args.out) if args.out else Path("runs") / f"sweep-{args.parameter}"
    out.mkdir(parents=True, exist_ok=True)
    if (out / "sweep.csv").exists() and not args.force:
        raise FileExistsError(f"{out} already holds a sweep; pass --force to overwrite")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for v, cfg in zip(values, cfgs):
        sub = out / f"{args.parameter}={v}"
        man = federation.run_experiment(cfg, sub, jobs=args.jobs, force=args.force)
        s = man.summary
        w.writerow([v] + [repr(float(s.get(k, 0.0))) for k in SWEEP_HEADER[1:]])
        print(f"{args.parameter}={v}: accuracy {s['accuracy']:.2f}  PA {s['PA']:.2f}  RI {s['RI']:.2f}  sparsity {s.get('sparsity', 0.0):.1f}%")
    (out / "sweep.csv").write_text(buf.getvalue())
    print(f"wrote {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    for d in args.runs:
        d = Path(d)
        man = json.loads((d / "manifest.json").read_text())
        print(f"# {d}  (version {man['version']}, backend {man['backend']})")
        print((d / "report.csv").read_text(), end="")
        print("summary," + ",".join(f"{k}={v:.4f}" for k, v in sorted(man["summary"].items())))
    return EXIT_OK


def first_divergence(expected: str, actual: str) -> tuple[int, str, str] | None:
    a, b = expected.splitlines(), actual.splitlines()
    for i in range(max(len(a), len(b))):
        ra = a[i] if i < len(a) else "<missing>"
        rb = b[i] if i < len(b) else "<missing>"
        if ra != rb:
            return i + 1, ra, rb
    return None


def cmd_verify(args) -> int:
    d = Path(args.run)
    man = json.loads((d / "manifest.json").read_text())
    if man.get("version") != __version__:
        print(f"version mismatch: manifest written by {man.get('version')}, this is {__version__}")
        return EXIT_VERIFY
    if man.get("backend") != _backend.name():
        print(f"note: manifest backend {man.get('backend')} differs from active backend {_backend.name()}")
    cfg = config.load(d / "config.cfg").validate()
    stored = (d / "ledger.csv").read_bytes()
    fresh = federation.run_experiment(cfg, None, jobs=args.jobs).ledger_csv.encode()
    if stored == fresh:
        print(f"ok: ledger reproduced ({len(fresh)} bytes)")
        return EXIT_OK
    div = first_divergence(stored.decode(errors="replace"), fresh.decode())
    if div is None:
        print("ledger bytes differ (line endings or encoding)")
    else:
        row, old, new = div
        print(f"ledger differs at row {row}:\n  stored: {old}\n  rerun:  {new}")
    return EXIT_VERIFY


def cmd_gradcheck(args) -> int:
    bad = False
    backends = _backend.available() if args.backend == "all" else [args.backend]
    for b in backends:
        with _backend.using(b):
            for r in gradcheck.run_all(args.instances):
                ok = r.passed(args.tol)
                bad |= not ok
                print(f"[{b}] {r.name:<22} {r.instances} instances  max rel err {r.max_rel_error:.2e}  {'ok' if ok else 'FAIL'}")
    return EXIT_NUMERIC if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfeddsh", description="Progressive client onboarding simulator.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="config file (default: bundled desk scenario)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--method", choices=config.METHODS)
        sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker threads for client training")

    sp = sub.add_parser("run", help="run one experiment")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="one run per value of a parameter")
    sp.add_argument("parameter", help=", ".join(SWEEP_KEYS))
    sp.add_argument("values", nargs="*")
    common(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="print the report of finished runs")
    sp.add_argument("runs", nargs="+")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("verify", help="re-run a manifest and compare ledgers")
    sp.add_argument("run")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--backend", default="all", choices=["all", *_backend.available()])
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        where = f" (phase {exc.phase}" + (f", iteration {exc.iteration}" if exc.iteration is not None else "") + ")"
        print(f"numeric error{where if exc.phase else ''}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
