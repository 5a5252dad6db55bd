"""Compare the compiled and numpy kernel backends.

Times one forward+backward sweep of the desk network at several minibatch
sizes, one synthesis step and one full desk-scale run, per backend.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from pfeddsh import _backend, config, federation, nn, replay


def sweep_time(spec, params, x, y, number: int) -> float:
    def step():
        nn.loss_and_grads(spec, params, x, y, None, "train")

    return min(timeit.repeat(step, number=number, repeat=5)) / number


def synth_time(spec, params, stats, labels, hp, number: int) -> float:
    def step():
        replay.inversion_objective(spec, params, stats, x0, labels, hp)

    x0 = np.random.default_rng(0).standard_normal((len(labels), spec.input_dim))
    return min(timeit.repeat(step, number=number, repeat=5)) / number


def run_time(repeat: int) -> float:
    cfg = config.bundled()
    best = float("inf")
    for _ in range(repeat):
        t = timeit.default_timer()
        federation.simulate(cfg)
        best = min(best, timeit.default_timer() - t)
    return best


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3, help="full-run repetitions per backend")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    spec = nn.mlp_spec(16, 5, hidden=32, depth=2)
    params = nn.init_params(spec, rng)
    hp = replay.ReplayHyperparams()
    rows = []
    for bs in (8, 32, 128):
        x = rng.standard_normal((bs, 16))
        y = rng.integers(0, 5, bs)
        rows.append((f"fwd+bwd batch {bs}", {}, (spec, params, x, y)))
    stats = nn.population_stats(spec, params, rng.standard_normal((256, 16)))
    results: dict[str, dict[str, float]] = {}
    for b in _backend.available():
        with _backend.using(b):
            res = {}
            for name, _, (sp, p, x, y) in rows:
                res[name] = sweep_time(sp, p, x, y, 2000)
            res["synthesis step (32)"] = synth_time(spec, params, stats, np.arange(32) % 5, hp, 1000)
            res["desk run (s)"] = run_time(args.repeat)
            results[b] = res
    names = list(next(iter(results.values())))
    backends = list(results)
    print(f"{'case':<22}" + "".join(f"{b:>14}" for b in backends) + ("   speedup" if len(backends) == 2 else ""))
    for n in names:
        vals = [results[b][n] for b in backends]
        unit = "s" if n.endswith("(s)") else "us"
        cells = "".join(f"{(v if unit == 's' else v * 1e6):>12.2f}{unit:>2}" for v in vals)
        extra = f"   {results['numpy'][n] / results['cython'][n]:6.2f}x" if len(backends) == 2 else ""
        print(f"{n:<22}{cells}{extra}")


if __name__ == "__main__":
    main()
