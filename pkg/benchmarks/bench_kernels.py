"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json]
"""
from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from appsel_pfl import kernels, model, synth

F, D, H = model.N_FEATURES, model.D_MODEL, model.N_HEADS


def _workload(devices: int, seed: int = 0):
    ds = synth.make_experiment_datasets(synth.DataConfig(num_users=500, train_size=devices,
                                                         valid_size=1, seed=seed))
    b = synth.to_batch(ds["train_stale"])
    offsets = np.arange(devices + 1, dtype=np.int64)
    return model.init_params(seed), b, offsets


def bench(repeat: int = 5, devices: int = 250) -> list[dict]:
    params, b, offsets = _workload(devices)
    mask = np.ones(params.size, dtype=np.uint8)
    cases = {
        "predict": lambda k: k.predict(params.flat, b.X, b.ncand, F, D, H),
        "loss_grad": lambda k: k.loss_grad(params.flat, b.X, b.ncand, b.labels, F, D, H, 0.1),
        "local_train_cohort": lambda k: k.local_train_cohort(
            params.flat, mask, b.X, b.ncand, b.labels, offsets, F, D, H, 0.01, 3, 0.1),
    }
    rows = []
    for name, fn in cases.items():
        row = {"kernel": name, "records": devices}
        for backend in ("python", "cython"):
            try:
                k = kernels.get_backend(backend)
            except ImportError:
                row[backend + "_ms"] = None
                continue
            fn(k)  # warm up
            best = min(timeit.repeat(lambda: fn(k), number=1, repeat=repeat))
            row[backend + "_ms"] = round(best * 1000, 3)
        if row.get("cython_ms"):
            row["speedup"] = round(row["python_ms"] / row["cython_ms"], 2)
        rows.append(row)
    return rows


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--devices", type=int, default=250)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args(argv)
    rows = bench(args.repeat, args.devices)
    if args.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"{'kernel':<20}{'records':>8}{'numpy ms':>12}{'cython ms':>12}{'speedup':>9}")
    for r in rows:
        print(f"{r['kernel']:<20}{r['records']:>8}{r['python_ms']!s:>12}{r['cython_ms']!s:>12}"
              f"{r.get('speedup', '-')!s:>9}")


if __name__ == "__main__":
    main()
