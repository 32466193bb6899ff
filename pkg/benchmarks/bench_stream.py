"""Per-step calibration latency of the replay stream for an existing run directory.

    python3 benchmarks/bench_stream.py RUN_DIR [--repeat 3]

RUN_DIR must already hold the outputs of ``rescal train-rescal``.
"""

import argparse

import numpy as np

from rescal.autograd.rng import Rng
from rescal.cli import Run, load_base, load_dataset, load_rescal, load_scaler
from rescal.config import RunConfig
from rescal.replay import run_stream


def main():
    p = argparse.ArgumentParser()
    p.add_argument("run_dir")
    p.add_argument("--repeat", type=int, default=3)
    args = p.parse_args()
    cfg_path = f"{args.run_dir}/train-rescal.config"
    run = Run(args.run_dir, RunConfig.load(cfg_path), "bench")
    ds, _ = load_dataset(run)
    base, _ = load_base(run, ds.n_nodes)
    module = load_rescal(run, base.input_len, ds.n_nodes)
    scaler = load_scaler(run)
    means = []
    for i in range(args.repeat):
        clog = run_stream(ds, scaler, "test", base, module, Rng(i))
        rep = clog.latency_report()
        means.append(rep["mean_ms"])
        print(f"repeat {i}: {rep['steps']} steps, mean {rep['mean_ms']:.3f} ms, p95 {rep['p95_ms']:.3f} ms")
    print(f"mean over repeats: {np.mean(means):.3f} ms per step")


if __name__ == "__main__":
    main()
