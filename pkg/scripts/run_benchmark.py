"""Populate results/e2e with the benchmark cells the acceptance suite reads.

6 source domains x 3 seeds x {full recipe, prompt-free-only baseline}.
Cells are cached by (config hash, source, seed); rerunning after an
interruption only trains what is missing. Roughly 90 minutes cold on one
CPU core.

Usage: python3 scripts/run_benchmark.py [out_dir]
"""

import sys
import time

import torch

from cosam.config import build_config
from cosam.data import generate_benchmark
from cosam.experiments import run_lodo


def main() -> None:
    torch.set_num_threads(1)
    out_dir = sys.argv[1] if len(sys.argv) > 1 else "results/e2e"
    cfg_full = build_config("toy")
    cfg_base = build_config("toy", overrides={
        "lambda_r": 0.0, "lambda_g": 0.0, "t_iters": 1,
        "use_refine_loss": False, "use_guided_loss": False})

    bench = generate_benchmark(
        cfg_full.data.n_domains, cfg_full.data.per_domain,
        cfg_full.dims, cfg_full.data.master_seed)

    for name, cfg in (("full", cfg_full), ("base", cfg_base)):
        for seed in (0, 1, 2):
            for src in range(len(bench)):
                t0 = time.time()
                rows = run_lodo(bench, cfg, out_dir, sources=[src], seeds=[seed])
                print(f"{name} seed={seed} src={src} {time.time() - t0:.0f}s "
                      f"avg={rows[0]['average']:.4f} "
                      f"coarse={rows[0]['average_coarse']:.4f}", flush=True)
    print("done")


if __name__ == "__main__":
    main()
