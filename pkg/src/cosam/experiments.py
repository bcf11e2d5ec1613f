"""Leave-one-domain-out experiments, ablation sweeps, report emission.

Each (source domain, seed) cell trains one model and evaluates it on the
remaining domains. Finished cells are written as JSON under the output
directory and skipped on rerun, so long sweeps are resumable. CSV is the
normative tabular output; figures are derived from it.
"""

import csv
import io
import json
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

from cosam.config import ExperimentConfig
from cosam.data import GENERATOR_VERSION, DomainDataset, leave_one_domain_out
from cosam.errors import ConfigError
from cosam.metrics import evaluate
from cosam.trainer import fit

PROMPT_KINDS = ("points", "box", "mask")

# nonempty subsets of the three prompt kinds, smallest first
PROMPT_SUBSETS = [
    combo
    for r in range(1, 4)
    for combo in combinations(PROMPT_KINDS, r)
]

LOSS_LEVELS = {
    # toggle structure of the four loss-combination rows
    "coarse": dict(use_refine_loss=False, use_error_loss=False,
                   use_guided_loss=False, t_iters=1),
    "coarse+refine": dict(use_refine_loss=True, use_error_loss=False,
                          use_guided_loss=False),
    "coarse+refine+error": dict(use_refine_loss=True, use_error_loss=True,
                                use_guided_loss=False),
    "full": dict(use_refine_loss=True, use_error_loss=True,
                 use_guided_loss=True),
}

DEFAULT_GRIDS = {
    "alpha": [0.0, 0.1, 0.2, 0.3, 0.5],
    "k_points": [4, 16, 64, 128],
    "t_iters": [1, 2, 3, 4, 6],
}


@dataclass
class AblationSpec:
    axis: str  # loss-combination | prompt-combination | point-selection | hyper-parameter
    levels: Optional[list] = None
    seeds: list[int] = field(default_factory=lambda: [0])
    parameter: str = ""  # for axis=hyper-parameter: alpha | k_points | t_iters


def ablation_levels(spec: AblationSpec) -> list[tuple[str, dict]]:
    """Resolve an axis to (level name, config override) pairs."""
    if spec.axis == "loss-combination":
        names = spec.levels or list(LOSS_LEVELS)
        out = []
        for n in names:
            if n not in LOSS_LEVELS:
                raise ConfigError(f"unknown loss-combination level {n!r}")
            out.append((n, dict(LOSS_LEVELS[n])))
        return out
    if spec.axis == "prompt-combination":
        subsets = spec.levels or ["+".join(c) for c in PROMPT_SUBSETS]
        out = []
        for name in subsets:
            kinds = tuple(name.split("+"))
            if not kinds or any(k not in PROMPT_KINDS for k in kinds):
                raise ConfigError(f"unknown prompt-combination level {name!r}")
            out.append((name, {
                "use_points": "points" in kinds,
                "use_box": "box" in kinds,
                "use_mask": "mask" in kinds,
            }))
        return out
    if spec.axis == "point-selection":
        names = spec.levels or ["topk", "random"]
        for n in names:
            if n not in ("topk", "random"):
                raise ConfigError(f"unknown point-selection level {n!r}")
        return [(n, {"point_selection": n}) for n in names]
    if spec.axis == "hyper-parameter":
        if spec.parameter not in DEFAULT_GRIDS:
            raise ConfigError(
                f"unknown hyper-parameter {spec.parameter!r}; choose from {sorted(DEFAULT_GRIDS)}")
        values = spec.levels if spec.levels is not None else DEFAULT_GRIDS[spec.parameter]
        return [(f"{spec.parameter}={v}", {spec.parameter: v}) for v in values]
    raise ConfigError(f"unknown ablation axis {spec.axis!r}")


def _cell_path(out_dir: Path, cfg: ExperimentConfig, source: str, seed: int,
               eval_limit: Optional[int]) -> Path:
    n = eval_limit if eval_limit else "all"
    # the generator version participates in the key: regenerated benchmarks
    # must not be served stale cells
    return out_dir / "cells" / (
        f"{GENERATOR_VERSION}_{cfg.hash()}_{source}_seed{seed}_n{n}.json")


def run_cell(benchmark: list[DomainDataset], source_index: int,
             cfg: ExperimentConfig, out_dir: Optional[Path] = None,
             eval_limit: Optional[int] = None, quiet: bool = True) -> dict:
    """Train on one source domain and evaluate on the rest.

    Returns (and caches) a JSON-serializable summary; a cached cell with
    the same config hash, source, and seed is returned without retraining.
    """
    source, targets = leave_one_domain_out(benchmark, source_index)
    cell_file = None
    if out_dir is not None:
        cell_file = _cell_path(Path(out_dir), cfg, source.domain_id, cfg.seed, eval_limit)
        if cell_file.exists():
            return json.loads(cell_file.read_text())
    model, _log = fit(source, cfg, quiet=quiet)
    report = evaluate(
        model, targets, cfg.k_points, cfg.t_iters, cfg.threshold,
        limit=eval_limit, use_points=cfg.use_points, use_box=cfg.use_box,
        use_mask=cfg.use_mask, point_selection=cfg.point_selection,
        point_seed=cfg.seed)
    cell = {
        "source": source.domain_id,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "per_domain": report.per_domain_mean,
        "per_domain_coarse": report.per_domain_coarse_mean,
        "average": report.overall,
        "average_coarse": report.overall_coarse,
        "failures": len(report.failures),
    }
    if cell_file is not None:
        cell_file.parent.mkdir(parents=True, exist_ok=True)
        cell_file.write_text(json.dumps(cell, sort_keys=True, indent=1))
    return cell


def run_lodo(benchmark: list[DomainDataset], cfg: ExperimentConfig,
             out_dir: Optional[str | Path] = None,
             sources: Optional[list[int]] = None,
             seeds: Optional[list[int]] = None,
             eval_limit: Optional[int] = None, quiet: bool = True) -> list[dict]:
    """One row per (source domain, seed): per-target DSC plus the Average
    column (unweighted mean over target domains)."""
    out_dir = Path(out_dir) if out_dir is not None else None
    sources = sources if sources is not None else list(range(len(benchmark)))
    seeds = seeds if seeds is not None else [cfg.seed]
    rows = []
    for seed in seeds:
        cfg_s = replace(cfg, seed=seed)
        for idx in sources:
            rows.append(run_cell(benchmark, idx, cfg_s, out_dir, eval_limit, quiet))
    return rows


def lodo_csv(rows: list[dict], benchmark_domains: list[str]) -> str:
    """Render LODO rows as a deterministic CSV table."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source", "seed"] + benchmark_domains + ["average", "average_coarse"])
    for row in rows:
        writer.writerow(
            [row["source"], row["seed"]]
            + [f"{row['per_domain'][d]:.6f}" if d in row["per_domain"] else ""
               for d in benchmark_domains]
            + [f"{row['average']:.6f}", f"{row['average_coarse']:.6f}"])
    return buf.getvalue()


def run_ablation(spec: AblationSpec, benchmark: list[DomainDataset],
                 cfg: ExperimentConfig, out_dir: Optional[str | Path] = None,
                 sources: Optional[list[int]] = None,
                 eval_limit: Optional[int] = None, quiet: bool = True) -> list[dict]:
    """Run every level of one ablation axis; returns comparison rows."""
    results = []
    for name, overrides in ablation_levels(spec):
        level_cfg = replace(cfg, **overrides)
        rows = run_lodo(benchmark, level_cfg, out_dir, sources, spec.seeds,
                        eval_limit, quiet)
        results.append({
            "level": name,
            "overrides": overrides,
            "rows": rows,
            "average": float(np.mean([r["average"] for r in rows])),
            "average_coarse": float(np.mean([r["average_coarse"] for r in rows])),
        })
    return results


def ablation_csv(results: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["level", "average", "average_coarse", "n_rows"])
    for r in results:
        writer.writerow([r["level"], f"{r['average']:.6f}",
                         f"{r['average_coarse']:.6f}", len(r["rows"])])
    return buf.getvalue()


def emit_plots(results: list[dict], axis: str, out_dir: str | Path,
               run_id: str = "ablation") -> list[Path]:
    """Line plot for hyper-parameter sweeps, bar chart otherwise; SVG files
    named {run_id}/fig_{axis}.svg. Empty input emits nothing."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not results:
        import warnings

        warnings.warn("emit_plots called with no results; no figures written")
        return []
    fig_dir = Path(out_dir) / run_id
    fig_dir.mkdir(parents=True, exist_ok=True)
    levels = [r["level"] for r in results]
    values = [r["average"] for r in results]
    fig, ax = plt.subplots(figsize=(6, 4))
    if axis.startswith("hyper-parameter") and all("=" in l for l in levels):
        xs = [float(l.split("=", 1)[1]) for l in levels]
        ax.plot(xs, values, marker="o")
        ax.set_xlabel(levels[0].split("=", 1)[0])
    else:
        ax.bar(range(len(levels)), values)
        ax.set_xticks(range(len(levels)))
        ax.set_xticklabels(levels, rotation=30, ha="right")
    ax.set_ylabel("mean DSC")
    ax.set_title(axis)
    path = fig_dir / f"fig_{axis}.svg"
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return [path]
