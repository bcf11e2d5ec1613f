"""Command-line interface.

Commands: gen-data, train, refine, eval, lodo, ablate, plot. Global flags
--config/--seed/--out/--preset layer onto the preset/file/override config
stack. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

import json
import sys
from pathlib import Path

import click
import numpy as np

from cosam import data as data_mod
from cosam import experiments as exp
from cosam.config import PRESETS, build_config
from cosam.errors import ConfigError, CosamError, DataError, NumericError
from cosam.metrics import evaluate
from cosam.model import load_checkpoint
from cosam.refiner import refine
from cosam.trainer import fit


def _parse_overrides(pairs: tuple[str, ...]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} must be key=value")
        k, v = pair.split("=", 1)
        out[k] = v
    return out


@click.group()
@click.option("--config", "config_file", type=click.Path(), default=None,
              help="YAML config file.")
@click.option("--seed", type=int, default=None, help="Global seed.")
@click.option("--out", "out_dir", type=click.Path(), default="runs",
              help="Output directory.")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None,
              help="Named hyper-parameter preset.")
@click.option("--set", "overrides", multiple=True,
              help="Config override key=value (repeatable, dotted keys ok).")
@click.pass_context
def cli(ctx, config_file, seed, out_dir, preset, overrides):
    ov = _parse_overrides(overrides)
    if seed is not None:
        ov["seed"] = seed
    ctx.obj = {
        "cfg": build_config(preset or "", config_file, ov),
        "out": Path(out_dir),
    }


def _load_benchmark(cfg, root: str | None):
    root = root or cfg.data.root
    if root:
        return data_mod.load_benchmark(root)
    return data_mod.generate_benchmark(
        cfg.data.n_domains, cfg.data.per_domain, cfg.dims, cfg.data.master_seed)


@cli.command("gen-data")
@click.option("--n-domains", type=int, default=None)
@click.option("--per-domain", type=int, default=None)
@click.option("--dims", type=int, default=None)
@click.pass_context
def gen_data(ctx, n_domains, per_domain, dims):
    """Generate the synthetic multi-domain benchmark on disk."""
    cfg = ctx.obj["cfg"]
    benchmark = data_mod.generate_benchmark(
        n_domains or cfg.data.n_domains,
        per_domain or cfg.data.per_domain,
        dims or cfg.dims,
        cfg.data.master_seed)
    root = data_mod.save_benchmark(benchmark, ctx.obj["out"])
    click.echo(f"wrote {len(benchmark)} domains under {root}")


@cli.command("train")
@click.option("--data", "data_root", type=click.Path(), default=None,
              help="Benchmark root (default: generate synthetically).")
@click.option("--source", type=int, default=0, help="Source domain index.")
@click.option("--run-id", default="train", help="Run directory name.")
@click.pass_context
def train_cmd(ctx, data_root, source, run_id):
    """Train on one source domain."""
    cfg = ctx.obj["cfg"]
    benchmark = _load_benchmark(cfg, data_root)
    src, _ = data_mod.leave_one_domain_out(benchmark, source)
    model, log = fit(src, cfg, out_dir=ctx.obj["out"], run_id=run_id, quiet=False)
    click.echo(f"trained {cfg.epochs} epochs on {src.domain_id}; "
               f"{len(log)} steps logged under {ctx.obj['out'] / run_id}")


@cli.command("refine")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--image", "image_path", type=click.Path(exists=True), required=True)
@click.option("--save-masks", is_flag=True, help="Write per-iteration mask PNGs.")
@click.pass_context
def refine_cmd(ctx, ckpt, image_path, save_masks):
    """Run the self-correcting loop on one grayscale image."""
    from PIL import Image

    cfg = ctx.obj["cfg"]
    model = load_checkpoint(ckpt)
    raw = np.asarray(Image.open(image_path).convert("L"), dtype=np.float32)
    lo, hi = raw.min(), raw.max()
    img = ((raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw))[None]
    trace = refine(img, model, cfg.k_points, cfg.t_iters, cfg.threshold)
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    (out / f"{stem}_trace.json").write_text(trace.to_json(threshold=cfg.threshold))
    if save_masks:
        for rec in trace.records:
            if rec.refined is not None:
                m = (rec.refined >= cfg.threshold).astype(np.uint8) * 255
                Image.fromarray(m, mode="L").save(out / f"{stem}_iter{rec.t}.png")
    click.echo(trace.to_json(threshold=cfg.threshold))


@cli.command("eval")
@click.option("--ckpt", type=click.Path(exists=True), required=True)
@click.option("--data", "data_root", type=click.Path(), default=None)
@click.option("--exclude-source", type=int, default=None,
              help="Domain index to exclude (the training source).")
@click.option("--limit", type=int, default=None, help="Samples per domain.")
@click.pass_context
def eval_cmd(ctx, ckpt, data_root, exclude_source, limit):
    """Evaluate a checkpoint on target domains."""
    cfg = ctx.obj["cfg"]
    benchmark = _load_benchmark(cfg, data_root)
    if exclude_source is not None:
        _, targets = data_mod.leave_one_domain_out(benchmark, exclude_source)
    else:
        targets = benchmark
    model = load_checkpoint(ckpt)
    report = evaluate(model, targets, cfg.k_points, cfg.t_iters, cfg.threshold,
                      limit=limit, use_points=cfg.use_points, use_box=cfg.use_box,
                      use_mask=cfg.use_mask, point_selection=cfg.point_selection,
                      point_seed=cfg.seed)
    payload = {
        "per_domain": report.per_domain_mean,
        "per_domain_coarse": report.per_domain_coarse_mean,
        "average": report.overall,
        "average_coarse": report.overall_coarse,
        "failures": report.failures,
        "config_hash": cfg.hash(),
    }
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    click.echo(json.dumps(payload, sort_keys=True))


@cli.command("lodo")
@click.option("--data", "data_root", type=click.Path(), default=None)
@click.option("--seeds", default=None, help="Comma-separated seeds.")
@click.option("--sources", default=None, help="Comma-separated source indices.")
@click.option("--limit", type=int, default=None, help="Eval samples per domain.")
@click.pass_context
def lodo_cmd(ctx, data_root, seeds, sources, limit):
    """Leave-one-domain-out: train per source, evaluate on the rest."""
    cfg = ctx.obj["cfg"]
    benchmark = _load_benchmark(cfg, data_root)
    seed_list = [int(s) for s in seeds.split(",")] if seeds else None
    source_list = [int(s) for s in sources.split(",")] if sources else None
    out = ctx.obj["out"]
    rows = exp.run_lodo(benchmark, cfg, out, source_list, seed_list, limit, quiet=False)
    csv_text = exp.lodo_csv(rows, [d.domain_id for d in benchmark])
    out.mkdir(parents=True, exist_ok=True)
    (out / "lodo.csv").write_text(csv_text)
    click.echo(csv_text)


@cli.command("ablate")
@click.option("--axis", required=True,
              type=click.Choice(["loss-combination", "prompt-combination",
                                 "point-selection", "hyper-parameter"]))
@click.option("--parameter", default="", help="alpha | k_points | t_iters (hyper-parameter axis).")
@click.option("--levels", default=None, help="Comma-separated level names/values.")
@click.option("--seeds", default="0", help="Comma-separated seeds.")
@click.option("--data", "data_root", type=click.Path(), default=None)
@click.option("--sources", default=None, help="Comma-separated source indices.")
@click.option("--limit", type=int, default=None)
@click.pass_context
def ablate_cmd(ctx, axis, parameter, levels, seeds, data_root, sources, limit):
    """Run one ablation axis and emit CSV + figures."""
    cfg = ctx.obj["cfg"]
    benchmark = _load_benchmark(cfg, data_root)
    level_list = levels.split(",") if levels else None
    if axis == "hyper-parameter" and level_list is not None:
        level_list = [float(v) if "." in v else int(v) for v in level_list]
    spec = exp.AblationSpec(
        axis=axis, levels=level_list, parameter=parameter,
        seeds=[int(s) for s in seeds.split(",")])
    source_list = [int(s) for s in sources.split(",")] if sources else None
    out = ctx.obj["out"]
    results = exp.run_ablation(spec, benchmark, cfg, out, source_list, limit, quiet=False)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{axis}-{parameter}" if parameter else axis
    (out / f"ablation_{tag}.csv").write_text(exp.ablation_csv(results))
    (out / f"ablation_{tag}.json").write_text(json.dumps(results, sort_keys=True, indent=1))
    exp.emit_plots(results, tag, out)
    click.echo(exp.ablation_csv(results))


@cli.command("plot")
@click.option("--results", "results_path", type=click.Path(exists=True), required=True,
              help="ablation_*.json emitted by ablate.")
@click.pass_context
def plot_cmd(ctx, results_path):
    """Re-render figures from a saved ablation results file."""
    results = json.loads(Path(results_path).read_text())
    tag = Path(results_path).stem.replace("ablation_", "")
    paths = exp.emit_plots(results, tag, ctx.obj["out"])
    for p in paths:
        click.echo(str(p))


def main():
    try:
        cli(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except click.Abort:
        sys.exit(1)
    except (ConfigError, DataError, NumericError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(exc.exit_code)
    except CosamError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    sys.exit(0)


if __name__ == "__main__":
    main()
