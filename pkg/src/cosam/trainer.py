"""Four-phase training loop.

Each step runs, per batch: coarse prompt-free prediction, error-map
prediction on a perturbed binarized mask, prompt-based refinement, and a
guided pass with label-derived prompts; then one optimizer step with
polynomial learning-rate decay.

Gradient routing: the error decoder sees only detached image and mask
embeddings, so the error loss reaches no other component; the mask losses
never touch the error decoder. Prompt construction (binarize, top-K,
bbox) happens in numpy and is therefore detached by construction.
"""

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from cosam import geometry, losses
from cosam.config import ExperimentConfig
from cosam.errors import ConfigError, NumericError
from cosam.model import CoSamModel, build_model, save_checkpoint
from cosam.rng import derive_rng


@dataclass
class StepReport:
    step: int
    lr: float
    coarse_loss: float
    refined_loss: float
    guided_loss: float
    error_loss: float
    omega_mean: float
    n_w_mean: float
    n_r_mean: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def poly_lr(base_lr: float, t: int, t_total: int, power: float) -> float:
    """Polynomial decay: base_lr * (1 - t/t_total)^power."""
    if t_total <= 0:
        return base_lr
    frac = min(max(t / t_total, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


def _batch_seg_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of per-sample (dice + bce)."""
    probs = torch.sigmoid(logits)
    labels = labels.float()
    inter = (probs * labels).sum(dim=(1, 2))
    denom = probs.sum(dim=(1, 2)) + labels.sum(dim=(1, 2))
    dice = 1.0 - (2.0 * inter + losses.DICE_EPS) / (denom + losses.DICE_EPS)
    bce = torch.nn.functional.binary_cross_entropy_with_logits(
        logits, labels, reduction="none").mean(dim=(1, 2))
    return (dice + bce).mean()


def _check_finite(value: torch.Tensor, phase: str) -> None:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite loss in {phase}")


def make_optimizer(model: CoSamModel, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    """Two param groups: the error decoder's lr is scaled by err_lr_scale
    and exempt from the poly decay.

    Its target distribution (the segmenter's mistakes) only stabilizes once
    the segmenter converges; decaying its lr on the segmenter's clock
    freezes it exactly when its targets become meaningful.
    """
    err, other = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (err if name.startswith("error_decoder.") else other).append(p)
    groups = [
        {"params": other, "lr_scale": 1.0, "decay": True},
        {"params": err, "lr_scale": cfg.err_lr_scale, "decay": False},
    ]
    groups = [g for g in groups if g["params"]]
    if cfg.optimizer == "adam":
        return torch.optim.Adam(groups, lr=cfg.base_lr)
    return torch.optim.AdamW(groups, lr=cfg.base_lr)


def train_step(images: torch.Tensor, labels: torch.Tensor, sample_indices: list[int],
               model: CoSamModel, optimizer: torch.optim.Optimizer,
               cfg: ExperimentConfig, step: int, lr: float) -> StepReport:
    """One optimizer step on a (B, 1, H, W) batch.

    sample_indices identify each sample's independent random streams, so
    batch composition does not shift randomness across runs.
    """
    if images.shape[0] == 0:
        raise ConfigError("empty batch")
    b, _, h, w = images.shape
    labels_np = labels.numpy().astype(np.uint8)

    do_refine = cfg.use_refine_loss and cfg.lambda_r > 0
    do_guided = cfg.use_guided_loss and cfg.lambda_g > 0
    zero = torch.zeros(())

    # --- coarse mask phase
    feats, coarse_logits = model.coarse_logits(images)
    coarse_loss = _batch_seg_loss(coarse_logits, labels)
    _check_finite(coarse_loss, "coarse mask phase")

    # --- error map phase
    coarse_probs = torch.sigmoid(coarse_logits).detach().numpy()
    y_hat = np.stack([geometry.binarize(p, cfg.threshold) for p in coarse_probs])
    y_hat_p = np.stack([
        geometry.perturb(y_hat[i], cfg.alpha, derive_rng(cfg.seed, "perturb", sample_indices[i]))
        for i in range(b)
    ])
    e_source = y_hat_p if cfg.error_target_from == "perturbed" else y_hat
    e = np.stack([geometry.error_label(e_source[i], labels_np[i]) for i in range(b)])

    masks_p = torch.as_tensor(y_hat_p, dtype=torch.float32)
    with torch.no_grad():
        dense_p = model.dense_encoder(masks_p.view(b, 1, h, w))
    err_ctx = torch.enable_grad() if cfg.use_error_loss else torch.no_grad()
    with err_ctx:
        err_logits = model.error_decoder(feats.detach(), dense_p)

    if cfg.omega_counts_from == "prediction":
        count_src = np.stack([
            geometry.binarize(p, cfg.threshold)
            for p in torch.sigmoid(err_logits).detach().numpy()
        ])
    else:
        count_src = e
    omegas, n_ws, n_rs = [], [], []
    for i in range(b):
        n_w = int(count_src[i].sum())
        n_r = count_src[i].size - n_w
        omegas.append(losses.balance_weight(n_w, n_r))
        n_ws.append(n_w)
        n_rs.append(n_r)
    e_t = torch.as_tensor(e, dtype=torch.float32)
    if cfg.use_error_loss:
        err_loss = torch.stack([
            losses.error_loss(err_logits[i], e_t[i], omegas[i]) for i in range(b)
        ]).mean()
        _check_finite(err_loss, "error map phase")
    else:
        err_loss = zero

    # --- refine phase
    if do_refine:
        err_probs = torch.sigmoid(err_logits).detach().numpy()
        prompts = []
        for i in range(b):
            ps = geometry.build_refined_prompts(
                err_probs[i], y_hat[i], cfg.k_points,
                point_selection=cfg.point_selection,
                rng=derive_rng(cfg.seed, "randomk", sample_indices[i]),
            )
            prompts.append(ps.subset(cfg.use_points, cfg.use_box, cfg.use_mask))
        refined_logits = model.prompted_logits(feats, prompts, (h, w))
        refined_loss = _batch_seg_loss(refined_logits, labels)
        _check_finite(refined_loss, "refine phase")
    else:
        refined_loss = zero

    # --- guided phase
    if do_guided:
        prompts = []
        for i in range(b):
            ps = geometry.build_guided_prompts(
                labels_np[i], cfg.k_points, derive_rng(cfg.seed, "guided", sample_indices[i]))
            prompts.append(ps.subset(cfg.use_points, cfg.use_box, cfg.use_mask))
        guided_logits = model.prompted_logits(feats, prompts, (h, w))
        guided_loss = _batch_seg_loss(guided_logits, labels)
        _check_finite(guided_loss, "guided phase")
    else:
        guided_loss = zero

    # --- optimization phase
    mask_loss = coarse_loss + cfg.lambda_r * refined_loss + cfg.lambda_g * guided_loss
    total = mask_loss + err_loss
    _check_finite(total, "optimization phase")
    for group in optimizer.param_groups:
        base = lr if group.get("decay", True) else cfg.base_lr
        group["lr"] = base * group.get("lr_scale", 1.0)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()

    return StepReport(
        step=step,
        lr=lr,
        coarse_loss=float(coarse_loss.detach()),
        refined_loss=float(refined_loss.detach()),
        guided_loss=float(guided_loss.detach()),
        error_loss=float(err_loss.detach()),
        omega_mean=float(np.mean(omegas)),
        n_w_mean=float(np.mean(n_ws)),
        n_r_mean=float(np.mean(n_rs)),
    )


def fit(dataset, cfg: ExperimentConfig, out_dir: Optional[str | Path] = None,
        run_id: str = "run", model: Optional[CoSamModel] = None,
        quiet: bool = True) -> tuple[CoSamModel, list[StepReport]]:
    """Train for cfg.epochs epochs with reshuffling and poly lr decay.

    Emits a JSONL log (one StepReport per line) and periodic checkpoints
    under out_dir/run_id when out_dir is given. Returns the trained model
    and the full step log.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("empty dataset")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    if model is None:
        model = build_model(cfg.arch, cfg.seed, cfg.mode)
    optimizer = make_optimizer(model, cfg)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    t_total = cfg.epochs * steps_per_epoch

    run_dir = None
    log_fh = None
    if out_dir is not None:
        run_dir = Path(out_dir) / run_id
        run_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "log.jsonl", "w")

    images = torch.as_tensor(
        np.stack([s.image for s in dataset]), dtype=torch.float32)
    labels = torch.as_tensor(
        np.stack([s.label for s in dataset]), dtype=torch.float32)

    log: list[StepReport] = []
    step = 0
    start = time.time()
    try:
        for epoch in range(cfg.epochs):
            order = derive_rng(cfg.seed, "shuffle", epoch).permutation(n)
            for b0 in range(0, n, cfg.batch_size):
                idx = order[b0:b0 + cfg.batch_size]
                sample_indices = [epoch * n + int(i) for i in idx]
                lr = poly_lr(cfg.base_lr, step, t_total, cfg.poly_power)
                report = train_step(
                    images[idx], labels[idx], sample_indices,
                    model, optimizer, cfg, step, lr)
                log.append(report)
                if log_fh is not None:
                    log_fh.write(report.to_json() + "\n")
                step += 1
            if run_dir is not None and (
                    (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                ckpt = run_dir / f"ckpt_{epoch + 1}.bin"
                save_checkpoint(model, ckpt)
                (run_dir / "latest").write_text(ckpt.name)
            if not quiet:
                last = log[-1]
                print(f"epoch {epoch + 1}/{cfg.epochs} "
                      f"coarse={last.coarse_loss:.4f} refined={last.refined_loss:.4f} "
                      f"guided={last.guided_loss:.4f} error={last.error_loss:.4f} "
                      f"({time.time() - start:.0f}s)")
    finally:
        if log_fh is not None:
            log_fh.close()
    if run_dir is not None and cfg.epochs == 0:
        save_checkpoint(model, run_dir / "ckpt_0.bin")
        (run_dir / "latest").write_text("ckpt_0.bin")
    return model, log
