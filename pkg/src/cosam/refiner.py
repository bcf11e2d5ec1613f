"""Inference-time self-correcting loop.

Starting from the prompt-free coarse mask, each iteration predicts an
error map over the current binarized mask, counts the predicted error
pixels, and stops early if that count fails to drop below the previous
iteration's. Otherwise the mask is corrected by flipping the flagged
pixels, refined prompts (top-K error points, largest-component box, the
corrected mask) are built, and the mask decoder produces a refined mask
that becomes the next iteration's input. The image embedding is computed
once and reused.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from cosam import geometry
from cosam.errors import InputError
from cosam.model import CoSamModel

STOP_NONDECREASING = "error-count-nondecreasing"
STOP_BUDGET = "budget-exhausted"


@dataclass
class IterationRecord:
    t: int  # 1-based iteration index
    n_w: int  # predicted error pixel count at this iteration
    prompts: Optional[geometry.PromptSet]
    refined: Optional[np.ndarray]  # ProbMask after refinement
    error_map: Optional[np.ndarray] = None  # binarized error map, if retained


@dataclass
class RefinementTrace:
    coarse: np.ndarray  # ProbMask of the prompt-free prediction
    records: list[IterationRecord] = field(default_factory=list)
    stop_reason: str = STOP_BUDGET
    final: np.ndarray = None  # ProbMask: last accepted refinement, else coarse

    @property
    def n_w_sequence(self) -> list[int]:
        return [r.n_w for r in self.records]

    @property
    def accepted_n_w(self) -> list[int]:
        """n_w values of iterations that produced a refinement."""
        return [r.n_w for r in self.records if r.prompts is not None]

    def to_json(self, label: Optional[np.ndarray] = None,
                threshold: float = 0.5) -> str:
        from cosam.metrics import dsc

        payload = {
            "n_w_sequence": self.n_w_sequence,
            "stop_reason": self.stop_reason,
            "iterations": len(self.records),
        }
        if label is not None:
            payload["dsc_coarse"] = dsc(geometry.binarize(self.coarse, threshold), label)
            payload["dsc_final"] = dsc(geometry.binarize(self.final, threshold), label)
        return json.dumps(payload)


def refine(image: np.ndarray, model: CoSamModel, k: int, t_iters: int,
           threshold: float = 0.5, keep_error_maps: bool = False,
           keep_masks: bool = True, use_points: bool = True,
           use_box: bool = True, use_mask: bool = True,
           point_selection: str = "topk",
           point_rng: Optional[np.random.Generator] = None) -> RefinementTrace:
    """Run the self-correcting loop on one (1, H, W) image.

    point_selection="random" (with a seeded point_rng) substitutes uniform
    point selection for top-K, everything else unchanged."""
    if t_iters < 1:
        raise InputError(f"t_iters must be >= 1, got {t_iters}")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    with torch.no_grad():
        emb = model.encode_image(image)
        coarse_logits = model.decode_mask(
            emb,
            model.encode_sparse_prompts([], None, emb.image_size),
            model.encode_dense_prompt(None, emb.image_size),
        )
        coarse = torch.sigmoid(coarse_logits).numpy()
        trace = RefinementTrace(coarse=coarse, final=coarse)

        y_tilde = coarse
        n_prev = np.inf
        for t in range(1, t_iters + 1):
            y_hat = geometry.binarize(y_tilde, threshold)
            err_logits = model.decode_error(
                emb, model.encode_dense_prompt(y_hat.astype(np.float32), emb.image_size))
            e_tilde = torch.sigmoid(err_logits).numpy()
            e_hat = geometry.binarize(e_tilde, threshold)
            n_w = geometry.count_error_points(e_hat)
            if n_w >= n_prev:
                trace.records.append(IterationRecord(
                    t, n_w, None, None, e_hat if keep_error_maps else None))
                trace.stop_reason = STOP_NONDECREASING
                break
            y_f = geometry.correct_mask(y_hat, e_hat)
            prompts = geometry.build_refined_prompts(
                e_tilde, y_f, k,
                point_selection=point_selection, rng=point_rng,
            ).subset(use_points, use_box, use_mask)
            refined_logits = model.decode_mask(
                emb,
                model.encode_sparse_prompts(
                    prompts.points or [], prompts.box, emb.image_size),
                model.encode_dense_prompt(prompts.mask, emb.image_size),
            )
            y_tilde = torch.sigmoid(refined_logits).numpy()
            trace.records.append(IterationRecord(
                t, n_w, prompts, y_tilde if keep_masks else None,
                e_hat if keep_error_maps else None))
            trace.final = y_tilde
            n_prev = n_w
    return trace


def refine_batch(images, model: CoSamModel, k: int, t_iters: int,
                 threshold: float = 0.5, parallelism: int = 1,
                 **kwargs) -> list:
    """Apply refine independently per image; failures are collected.

    Returns a list aligned with images; a failed image yields the
    exception instance in its slot instead of a trace.
    """

    def one(img):
        try:
            return refine(img, model, k, t_iters, threshold, **kwargs)
        except Exception as exc:  # noqa: BLE001 - batch continues past failures
            return exc

    if parallelism <= 1 or len(images) <= 1:
        return [one(img) for img in images]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(one, images))
