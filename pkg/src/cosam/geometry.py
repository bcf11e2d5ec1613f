"""Deterministic mask/prompt geometry.

All operations here are pure numpy with no learned state: binarization,
Bernoulli perturbation, XOR error labels and correction, top-K point
selection, connected components and bounding boxes, and the assembly of
refined/guided prompt sets.

Conventions: masks are (H, W) arrays, binary masks uint8 over {0, 1},
probability masks float in [0, 1]. Points are (x, y, label) with x the
column, y the row, origin top-left. Boxes are inclusive (x0, y0, x1, y1).
Ties (equal scores, equal component sizes) break in row-major order so
results are reproducible across runs and platforms.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from cosam.errors import InputError

# 8-connectivity for foreground components
_STRUCT8 = np.ones((3, 3), dtype=np.uint8)

Point = tuple[int, int, int]  # (x, y, label)


@dataclass(frozen=True)
class Box:
    """Inclusive pixel bounding box."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 <= self.x1 and 0 <= self.y0 <= self.y1):
            raise InputError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass
class PromptSet:
    """Any subset of the three prompt kinds; all-absent means prompt-free."""

    points: Optional[list[Point]] = None
    box: Optional[Box] = None
    mask: Optional[np.ndarray] = None  # ProbMask (H, W)

    def subset(self, use_points: bool, use_box: bool, use_mask: bool) -> "PromptSet":
        """Drop prompt kinds not selected (ablation hook)."""
        return PromptSet(
            points=self.points if use_points else None,
            box=self.box if use_box else None,
            mask=self.mask if use_mask else None,
        )


def _check_same_dims(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise InputError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def binarize(m: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Threshold a probability mask; values >= tau map to 1."""
    if not (0.0 < tau < 1.0):
        raise InputError(f"threshold {tau} outside (0, 1)")
    return (np.asarray(m) >= tau).astype(np.uint8)


def perturb(m: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Flip each pixel independently with probability alpha."""
    if not (0.0 <= alpha <= 1.0):
        raise InputError(f"flip probability {alpha} outside [0, 1]")
    m = np.asarray(m, dtype=np.uint8)
    psi = (rng.random(m.shape) < alpha).astype(np.uint8)
    return m ^ psi


def error_label(pred: np.ndarray, label: np.ndarray) -> np.ndarray:
    """Pixel-wise XOR: 1 where prediction and label disagree."""
    pred = np.asarray(pred, dtype=np.uint8)
    label = np.asarray(label, dtype=np.uint8)
    _check_same_dims(pred, label, "error_label")
    return pred ^ label


def correct_mask(pred: np.ndarray, errmap: np.ndarray) -> np.ndarray:
    """Invert pred exactly where errmap marks an error (XOR)."""
    pred = np.asarray(pred, dtype=np.uint8)
    errmap = np.asarray(errmap, dtype=np.uint8)
    _check_same_dims(pred, errmap, "correct_mask")
    return pred ^ errmap


def count_error_points(errmap: np.ndarray) -> int:
    """Number of 1-pixels in a binary error map."""
    return int(np.asarray(errmap).sum())


def topk_error_points(e: np.ndarray, pred_for_labels: np.ndarray, k: int) -> list[Point]:
    """Select the K pixels with largest error values.

    Ties break in row-major order. Each point carries the value of
    pred_for_labels at its pixel as the point label. Output is ordered by
    descending value, then row-major.
    """
    e = np.asarray(e, dtype=np.float64)
    pred_for_labels = np.asarray(pred_for_labels)
    _check_same_dims(e, pred_for_labels, "topk_error_points")
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    h, w = e.shape
    if k > h * w:
        raise InputError(f"k={k} exceeds pixel count {h * w}")
    # stable sort on negated values keeps row-major order within ties
    order = np.argsort(-e.ravel(), kind="stable")[:k]
    ys, xs = np.unravel_index(order, e.shape)
    return [(int(x), int(y), int(pred_for_labels[y, x])) for x, y in zip(xs, ys)]


def random_points(e_shape: tuple[int, int], pred_for_labels: np.ndarray, k: int,
                  rng: np.random.Generator) -> list[Point]:
    """Uniform point selection ignoring error values (Random-K ablation).

    Same output contract as topk_error_points: K points labeled by
    pred_for_labels, here drawn uniformly without replacement.
    """
    h, w = e_shape
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if k > h * w:
        raise InputError(f"k={k} exceeds pixel count {h * w}")
    flat = rng.choice(h * w, size=k, replace=False)
    ys, xs = np.unravel_index(flat, (h, w))
    return [(int(x), int(y), int(pred_for_labels[y, x])) for x, y in zip(xs, ys)]


def largest_component_bbox(m: np.ndarray) -> Optional[Box]:
    """Tight inclusive box of the largest 8-connected foreground component.

    Equal-size components break ties by the row-major position of their
    first pixel. Returns None for an empty mask.
    """
    m = np.asarray(m, dtype=np.uint8)
    labels, n = ndimage.label(m, structure=_STRUCT8)
    if n == 0:
        return None
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    # first row-major occurrence of each label, for the tie rule
    first = np.full(n + 1, labels.size, dtype=np.int64)
    np.minimum.at(first, labels.ravel(), np.arange(labels.size))
    best_size = counts.max()
    tied = np.flatnonzero(counts == best_size)
    winner = tied[np.argmin(first[tied])]
    ys, xs = np.nonzero(labels == winner)
    return Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def foreground_bbox(m: np.ndarray) -> Optional[Box]:
    """Tight inclusive box of all foreground pixels; None if mask is empty."""
    m = np.asarray(m, dtype=np.uint8)
    ys, xs = np.nonzero(m)
    if ys.size == 0:
        return None
    return Box(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def random_label_points(y: np.ndarray, k: int, rng: np.random.Generator) -> list[Point]:
    """Sample K foreground and K background points from a clean mask.

    Classes are sampled without replacement; a class with fewer than K
    pixels contributes all of them (row-major) and is topped up with
    replacement so the total point count stays at 2K. If one class is
    absent entirely, all 2K points come from the other.
    """
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    y = np.asarray(y, dtype=np.uint8)
    h, w = y.shape
    fg = np.flatnonzero(y.ravel() == 1)
    bg = np.flatnonzero(y.ravel() == 0)

    def pick(pool: np.ndarray, count: int) -> np.ndarray:
        if pool.size >= count:
            return rng.choice(pool, size=count, replace=False)
        extra = rng.choice(pool, size=count - pool.size, replace=True)
        return np.concatenate([pool, extra])

    if fg.size == 0:
        chosen = [(pick(bg, 2 * k), 0)]
    elif bg.size == 0:
        chosen = [(pick(fg, 2 * k), 1)]
    else:
        chosen = [(pick(fg, k), 1), (pick(bg, k), 0)]

    points: list[Point] = []
    for flat, lab in chosen:
        ys, xs = np.unravel_index(flat, (h, w))
        points.extend((int(x), int(yy), lab) for x, yy in zip(xs, ys))
    return points


def build_refined_prompts(e: np.ndarray, base: np.ndarray, k: int, *,
                          point_selection: str = "topk",
                          rng: Optional[np.random.Generator] = None) -> PromptSet:
    """Prompts derived from an error map and the current binary mask.

    Points are the top-K error pixels labeled by base; the box bounds the
    largest connected component of base; the mask prompt is base itself.
    point_selection="random" substitutes seeded uniform point selection
    (ablation), leaving box and mask untouched.
    """
    e = np.asarray(e, dtype=np.float64)
    base = np.asarray(base, dtype=np.uint8)
    _check_same_dims(e, base, "build_refined_prompts")
    if point_selection == "topk":
        points = topk_error_points(e, base, k)
    elif point_selection == "random":
        if rng is None:
            raise InputError("random point selection requires an rng")
        points = random_points(e.shape, base, k, rng)
    else:
        raise InputError(f"unknown point selection {point_selection!r}")
    return PromptSet(
        points=points,
        box=largest_component_bbox(base),
        mask=base.astype(np.float32),
    )


def build_guided_prompts(y: np.ndarray, k: int, rng: np.random.Generator) -> PromptSet:
    """Prompts derived from the ground-truth label.

    Points are K positive + K negative samples from y; the box bounds all
    foreground of y (labels are clean, no speckle to guard against); the
    mask prompt is y itself.
    """
    y = np.asarray(y, dtype=np.uint8)
    return PromptSet(
        points=random_label_points(y, k, rng),
        box=foreground_bbox(y),
        mask=y.astype(np.float32),
    )
