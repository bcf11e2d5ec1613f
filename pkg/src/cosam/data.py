"""Synthetic multi-domain benchmark and on-disk 2D dataset loading.

Domains share the task (segment 1-2 bright blobs) but differ in
appearance: per-domain frozen style parameters (intensity bias, gamma,
noise, blur, background texture, shape family) are drawn from disjoint
sub-ranges so that domains are genuinely shifted while foreground shape
statistics overlap.

On-disk layout, per domain: <dir>/images/<id>.png, <dir>/masks/<id>.png
(8-bit grayscale) plus <dir>/manifest.json recording the style, seed and
generator version. Images are min-max normalized per image; masks
binarize at 128/255.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from cosam.errors import DataError, InputError
from cosam.rng import derive_rng

GENERATOR_VERSION = "cosam-synth-4"


@dataclass(frozen=True)
class DomainStyle:
    domain_id: str
    intensity_bias: float  # in [-0.4, 0.4]
    gamma: float  # contrast exponent in [0.4, 2.4]
    noise_sigma: float  # in [0, 0.22]
    blur_radius: int  # {0, 1, 2} px
    texture_freq: float  # background cycles/image in [0, 10]
    shape_family: str  # ellipse | fourier-blob


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) uint8 {0, 1}
    domain_id: str
    sample_id: str


class DomainDataset:
    """Ordered samples of one domain plus its manifest."""

    def __init__(self, samples: list[Sample], manifest: dict):
        self.samples = samples
        self.manifest = manifest

    @property
    def domain_id(self) -> str:
        return self.manifest["domain_id"]

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> Sample:
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)


def _chunk(lo: float, hi: float, i: int, n: int, frac: float) -> float:
    """Value at relative position frac inside the i-th of n equal chunks."""
    width = (hi - lo) / n
    return lo + width * (i + frac)


def draw_styles(n_domains: int, master_seed: int) -> list[DomainStyle]:
    """One frozen style per domain, parameters from disjoint sub-ranges."""
    rng = derive_rng(master_seed, "styles")
    # independent chunk assignments per parameter so domains differ in
    # several appearance dimensions at once
    perm_gamma = rng.permutation(n_domains)
    perm_noise = rng.permutation(n_domains)
    perm_tex = rng.permutation(n_domains)
    styles = []
    for i in range(n_domains):
        styles.append(DomainStyle(
            domain_id=f"domain_{chr(ord('A') + i)}" if i < 26 else f"domain_{i}",
            intensity_bias=round(_chunk(-0.4, 0.4, i, n_domains, rng.uniform(0.3, 0.7)), 4),
            gamma=round(_chunk(0.4, 2.4, int(perm_gamma[i]), n_domains, rng.uniform(0.3, 0.7)), 4),
            noise_sigma=round(_chunk(0.0, 0.22, int(perm_noise[i]), n_domains, rng.uniform(0.3, 0.7)), 4),
            blur_radius=int(i % 3),
            texture_freq=round(_chunk(0.0, 10.0, int(perm_tex[i]), n_domains, rng.uniform(0.3, 0.7)), 4),
            shape_family="ellipse" if i % 2 == 0 else "fourier-blob",
        ))
    return styles


def _blob_mask(dims: int, rng: np.random.Generator, family: str) -> np.ndarray:
    """Rasterize one blob: ellipse or low-order fourier boundary."""
    h = w = dims
    cy = rng.uniform(0.25, 0.75) * h
    cx = rng.uniform(0.25, 0.75) * w
    r0 = rng.uniform(0.10, 0.28) * dims
    ys, xs = np.mgrid[0:h, 0:w]
    dy = ys - cy
    dx = xs - cx
    if family == "ellipse":
        a = r0 * rng.uniform(0.7, 1.3)
        b = r0 * rng.uniform(0.7, 1.3)
        phi = rng.uniform(0, np.pi)
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    theta = np.arctan2(dy, dx)
    boundary = np.full_like(theta, 1.0)
    for k in range(1, 5):
        a_k = rng.uniform(-0.4, 0.4) / k
        phi_k = rng.uniform(0, 2 * np.pi)
        boundary = boundary + a_k * np.cos(k * theta + phi_k)
    radius = np.hypot(dx, dy)
    return (radius <= r0 * np.clip(boundary, 0.2, None)).astype(np.uint8)


def _render_sample(style: DomainStyle, dims: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One (image, label) pair; retried by the caller if foreground is degenerate."""
    n_blobs = int(rng.integers(1, 3))
    label = np.zeros((dims, dims), dtype=np.uint8)
    for _ in range(n_blobs):
        label |= _blob_mask(dims, rng, style.shape_family)

    # distractors: blobs that look almost like foreground but are not part
    # of the label; they give the segmenter genuine region-level mistakes
    # to make (and the error decoder real errors to learn from)
    n_distract = int(rng.integers(1, 3))
    distract = np.zeros((dims, dims), dtype=np.uint8)
    for _ in range(n_distract):
        distract |= _blob_mask(dims, rng, style.shape_family)
    distract &= 1 - label

    # intensity bands are separated by clear gaps so the segmentation task
    # is learnable in-domain; the gaps shrink under another domain's gamma
    # and bias, which is where real mistakes come from
    bg = rng.uniform(0.25, 0.40)
    fg = rng.uniform(0.60, 0.75)
    fg_d = rng.uniform(0.48, 0.54)
    img = np.where(label == 1, fg, bg).astype(np.float64)
    img = np.where(distract == 1, fg_d, img)
    if style.texture_freq > 0:
        phi = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:dims, 0:dims]
        wave = (xs * np.cos(phi) + ys * np.sin(phi)) / dims
        img = img + 0.15 * np.sin(2 * np.pi * style.texture_freq * wave + phase)
    if style.blur_radius > 0:
        img = ndimage.gaussian_filter(img, sigma=style.blur_radius)
    img = np.clip(img + style.intensity_bias, 0.0, 1.0) ** style.gamma
    img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # per-image min-max, 8-bit quantization, then the exact arithmetic the
    # loader uses, so a save/load round-trip through PNG is bit-identical
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    img8 = np.round(img * 255.0).astype(np.float32)
    lo8, hi8 = img8.min(), img8.max()
    img = (img8 - lo8) / (hi8 - lo8) if hi8 > lo8 else np.zeros_like(img8)
    return img.astype(np.float32), label


def generate_domain(style: DomainStyle, per_domain: int, dims: int,
                    master_seed: int, domain_index: int) -> DomainDataset:
    samples = []
    for i in range(per_domain):
        rng = derive_rng(master_seed, f"render-{domain_index}", i)
        for _attempt in range(60):
            img, label = _render_sample(style, dims, rng)
            frac = label.mean()
            if 0.01 <= frac <= 0.6:
                break
        else:
            raise DataError(
                f"could not render a sample with 1-60% foreground for {style.domain_id}")
        samples.append(Sample(
            image=img[None, :, :], label=label,
            domain_id=style.domain_id, sample_id=f"{i:05d}"))
    manifest = {
        "domain_id": style.domain_id,
        "style": asdict(style),
        "master_seed": master_seed,
        "domain_index": domain_index,
        "size": per_domain,
        "dims": dims,
        "generator_version": GENERATOR_VERSION,
    }
    return DomainDataset(samples, manifest)


def generate_benchmark(n_domains: int, per_domain: int, dims: int,
                       master_seed: int) -> list[DomainDataset]:
    """Render the full multi-domain benchmark, fully determined by master_seed."""
    if n_domains < 2:
        raise InputError(f"need at least 2 domains, got {n_domains}")
    if dims < 16:
        raise InputError(f"degenerate dims {dims}")
    styles = draw_styles(n_domains, master_seed)
    return [
        generate_domain(style, per_domain, dims, master_seed, i)
        for i, style in enumerate(styles)
    ]


def leave_one_domain_out(datasets: list[DomainDataset],
                         source_index: int) -> tuple[DomainDataset, list[DomainDataset]]:
    """Split into (source, targets); targets keep their original order."""
    if not (0 <= source_index < len(datasets)):
        raise InputError(f"source index {source_index} out of range for {len(datasets)} domains")
    source = datasets[source_index]
    targets = [d for i, d in enumerate(datasets) if i != source_index]
    return source, targets


def save_dataset(dataset: DomainDataset, root: str | Path) -> Path:
    """Write one domain under root/<domain_id>/ in the normative layout."""
    domain_dir = Path(root) / dataset.domain_id
    (domain_dir / "images").mkdir(parents=True, exist_ok=True)
    (domain_dir / "masks").mkdir(parents=True, exist_ok=True)
    for s in dataset:
        img8 = np.round(s.image[0] * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(domain_dir / "images" / f"{s.sample_id}.png")
        Image.fromarray(s.label * 255, mode="L").save(domain_dir / "masks" / f"{s.sample_id}.png")
    (domain_dir / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2))
    return domain_dir


def save_benchmark(datasets: list[DomainDataset], root: str | Path) -> Path:
    root = Path(root)
    for ds in datasets:
        save_dataset(ds, root)
    return root


def _load_gray(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if img.mode != "L":
        raise DataError(f"{path} is not 8-bit grayscale (mode {img.mode})")
    return np.asarray(img)


def load_dataset(domain_dir: str | Path) -> DomainDataset:
    """Load one domain directory (images/, masks/, optional manifest.json)."""
    domain_dir = Path(domain_dir)
    images_dir = domain_dir / "images"
    masks_dir = domain_dir / "masks"
    if not images_dir.is_dir():
        raise DataError(f"missing images directory {images_dir}")
    image_files = sorted(images_dir.glob("*.png"))
    if not image_files:
        raise DataError(f"no images found in {images_dir}")
    manifest_path = domain_dir / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    else:
        manifest = {"domain_id": domain_dir.name, "size": len(image_files)}
    samples = []
    for img_path in image_files:
        mask_path = masks_dir / img_path.name
        if not mask_path.exists():
            raise DataError(f"missing mask for image {img_path}")
        raw = _load_gray(img_path).astype(np.float32)
        lo, hi = raw.min(), raw.max()
        img = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
        mask_raw = _load_gray(mask_path)
        if mask_raw.shape != raw.shape:
            raise DataError(
                f"mask {mask_path} dims {mask_raw.shape} do not match image {raw.shape}")
        label = (mask_raw >= 128).astype(np.uint8)
        samples.append(Sample(
            image=img[None, :, :], label=label,
            domain_id=manifest["domain_id"], sample_id=img_path.stem))
    return DomainDataset(samples, manifest)


def load_benchmark(root: str | Path) -> list[DomainDataset]:
    """Load every domain directory under root, sorted by name."""
    root = Path(root)
    domain_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not domain_dirs:
        raise DataError(f"no domain directories under {root}")
    return [load_dataset(d) for d in domain_dirs]
