"""Learnable components.

Five pieces with a SAM-style factorization, sized to train from scratch
on a CPU in minutes:

- image encoder: 4 conv blocks, total stride 8, embed dim 64
- sparse prompt encoder: sinusoidal position encoding + learned type
  embeddings for point labels and box corners, plus a learned "no-point"
  padding token that represents the absent sparse prompt
- dense prompt encoder: small conv downsampler for mask prompts, with a
  learned null embedding for the absent mask
- mask decoder: 2 two-way cross-attention layers (tokens <-> grid),
  bilinear upsample, dot-product head to full-resolution logits
- error decoder: 3-stage upsampling decoder over the concatenation of
  image and mask embeddings, full-resolution error logits

All forward ops are deterministic given parameters and inputs. Per-sample
ops (encode_*/decode_*) delegate to batched internals shared with the
trainer, so both paths use identical code and weights.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from cosam.errors import ConfigError, InputError
from cosam.geometry import Box, Point, PromptSet

CHECKPOINT_FORMAT = "cosam-ckpt-1"


@dataclass(frozen=True)
class ArchConfig:
    """Architecture hyper-parameters; hashed into checkpoints."""

    embed_dim: int = 64
    stride: int = 8
    enc_channels: tuple = (16, 32, 64)
    attn_layers: int = 2
    attn_heads: int = 4
    err_channels: tuple = (32, 16, 8)

    def hash(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ImageEmbedding:
    features: torch.Tensor  # (d, h, w)
    image_size: tuple[int, int]  # (H, W)


@dataclass
class SparseEmbedding:
    tokens: torch.Tensor  # (N, d); N = #points + 2 * #boxes
    kinds: list[str]  # per-token: positive-point | negative-point | box-corner


@dataclass
class DenseEmbedding:
    features: torch.Tensor  # (d, h, w), same grid as the paired ImageEmbedding


def _sinusoidal_pe(coords: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal encoding of normalized (x, y) coords in [0, 1].

    coords: (..., 2) -> (..., dim). Half the channels encode x, half y,
    each with geometrically spaced frequencies.
    """
    nf = dim // 4
    freqs = (2.0 ** torch.arange(nf, dtype=coords.dtype, device=coords.device)) * math.pi
    x = coords[..., 0:1] * freqs
    y = coords[..., 1:2] * freqs
    return torch.cat([torch.sin(x), torch.cos(x), torch.sin(y), torch.cos(y)], dim=-1)


def _grid_pe(h: int, w: int, dim: int, dtype, device) -> torch.Tensor:
    """Position encoding for grid cells at their pixel centers, (h*w, dim)."""
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    coords = torch.stack([(xs + 0.5) / w, (ys + 0.5) / h], dim=-1).reshape(-1, 2)
    return _sinusoidal_pe(coords, dim)


class ImageEncoder(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        c1, c2, c3 = arch.enc_channels
        d = arch.embed_dim

        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                nn.GroupNorm(min(8, cout), cout),
                nn.ReLU(inplace=True),
            )

        self.blocks = nn.Sequential(
            block(1, c1, 2),
            block(c1, c2, 2),
            block(c2, c3, 2),
            block(c3, d, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # (B,1,H,W) -> (B,d,h,w)
        return self.blocks(x)


class SparsePromptEncoder(nn.Module):
    """Tokens for points and box corners; a learned token for no prompt."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.embed_dim
        self.point_label_embed = nn.Embedding(2, d)  # 0: negative, 1: positive
        self.corner_embed = nn.Embedding(2, d)  # 0: top-left, 1: bottom-right
        self.no_point_token = nn.Parameter(torch.randn(d) * 0.02)

    def _pe(self, x: float, y: float, image_size: tuple[int, int]) -> torch.Tensor:
        h, w = image_size
        coords = torch.tensor(
            [(x + 0.5) / w, (y + 0.5) / h],
            dtype=self.no_point_token.dtype,
            device=self.no_point_token.device,
        )
        return _sinusoidal_pe(coords, self.point_label_embed.embedding_dim)

    def forward(self, points: Sequence[Point], box: Optional[Box],
                image_size: tuple[int, int]) -> SparseEmbedding:
        h, w = image_size
        tokens = []
        kinds = []
        for x, y, lab in points or []:
            if not (0 <= x < w and 0 <= y < h):
                raise InputError(f"point ({x}, {y}) outside {w}x{h} image")
            if lab not in (0, 1):
                raise InputError(f"point label {lab} not in {{0, 1}}")
            tokens.append(self._pe(x, y, image_size) + self.point_label_embed.weight[lab])
            kinds.append("positive-point" if lab == 1 else "negative-point")
        if box is not None:
            if not (0 <= box.x0 <= box.x1 < w and 0 <= box.y0 <= box.y1 < h):
                raise InputError(f"box {box.as_tuple()} outside {w}x{h} image")
            tokens.append(self._pe(box.x0, box.y0, image_size) + self.corner_embed.weight[0])
            tokens.append(self._pe(box.x1, box.y1, image_size) + self.corner_embed.weight[1])
            kinds.extend(["box-corner", "box-corner"])
        if tokens:
            stacked = torch.stack(tokens)
        else:
            stacked = self.no_point_token.new_zeros((0, self.no_point_token.numel()))
        return SparseEmbedding(stacked, kinds)


class DensePromptEncoder(nn.Module):
    """Conv downsampler for mask prompts (stride 8); null embedding otherwise."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        if arch.stride != 8:
            raise ConfigError(f"dense prompt encoder supports stride 8, got {arch.stride}")
        d = arch.embed_dim

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1),
                nn.GroupNorm(min(8, cout), cout),
                nn.ReLU(inplace=True),
            )

        self.down = nn.Sequential(block(1, 8), block(8, 16), block(16, 32))
        self.proj = nn.Conv2d(32, d, 1)
        self.null_embed = nn.Parameter(torch.randn(d) * 0.02)

    def forward(self, mask: torch.Tensor) -> torch.Tensor:  # (B,1,H,W) -> (B,d,h,w)
        return self.proj(self.down(mask))

    def null_grid(self, grid_hw: tuple[int, int]) -> torch.Tensor:  # (d,h,w)
        h, w = grid_hw
        return self.null_embed[:, None, None].expand(-1, h, w)


class TwoWayLayer(nn.Module):
    """One round of token self-attention, token->grid and grid->token cross-attention."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross_t2g = nn.MultiheadAttention(d, heads, batch_first=True)
        self.cross_g2t = nn.MultiheadAttention(d, heads, batch_first=True)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.ReLU(inplace=True), nn.Linear(2 * d, d))
        self.norm1 = nn.LayerNorm(d)
        self.norm2 = nn.LayerNorm(d)
        self.norm3 = nn.LayerNorm(d)
        self.norm4 = nn.LayerNorm(d)

    def forward(self, tokens, grid, grid_pe):
        attn, _ = self.self_attn(tokens, tokens, tokens, need_weights=False)
        tokens = self.norm1(tokens + attn)
        attn, _ = self.cross_t2g(tokens, grid + grid_pe, grid, need_weights=False)
        tokens = self.norm2(tokens + attn)
        tokens = self.norm3(tokens + self.mlp(tokens))
        attn, _ = self.cross_g2t(grid + grid_pe, tokens, tokens, need_weights=False)
        grid = self.norm4(grid + attn)
        return tokens, grid


class MaskDecoder(nn.Module):
    """Cross-attention between prompt tokens and the embedding grid, then a
    dot-product head on bilinearly upsampled grid features."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.embed_dim
        self.stride = arch.stride
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.layers = nn.ModuleList(TwoWayLayer(d, arch.attn_heads) for _ in range(arch.attn_layers))
        self.token_proj = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, d))
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, img: torch.Tensor, sparse_tokens: torch.Tensor,
                dense: torch.Tensor, image_size: tuple[int, int]) -> torch.Tensor:
        # img, dense: (B,d,h,w); sparse_tokens: (B,N,d); returns (B,H,W) logits
        b, d, h, w = img.shape
        grid = (img + dense).flatten(2).transpose(1, 2)  # (B, hw, d)
        pe = _grid_pe(h, w, d, img.dtype, img.device).unsqueeze(0).expand(b, -1, -1)
        tokens = torch.cat(
            [self.mask_token.expand(b, 1, d), sparse_tokens], dim=1)
        for layer in self.layers:
            tokens, grid = layer(tokens, grid, pe)
        feats = grid.transpose(1, 2).reshape(b, d, h, w)
        feats = F.interpolate(feats, size=image_size, mode="bilinear", align_corners=False)
        weight = self.token_proj(tokens[:, 0, :])  # (B, d)
        logits = torch.einsum("bdhw,bd->bhw", feats, weight) / math.sqrt(d) + self.bias
        return logits


class ErrorDecoder(nn.Module):
    """3-stage upsampling decoder over concat(image, mask) embeddings."""

    def __init__(self, arch: ArchConfig):
        super().__init__()
        d = arch.embed_dim
        c1, c2, c3 = arch.err_channels

        def stage(cin, cout):
            return nn.Sequential(
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.GroupNorm(min(8, cout), cout),
                nn.ReLU(inplace=True),
            )

        self.stages = nn.Sequential(stage(2 * d, c1), stage(c1, c2), stage(c2, c3))
        self.head = nn.Conv2d(c3, 1, 1)

    def forward(self, img: torch.Tensor, dense: torch.Tensor) -> torch.Tensor:
        # (B,d,h,w) x2 -> (B,H,W) logits
        x = torch.cat([img, dense], dim=1)
        return self.head(self.stages(x)).squeeze(1)


class CoSamModel(nn.Module):
    """The five components with per-sample and batched forward paths."""

    def __init__(self, arch: ArchConfig = ArchConfig(), mode: str = "scratch"):
        super().__init__()
        if mode not in ("scratch", "frozen-backbone"):
            raise ConfigError(f"unknown training mode {mode!r}")
        self.arch = arch
        self.mode = mode
        self.image_encoder = ImageEncoder(arch)
        self.sparse_encoder = SparsePromptEncoder(arch)
        self.dense_encoder = DensePromptEncoder(arch)
        self.mask_decoder = MaskDecoder(arch)
        self.error_decoder = ErrorDecoder(arch)
        if mode == "frozen-backbone":
            self.apply_frozen_backbone()

    def apply_frozen_backbone(self) -> None:
        for module in (self.image_encoder, self.sparse_encoder, self.dense_encoder):
            for p in module.parameters():
                p.requires_grad_(False)

    # --- per-sample spec operations -------------------------------------

    def _check_image_dims(self, h: int, w: int) -> None:
        s = self.arch.stride
        for name, dim in (("H", h), ("W", w)):
            if dim < s or dim % s != 0:
                raise ConfigError(
                    f"image dim {name}={dim} must be >= stride {s} and divisible by it")

    def encode_image(self, image: np.ndarray | torch.Tensor) -> ImageEmbedding:
        """Embed one (1, H, W) image in [0, 1] to a (d, H/s, W/s) grid."""
        x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        if x.ndim != 3 or x.shape[0] != 1:
            raise InputError(f"expected (1, H, W) image, got {tuple(x.shape)}")
        _, h, w = x.shape
        self._check_image_dims(h, w)
        feats = self.image_encoder(x.unsqueeze(0)).squeeze(0)
        return ImageEmbedding(feats, (h, w))

    def encode_sparse_prompts(self, points: Sequence[Point], box: Optional[Box],
                              image_size: tuple[int, int]) -> SparseEmbedding:
        return self.sparse_encoder(points, box, image_size)

    def encode_dense_prompt(self, mask: Optional[np.ndarray | torch.Tensor],
                            image_size: tuple[int, int]) -> DenseEmbedding:
        h, w = image_size
        gh, gw = h // self.arch.stride, w // self.arch.stride
        if mask is None:
            return DenseEmbedding(self.dense_encoder.null_grid((gh, gw)))
        m = torch.as_tensor(np.asarray(mask), dtype=torch.float32)
        if m.shape != (h, w):
            raise InputError(f"mask dims {tuple(m.shape)} do not match image {image_size}")
        feats = self.dense_encoder(m.view(1, 1, h, w)).squeeze(0)
        return DenseEmbedding(feats)

    def decode_mask(self, img: ImageEmbedding, sparse: SparseEmbedding,
                    dense: DenseEmbedding) -> torch.Tensor:
        """Full-resolution mask logits (H, W)."""
        if dense.features.shape[1:] != img.features.shape[1:]:
            raise InputError("dense embedding grid does not match image embedding grid")
        tokens = sparse.tokens
        if tokens.shape[0] == 0:
            # absent sparse prompt: the learned padding token is the null
            tokens = self.sparse_encoder.no_point_token.unsqueeze(0)
        return self.mask_decoder(
            img.features.unsqueeze(0), tokens.unsqueeze(0),
            dense.features.unsqueeze(0), img.image_size,
        ).squeeze(0)

    def decode_error(self, img: ImageEmbedding, mask_emb: DenseEmbedding) -> torch.Tensor:
        """Full-resolution error logits (H, W)."""
        if mask_emb.features.shape[1:] != img.features.shape[1:]:
            raise InputError("mask embedding grid does not match image embedding grid")
        return self.error_decoder(
            img.features.unsqueeze(0), mask_emb.features.unsqueeze(0)).squeeze(0)

    # --- batched helpers used by the trainer ----------------------------

    def encode_prompt_batch(self, prompts: Sequence[PromptSet],
                            image_size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Encode a batch of prompt sets: (B, N, d) sparse tokens padded with
        the no-point token, and (B, d, h, w) dense embeddings."""
        h, w = image_size
        gh, gw = h // self.arch.stride, w // self.arch.stride
        per_sample = [
            self.sparse_encoder(p.points or [], p.box, image_size).tokens for p in prompts
        ]
        n = max((t.shape[0] for t in per_sample), default=0)
        n = max(n, 1)
        pad = self.sparse_encoder.no_point_token
        tokens = torch.stack([
            torch.cat([t, pad.expand(n - t.shape[0], -1)]) if t.shape[0] < n else t
            for t in per_sample
        ])
        dense = []
        for p in prompts:
            if p.mask is None:
                dense.append(self.dense_encoder.null_grid((gh, gw)))
            else:
                m = torch.as_tensor(np.asarray(p.mask), dtype=torch.float32)
                dense.append(self.dense_encoder(m.view(1, 1, h, w)).squeeze(0))
        return tokens, torch.stack(dense)

    def coarse_logits(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Prompt-free forward for a (B, 1, H, W) batch.

        Returns (image features (B,d,h,w), coarse logits (B,H,W))."""
        b, _, h, w = images.shape
        self._check_image_dims(h, w)
        feats = self.image_encoder(images)
        gh, gw = feats.shape[2], feats.shape[3]
        tokens = self.sparse_encoder.no_point_token.expand(b, 1, -1)
        dense = self.dense_encoder.null_grid((gh, gw)).expand(b, -1, -1, -1)
        logits = self.mask_decoder(feats, tokens, dense, (h, w))
        return feats, logits

    def prompted_logits(self, feats: torch.Tensor, prompts: Sequence[PromptSet],
                        image_size: tuple[int, int]) -> torch.Tensor:
        tokens, dense = self.encode_prompt_batch(prompts, image_size)
        return self.mask_decoder(feats, tokens, dense, image_size)

    def error_logits(self, feats: torch.Tensor, masks: torch.Tensor,
                     image_size: tuple[int, int]) -> torch.Tensor:
        """Error decoder forward for (B,d,h,w) features and (B,H,W) masks."""
        h, w = image_size
        dense = self.dense_encoder(masks.view(-1, 1, h, w))
        return self.error_decoder(feats, dense)


def build_model(arch: ArchConfig = ArchConfig(), seed: int = 0,
                mode: str = "scratch") -> CoSamModel:
    """Construct a model with seed-determined initial parameters."""
    gen_state = torch.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = CoSamModel(arch, mode)
    finally:
        torch.set_rng_state(gen_state)
    return model


def trainable_parameters(model: CoSamModel):
    return [p for p in model.parameters() if p.requires_grad]


def save_checkpoint(model: CoSamModel, path) -> None:
    frozen = [n for n, p in model.named_parameters() if not p.requires_grad]
    torch.save(
        {
            "format_version": CHECKPOINT_FORMAT,
            "arch": asdict(model.arch),
            "arch_hash": model.arch.hash(),
            "mode": model.mode,
            "frozen": frozen,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path, expected_arch: Optional[ArchConfig] = None) -> CoSamModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigError(
            f"checkpoint format {blob.get('format_version')!r} != {CHECKPOINT_FORMAT!r}")
    arch_dict = dict(blob["arch"])
    for key in ("enc_channels", "err_channels"):
        arch_dict[key] = tuple(arch_dict[key])
    arch = ArchConfig(**arch_dict)
    if arch.hash() != blob["arch_hash"]:
        raise ConfigError("checkpoint architecture hash mismatch")
    if expected_arch is not None and expected_arch.hash() != arch.hash():
        raise ConfigError(
            f"checkpoint arch hash {arch.hash()} does not match expected {expected_arch.hash()}")
    model = CoSamModel(arch, blob.get("mode", "scratch"))
    model.load_state_dict(blob["state_dict"])
    frozen = set(blob.get("frozen", []))
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
    return model
