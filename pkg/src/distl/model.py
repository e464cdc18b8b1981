"""Vision Transformer backbone with classification and projection heads.

Also holds the small CNN adapter used only for the GradCAM localization
comparison.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from distl.errors import InvalidInputError, InvalidSpecError


@dataclass(frozen=True)
class ModelSpec:
    input_side: int = 32
    patch_side: int = 4
    depth: int = 4
    heads: int = 2
    embed_dim: int = 64
    num_classes: int = 2
    proj_dim: int = 256
    mlp_ratio: float = 4.0
    head_hidden: int = 128
    proj_bottleneck: int = 64
    init: str = "fan_in"  # "fan_in" (torch layer defaults) or "trunc_normal" (std 0.02)

    def __post_init__(self):
        if self.input_side % self.patch_side:
            raise InvalidSpecError(
                f"input_side {self.input_side} not divisible by patch_side {self.patch_side}"
            )
        if self.embed_dim % self.heads:
            raise InvalidSpecError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise InvalidSpecError("depth must be >= 1")
        if self.num_classes < 1 or self.proj_dim < 1:
            raise InvalidSpecError("num_classes and proj_dim must be positive")
        if self.init not in ("fan_in", "trunc_normal"):
            raise InvalidSpecError(f"unknown init scheme {self.init!r}")

    @property
    def grid(self) -> int:
        return self.input_side // self.patch_side

    @property
    def supported_sides(self) -> tuple[int, ...]:
        sides = [self.input_side]
        half = self.input_side // 2
        if half >= self.patch_side and half % self.patch_side == 0:
            sides.append(half)
        return tuple(sides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def vit_small(cls, num_classes: int = 2) -> "ModelSpec":
        return cls(
            input_side=256, patch_side=16, depth=12, heads=6, embed_dim=384,
            num_classes=num_classes, proj_dim=65536, head_hidden=2048, proj_bottleneck=256,
            init="trunc_normal",
        )


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, return_attention: bool = False):
        y, attn = self.attn(self.norm1(x))
        if return_attention:
            return attn
        x = x + y
        return x + self.mlp(self.norm2(x))


def _mlp3(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden), nn.GELU(),
        nn.Linear(hidden, hidden), nn.GELU(),
        nn.Linear(hidden, out_dim),
    )


class ProjectionHead(nn.Module):
    """Three-layer MLP to a bottleneck, L2-normalized, then a linear output layer."""

    def __init__(self, in_dim: int, hidden: int, bottleneck: int, out_dim: int):
        super().__init__()
        self.mlp = _mlp3(in_dim, hidden, bottleneck)
        self.last = nn.Linear(bottleneck, out_dim, bias=False)

    def forward(self, x):
        x = F.normalize(self.mlp(x), dim=-1, eps=1e-6)
        return self.last(x)


class VisionTransformer(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        d = spec.embed_dim
        self.patch_embed = nn.Conv2d(1, d, kernel_size=spec.patch_side, stride=spec.patch_side)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, spec.grid * spec.grid + 1, d))
        self.blocks = nn.ModuleList([Block(d, spec.heads, spec.mlp_ratio) for _ in range(spec.depth)])
        self.norm = nn.LayerNorm(d)
        self.cls_head = _mlp3(d, spec.head_hidden, spec.num_classes)
        self.proj_head = ProjectionHead(d, spec.head_hidden, spec.proj_bottleneck, spec.proj_dim)

    def interpolate_pos_encoding(self, grid: int) -> torch.Tensor:
        if grid == self.spec.grid:
            return self.pos_embed
        cls_pos, patch_pos = self.pos_embed[:, :1], self.pos_embed[:, 1:]
        d = patch_pos.shape[-1]
        g0 = self.spec.grid
        patch_pos = patch_pos.reshape(1, g0, g0, d).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid, grid), mode="bicubic", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid * grid, d)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        side = x.shape[-1]
        if side not in self.spec.supported_sides or x.shape[-2] != side:
            raise InvalidInputError(
                f"unsupported input side {tuple(x.shape[-2:])}; expected one of {self.spec.supported_sides}"
            )
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1)
        return x + self.interpolate_pos_encoding(side // self.spec.patch_side)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.tokens(x)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]

    def forward(self, x: torch.Tensor):
        feats = self.features(x)
        return self.cls_head(feats), self.proj_head(feats)

    def last_attention(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax attention of the last block, shape (batch, heads, tokens, tokens)."""
        x = self.tokens(x)
        for blk in self.blocks[:-1]:
            x = blk(x)
        return self.blocks[-1](x, return_attention=True)

    def reset_classifier(self, num_classes: int, generator: torch.Generator | None = None):
        spec = self.spec
        self.spec = ModelSpec(**{**spec.to_dict(), "num_classes": num_classes})
        self.cls_head = _mlp3(spec.embed_dim, spec.head_hidden, num_classes)
        _init_weights(self.cls_head, generator, spec.init)


def _init_weights(module: nn.Module, generator: torch.Generator | None, scheme: str = "trunc_normal"):
    """``trunc_normal``: N(0, 0.02) truncated at 2 std, zero bias.
    ``fan_in``: uniform(+-1/sqrt(fan_in)) weights and biases, the torch layer default."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                if scheme == "trunc_normal":
                    nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
                    if m.bias is not None:
                        m.bias.zero_()
                else:
                    bound = 1.0 / math.sqrt(m.weight[0].numel())
                    nn.init.uniform_(m.weight, -bound, bound, generator=generator)
                    if m.bias is not None:
                        nn.init.uniform_(m.bias, -bound, bound, generator=generator)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


def build_model(spec: ModelSpec, seed: int | torch.Generator = 0) -> VisionTransformer:
    """Construct a ViT for ``spec``, initialized deterministically per ``spec.init``."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    model = VisionTransformer(spec)
    _init_weights(model, gen, spec.init)
    with torch.no_grad():
        nn.init.trunc_normal_(model.pos_embed, std=0.02, a=-0.04, b=0.04, generator=gen)
        nn.init.trunc_normal_(model.cls_token, std=0.02, a=-0.04, b=0.04, generator=gen)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def to_batch(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr)


@torch.no_grad()
def forward(model: VisionTransformer, batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Inference-mode forward pass returning (class_logits, projections)."""
    model.eval()
    x = to_batch(batch).to(next(model.parameters()).dtype)
    return model(x)


@torch.no_grad()
def predict_proba(model: VisionTransformer, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = model(to_batch(images[i:i + batch_size]))
        out.append(logits.softmax(-1).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, model.spec.num_classes))


@dataclass
class AttentionMap:
    per_head: np.ndarray  # (heads, grid, grid), min-max normalized per head
    rows: np.ndarray  # (heads, tokens) raw class-token attention rows, each sums to 1

    @property
    def heads(self) -> int:
        return self.per_head.shape[0]

    def upsample(self, side: int) -> np.ndarray:
        grid = self.per_head.shape[-1]
        if side % grid:
            raise InvalidInputError(f"side {side} not a multiple of grid {grid}")
        k = side // grid
        return np.repeat(np.repeat(self.per_head, k, axis=1), k, axis=2)


def normalize_per_head(maps: np.ndarray) -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    flat = maps.reshape(maps.shape[0], -1)
    lo = flat.min(axis=1, keepdims=True)
    span = flat.max(axis=1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (flat - lo) / safe, 0.0)
    return out.reshape(maps.shape)


def attention_map_from_rows(rows: np.ndarray, grid: int) -> AttentionMap:
    """Build an AttentionMap from class-token attention rows over [cls] + patches."""
    rows = np.asarray(rows, dtype=np.float64)
    patch = rows[:, 1:].reshape(rows.shape[0], grid, grid)
    return AttentionMap(per_head=normalize_per_head(patch), rows=rows)


@torch.no_grad()
def extract_attention(model: VisionTransformer, img) -> AttentionMap:
    model.eval()
    x = to_batch([img]).to(next(model.parameters()).dtype)
    if x.shape[-1] != model.spec.input_side:
        raise InvalidInputError("attention extraction needs a full-side image")
    attn = model.last_attention(x)[0]  # heads x tokens x tokens
    return attention_map_from_rows(attn[:, 0, :].double().numpy(), model.spec.grid)


class SmallCNN(nn.Module):
    """Three conv stages, global average pooling, linear classifier."""

    def __init__(self, num_classes: int = 2, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(1, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.ReLU(),
        )
        self.fc = nn.Linear(2 * width, num_classes)
        self.trained = False

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        f = self.features(x)
        return self.fc(f.mean(dim=(2, 3)))


def build_cnn(num_classes: int = 2, seed: int = 0, width: int = 16) -> SmallCNN:
    gen = torch.Generator().manual_seed(int(seed))
    cnn = SmallCNN(num_classes, width)
    with torch.no_grad():
        for m in cnn.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu", generator=gen)
                m.bias.zero_()
    return cnn


def gradcam_combine(features: np.ndarray, grads: np.ndarray, side: int | None = None) -> np.ndarray:
    """ReLU of the gradient-weighted sum of feature maps, min-max normalized.

    ``features`` and ``grads`` are (channels, h, w). Weights are the spatial mean
    of the gradients. An all-zero map stays all-zero.
    """
    weights = np.asarray(grads, dtype=np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, np.asarray(features, dtype=np.float64), axes=1), 0.0)
    if side is not None and cam.shape[0] != side:
        cam = cv2.resize(cam, (side, side), interpolation=cv2.INTER_LINEAR)
        cam = np.maximum(cam, 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def gradcam(cnn: SmallCNN, img, target_class: int) -> tuple[np.ndarray, dict]:
    """GradCAM heatmap in [0, 1] at input resolution plus metadata."""
    if not 0 <= target_class < cnn.fc.out_features:
        raise InvalidInputError(f"target_class {target_class} out of range")
    cnn.eval()
    x = to_batch([img])
    side = x.shape[-1]
    feats = cnn.features(x.unsqueeze(1))
    feats.retain_grad()
    logits = cnn.fc(feats.mean(dim=(2, 3)))
    cnn.zero_grad(set_to_none=True)
    logits[0, target_class].backward()
    heat = gradcam_combine(feats[0].detach().numpy(), feats.grad[0].numpy(), side)
    meta = {"trained": bool(cnn.trained), "target_class": int(target_class)}
    if not cnn.trained:
        meta["warning"] = "CNN adapter has not been trained"
    return heat, meta

