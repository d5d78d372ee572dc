"""Image -> global feature map X_g (channels-last) via a pluggable backbone."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class GlobalFeatureMap:
    values: torch.Tensor  # [B, H_f, W_f, C]
    stride: int  # image pixels per feature cell along each axis

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def flat(self) -> torch.Tensor:
        b, h, w, c = self.values.shape
        return self.values.reshape(b, h * w, c)

    def cell_box(self, row: int, col: int) -> tuple[int, int, int, int]:
        """Image-space box ``(x0, y0, x1, y1)`` covered by one feature cell."""
        s = self.stride
        return col * s, row * s, (col + 1) * s, (row + 1) * s


class ToyConv(nn.Module):
    """Stack of non-overlapping 2x2 stride-2 convolutions; 32x32x3 -> 4x4xC_raw with 3 stages.

    Each output cell sees exactly its own ``stride x stride`` pixel patch.
    """

    def __init__(self, image_size: int = 32, out_channels: int = 128, stages: int = 3):
        super().__init__()
        self.image_size = image_size
        widths = [max(out_channels >> (stages - 1 - i), 8) for i in range(stages)]
        widths[-1] = out_channels
        layers, c_in = [], 3
        for i, c_out in enumerate(widths):
            layers.append(nn.Conv2d(c_in, c_out, 2, stride=2))
            if i < stages - 1:
                layers.append(nn.ReLU())
            c_in = c_out
        self.net = nn.Sequential(*layers)
        self.out_channels = out_channels
        self.stride = 2 ** stages

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        x = self.net(images.permute(0, 3, 1, 2))
        return x.permute(0, 2, 3, 1)


# ---------------------------------------------------------------------------
# swin-like backbone


def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    b, h, wd, c = x.shape
    x = x.view(b, h // w, w, wd // w, w, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, w * w, c)


def window_reverse(windows: torch.Tensor, w: int, h: int, wd: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // w) * (wd // w))
    x = windows.view(b, h // w, wd // w, w, w, -1).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, wd, -1)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.window = window
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("bias_index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        q, k, v = self.qkv(x).view(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        attn = attn + self.bias_table[self.bias_index].permute(2, 0, 1)[None]
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        out = (attn.softmax(-1) @ v).transpose(1, 2).reshape(bw, n, c)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, heads: int, resolution: int, window: int, shift: int):
        super().__init__()
        if resolution <= window:
            window, shift = resolution, 0
        self.window, self.shift, self.resolution = window, shift, resolution
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim))
        self.register_buffer("attn_mask", self._shift_mask() if shift else None, persistent=False)

    def _shift_mask(self) -> torch.Tensor:
        r, w, s = self.resolution, self.window, self.shift
        region = torch.zeros(1, r, r, 1)
        cnt = 0
        for hs in (slice(0, -w), slice(-w, -s), slice(-s, None)):
            for ws in (slice(0, -w), slice(-w, -s), slice(-s, None)):
                region[:, hs, ws] = cnt
                cnt += 1
        ids = window_partition(region, w).squeeze(-1)
        diff = ids[:, None, :] - ids[:, :, None]
        return diff.ne(0).float() * -100.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, (-self.shift, -self.shift), dims=(1, 2))
        y = window_reverse(self.attn(window_partition(y, self.window), self.attn_mask), self.window, h, w)
        if self.shift:
            y = torch.roll(y, (self.shift, self.shift), dims=(1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduce = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        return self.reduce(self.norm(x))


class SwinLike(nn.Module):
    """Patch embedding plus shifted-window attention stages with patch merging.

    At ``image_size=224, embed_dim=128`` the four stages are 56x56x128,
    28x28x256, 14x14x512 and 7x7x1024.
    """

    def __init__(self, image_size: int = 224, patch: int = 4, embed_dim: int = 128,
                 depths: tuple[int, ...] = (2, 2, 2, 2), heads: tuple[int, ...] = (4, 8, 16, 32), window: int = 7):
        super().__init__()
        self.image_size = image_size
        self.patch_embed = nn.Conv2d(3, embed_dim, patch, stride=patch)
        self.patch_norm = nn.LayerNorm(embed_dim)
        self.stages = nn.ModuleList()
        res, dim = image_size // patch, embed_dim
        for i, (depth, h) in enumerate(zip(depths, heads)):
            blocks = [SwinBlock(dim, h, res, window, 0 if j % 2 == 0 else window // 2) for j in range(depth)]
            if i < len(depths) - 1:
                blocks.append(PatchMerging(dim))
                res, dim = res // 2, dim * 2
            self.stages.append(nn.Sequential(*blocks))
        self.out_channels = dim
        self.stride = image_size // res

    def forward(self, images: torch.Tensor, return_stages: bool = False):
        x = self.patch_norm(self.patch_embed(images.permute(0, 3, 1, 2)).permute(0, 2, 3, 1))
        outs = []
        for stage in self.stages:
            blocks = list(stage)
            merge = blocks[-1] if isinstance(blocks[-1], PatchMerging) else None
            for blk in blocks[:-1] if merge else blocks:
                x = blk(x)
            outs.append(x)
            if merge:
                x = merge(x)
        return (x, outs) if return_stages else x


def build_backbone(kind: str, image_size: int, raw_channels: int, **kw) -> nn.Module:
    if kind == "toy-conv":
        return ToyConv(image_size, raw_channels, kw.get("stages", 3))
    if kind == "swin-like":
        return SwinLike(image_size, kw.get("patch", 4), kw.get("embed_dim", 128), tuple(kw.get("depths", (2, 2, 2, 2))),
                        tuple(kw.get("heads", (4, 8, 16, 32))), kw.get("window", 7))
    raise ValueError(f"unknown backbone kind {kind!r}")


def encode_image(images: torch.Tensor, backbone: nn.Module) -> torch.Tensor:
    size = backbone.image_size
    if images.dim() != 4 or tuple(images.shape[1:]) != (size, size, 3):
        raise ValueError(f"expected images [B, {size}, {size}, 3], got {tuple(images.shape)}")
    return backbone(images)


class VisionEncoder(nn.Module):
    """Backbone followed by a pointwise (1x1) projection to the shared width."""

    def __init__(self, backbone: nn.Module, width: int):
        super().__init__()
        self.backbone = backbone
        self.pointwise = nn.Linear(backbone.out_channels, width)

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def forward(self, images: torch.Tensor) -> GlobalFeatureMap:
        return project_global(encode_image(images, self.backbone), self.pointwise, self.stride)


def project_global(raw: torch.Tensor, pointwise: nn.Linear, stride: int = 1) -> GlobalFeatureMap:
    if raw.shape[-1] != pointwise.in_features:
        raise ValueError(f"raw map has {raw.shape[-1]} channels, projection expects {pointwise.in_features}")
    return GlobalFeatureMap(values=F.linear(raw, pointwise.weight, pointwise.bias), stride=stride)
