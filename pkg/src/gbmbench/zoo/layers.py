"""Building blocks shared across the model zoo.

Modules that do arithmetic outside standard torch layers (attention
products, the selective scan) implement ``macs(inputs, output)`` so the
profiler can count them.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_bn_relu3d(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


def conv_bn_relu2d(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def classifier_head(dim: int, hidden: int, num_classes: int = 3) -> nn.Sequential:
    """``dim -> hidden -> num_classes`` projection + linear classifier."""
    return nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, num_classes))


class SliceSampler(nn.Module):
    """Pick ``n`` evenly spaced axial slices from ``(B, C, D, H, W)``.

    Returns ``(B, n, C, H, W)``.
    """

    def __init__(self, n_slices: int):
        super().__init__()
        self.n_slices = n_slices

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        depth = x.shape[2]
        if self.n_slices > depth:
            raise ValueError(f"need {self.n_slices} slices, volume has {depth}")
        if self.n_slices == depth:
            idx = torch.arange(depth, device=x.device)
        else:
            idx = torch.linspace(0, depth - 1, self.n_slices, device=x.device).round().long()
        return x.index_select(2, idx).transpose(1, 2)


class SelfAttention(nn.Module):
    """Multi-head self-attention over ``(B, N, C)`` tokens."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def attention_bias(self, n: int) -> torch.Tensor | None:
        return None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.attention_bias(n)
        if bias is not None:
            attn = attn + bias
        if mask is not None:
            # mask: (nW, N, N), x batches are ordered (B, nW)
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(b, self.heads, n, n)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)

    def macs(self, inputs, output) -> int:
        b, n, c = inputs[0].shape
        # q.k^T scores plus attention-weighted sum of values
        return 2 * b * self.heads * n * n * self.head_dim


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float = 4.0):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(nn.Module):
    """Patch embedding + CLS token + learned positions + transformer stack.

    ``ndim`` selects 2D images or 3D volumes. ``forward`` returns the final
    normalised CLS embedding.
    """

    def __init__(self, ndim: int, in_chans: int, image_size: int, patch: int, dim: int, depth: int,
                 heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"patch {patch} does not divide image size {image_size}")
        conv = nn.Conv2d if ndim == 2 else nn.Conv3d
        self.patch_embed = conv(in_chans, dim, patch, stride=patch)
        n_tokens = (image_size // patch) ** ndim
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens + 1, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.Sequential(*[TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        x = self.blocks(x)
        return self.norm(x)[:, 0]


# ---------------------------------------------------------------------------
# 3D shifted-window attention
# ---------------------------------------------------------------------------

def window_partition(x: torch.Tensor, w: int) -> torch.Tensor:
    """``(B, D, H, W, C)`` -> ``(B * nW, w**3, C)``."""
    b, d, h, ww, c = x.shape
    x = x.view(b, d // w, w, h // w, w, ww // w, w, c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, w ** 3, c)


def window_reverse(windows: torch.Tensor, w: int, b: int, d: int, h: int, ww: int) -> torch.Tensor:
    c = windows.shape[-1]
    x = windows.view(b, d // w, h // w, ww // w, w, w, w, c)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, d, h, ww, c)


class WindowAttention3D(SelfAttention):
    """Self-attention inside cubic windows with a learned relative position bias."""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__(dim, heads)
        self.window = window
        if window == 1:
            # a single-token window has nothing to bias
            self.relative_position_bias_table = None
            return
        span = 2 * window - 1
        self.relative_position_bias_table = nn.Parameter(torch.zeros(span ** 3, heads))
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        coords = torch.stack(torch.meshgrid(*[torch.arange(window)] * 3, indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        index = rel[..., 0] * span * span + rel[..., 1] * span + rel[..., 2]
        self.register_buffer("relative_position_index", index, persistent=False)

    def attention_bias(self, n: int) -> torch.Tensor | None:
        if self.relative_position_bias_table is None:
            return None
        bias = self.relative_position_bias_table[self.relative_position_index.reshape(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1)[None]


def shifted_window_mask(res: int, window: int, shift: int, device=None) -> torch.Tensor:
    """Additive mask stopping attention across regions wrapped by the cyclic shift."""
    img = torch.zeros(1, res, res, res, 1, device=device)
    cnt = 0
    sl = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for d in sl:
        for h in sl:
            for w in sl:
                img[:, d, h, w, :] = cnt
                cnt += 1
    win = window_partition(img, window).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return diff.ne(0).float() * -100.0


class SwinBlock3D(nn.Module):
    def __init__(self, dim: int, heads: int, res: int, window: int, shift: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.res = res
        self.window = min(window, res)
        self.shift = shift if res > self.window else 0
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3D(dim, heads, self.window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        if self.shift:
            self.register_buffer("attn_mask", shifted_window_mask(res, self.window, self.shift), persistent=False)
        else:
            self.attn_mask = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        y = self.norm1(x)
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        win = window_partition(y, self.window)
        win = self.attn(win, mask=self.attn_mask)
        y = window_reverse(win, self.window, b, d, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        x = x + y
        return x + self.mlp(self.norm2(x))


class PatchMerging3D(nn.Module):
    """Concatenate 2x2x2 neighbours (8C) and project to 2C."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


# ---------------------------------------------------------------------------
# selective state space (Mamba) blocks
# ---------------------------------------------------------------------------

class SelectiveScan(nn.Module):
    """Discretised input-dependent linear recurrence.

    ``h_t = exp(dt_t A) h_{t-1} + dt_t B_t x_t``, ``y_t = C_t h_t + D x_t``.
    Plain sequential loop over the sequence axis.
    """

    def forward(self, x, dt, A, B, C, D):
        bsz, length, d_inner = x.shape
        h = x.new_zeros(bsz, d_inner, A.shape[1])
        ys = []
        for t in range(length):
            dt_t = dt[:, t, :, None]
            h = torch.exp(dt_t * A) * h + dt_t * B[:, t, None, :] * x[:, t, :, None]
            ys.append((h * C[:, t, None, :]).sum(-1))
        y = torch.stack(ys, dim=1)
        return y + x * D

    def macs(self, inputs, output) -> int:
        x, _, A = inputs[0], inputs[1], inputs[2]
        bsz, length, d_inner = x.shape
        # state decay, input injection and readout per state element
        return 3 * bsz * length * d_inner * A.shape[1]


class MambaMixer(nn.Module):
    def __init__(self, d_model: int, d_state: int = 16, d_conv: int = 4, expand: int = 2):
        super().__init__()
        d_inner = expand * d_model
        self.dt_rank = math.ceil(d_model / 16)
        self.d_state = d_state
        self.in_proj = nn.Linear(d_model, 2 * d_inner, bias=False)
        self.conv1d = nn.Conv1d(d_inner, d_inner, d_conv, groups=d_inner, padding=d_conv - 1)
        self.x_proj = nn.Linear(d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, d_inner)
        dt = torch.exp(torch.rand(d_inner) * (math.log(0.1) - math.log(1e-3)) + math.log(1e-3)).clamp(min=1e-4)
        with torch.no_grad():
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.float32)).repeat(d_inner, 1))
        self.D = nn.Parameter(torch.ones(d_inner))
        self.scan = SelectiveScan()
        self.out_proj = nn.Linear(d_inner, d_model, bias=False)

    def forward(self, x):
        length = x.shape[1]
        xz = self.in_proj(x)
        u, z = xz.chunk(2, dim=-1)
        u = self.conv1d(u.transpose(1, 2))[..., :length].transpose(1, 2)
        u = F.silu(u)
        dt, B, C = torch.split(self.x_proj(u), [self.dt_rank, self.d_state, self.d_state], dim=-1)
        dt = F.softplus(self.dt_proj(dt))
        y = self.scan(u, dt, -torch.exp(self.A_log), B, C, self.D)
        return self.out_proj(y * F.silu(z))


class MambaBlock(nn.Module):
    def __init__(self, dim: int, d_state: int, d_conv: int, expand: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mixer = MambaMixer(dim, d_state, d_conv, expand)

    def forward(self, x):
        return x + self.mixer(self.norm(x))


class MambaSliceBackbone(nn.Module):
    """Per-slice selective state-space encoder.

    Slices ``(B, S, 1, H, W)`` are resized to ``image_size``, replicated to 3
    channels, patch-embedded and scanned in raster order. A learned
    slice-index embedding tells each slice where it sits in the stack.
    Returns ``(B, S, dim)``.
    """

    def __init__(self, n_slices: int, image_size: int, patch: int, dim: int, depth: int,
                 d_state: int, d_conv: int, expand: int):
        super().__init__()
        if image_size % patch:
            raise ValueError(f"patch {patch} does not divide image size {image_size}")
        self.image_size = image_size
        self.patch_embed = nn.Conv2d(3, dim, patch, stride=patch)
        n_tokens = (image_size // patch) ** 2
        self.pos_embed = nn.Parameter(torch.zeros(1, n_tokens, dim))
        self.slice_embed = nn.Parameter(torch.zeros(1, n_slices, 1, dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.slice_embed, std=0.02)
        self.blocks = nn.Sequential(*[MambaBlock(dim, d_state, d_conv, expand) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        b, s = slices.shape[:2]
        x = slices.reshape(b * s, *slices.shape[2:])
        if x.shape[-1] != self.image_size:
            x = F.interpolate(x, size=(self.image_size, self.image_size), mode="bilinear", align_corners=False)
        x = x.expand(-1, 3, -1, -1)
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2) + self.pos_embed
        tokens = tokens.view(b, s, *tokens.shape[1:]) + self.slice_embed
        tokens = self.blocks(tokens.flatten(0, 1))
        return self.norm(tokens).mean(dim=1).view(b, s, -1)
