"""The eleven classifier families.

Every model takes a batch of volumes shaped ``(B, 1, D, H, W)`` with D the
axial (slice) axis and returns ``(B, 3)`` logits.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import (
    MambaSliceBackbone,
    PatchMerging3D,
    SliceSampler,
    SwinBlock3D,
    ViTEncoder,
    classifier_head,
    conv_bn_relu2d,
    conv_bn_relu3d,
    window_partition,
    window_reverse,
)
from .spec import Family, ModelSpec


class CNN3D(nn.Module):
    """Three 3x3x3 Conv+BN+ReLU blocks, max-pooled after the first two, flattened to a linear layer."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        c1, c2, c3 = spec["widths"]
        self.block1 = conv_bn_relu3d(1, c1)
        self.block2 = conv_bn_relu3d(c1, c2)
        self.block3 = conv_bn_relu3d(c2, c3)
        self.pool = nn.AdaptiveAvgPool3d(spec["pool_grid"])
        flat = c3 * math.prod(spec["pool_grid"])
        self.fc = nn.Linear(flat, spec.num_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Feature maps before the final pooling, at 1/4 input resolution."""
        x = F.max_pool3d(self.block1(x), 2)
        x = F.max_pool3d(self.block2(x), 2)
        return self.block3(x)

    def forward(self, x):
        return self.fc(self.pool(self.features(x)).flatten(1))


class SliceLSTM(nn.Module):
    """Unidirectional LSTM over flattened axial slices; final hidden state classifies."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        n = spec["input_size"]
        self.sampler = SliceSampler(spec["n_slices"])
        self.lstm = nn.LSTM(n * n, spec["hidden"], batch_first=True)
        self.fc = nn.Linear(spec["hidden"], spec.num_classes)

    def forward(self, x):
        seq = self.sampler(x).flatten(2)
        _, (h, _) = self.lstm(seq)
        return self.fc(h[-1])


class ViT3D(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.encoder = ViTEncoder(
            3, 1, spec["input_size"], spec["patch"], spec["embed"], spec["depth"], spec["heads"], spec["mlp_ratio"],
        )
        self.proj = nn.Sequential(nn.Linear(spec["embed"], spec["proj_dim"]), nn.GELU())
        self.fc = nn.Linear(spec["proj_dim"], spec.num_classes)

    def forward(self, x):
        return self.fc(self.proj(self.encoder(x)))


class BasicBlock3D(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm3d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class ResNet3D(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.stem = conv_bn_relu3d(1, spec["stem"])
        stages = []
        cin = spec["stem"]
        for cout in spec["widths"]:
            blocks = [BasicBlock3D(cin, cout, stride=2)]
            blocks += [BasicBlock3D(cout, cout) for _ in range(spec["blocks_per_stage"] - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.pool = nn.AdaptiveAvgPool3d(spec["pool_grid"])
        flat = cin * math.prod(spec["pool_grid"])
        self.fc = nn.Linear(flat, spec.num_classes)

    def forward(self, x):
        return self.fc(self.pool(self.stages(self.stem(x))).flatten(1))


class CNNLSTM(nn.Module):
    """Depth-preserving 3D encoder; each slice's in-plane features feed an LSTM."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        c1, c2 = spec["widths"]
        g = spec["inplane_grid"]
        self.encoder = nn.Sequential(
            conv_bn_relu3d(1, c1), nn.MaxPool3d((1, 2, 2)),
            conv_bn_relu3d(c1, c2), nn.MaxPool3d((1, 2, 2)),
        )
        self.inplane = nn.AdaptiveAvgPool3d((spec["n_slices"], g, g))
        self.lstm = nn.LSTM(c2 * g * g, spec["hidden"], batch_first=True)
        self.fc = nn.Linear(spec["hidden"], spec.num_classes)

    def forward(self, x):
        f = self.inplane(self.encoder(x))  # (B, C, S, g, g)
        seq = f.permute(0, 2, 1, 3, 4).flatten(2)
        _, (h, _) = self.lstm(seq)
        return self.fc(h[-1])


class SqueezeExcite3D(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean(dim=(2, 3, 4))
        # SiLU rather than ReLU: with the few hidden units of narrow models a
        # ReLU bottleneck can switch off entirely and the gate stops learning
        gate = torch.sigmoid(self.fc2(F.silu(self.fc1(s))))
        return x * gate[:, :, None, None, None]


class CNNSE(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        units = []
        cin = 1
        for cout in spec["widths"]:
            units += [conv_bn_relu3d(cin, cout), SqueezeExcite3D(cout, spec["se_reduction"]), nn.MaxPool3d(2)]
            cin = cout
        self.features = nn.Sequential(*units)
        self.pool = nn.AdaptiveAvgPool3d(spec["pool_grid"])
        flat = cin * math.prod(spec["pool_grid"])
        self.fc = nn.Linear(flat, spec.num_classes)

    def forward(self, x):
        return self.fc(self.pool(self.features(x)).flatten(1))


def _slices_as_rgb(x: torch.Tensor, size: int) -> torch.Tensor:
    """``(B, S, 1, H, W)`` -> ``(B*S, 3, size, size)``."""
    x = x.flatten(0, 1)
    if x.shape[-1] != size or x.shape[-2] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x.expand(-1, 3, -1, -1)


class ViT2DLSTM(nn.Module):
    """Per-slice 2D ViT CLS embeddings consumed in order by an LSTM."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.image_size = spec["image_size"]
        self.sampler = SliceSampler(spec["n_slices"])
        self.backbone = ViTEncoder(
            2, 3, spec["image_size"], spec["patch"], spec["embed"], spec["depth"], spec["heads"], spec["mlp_ratio"],
        )
        self.lstm = nn.LSTM(spec["embed"], spec["hidden"], batch_first=True)
        self.fc = nn.Linear(spec["hidden"], spec.num_classes)

    def forward(self, x):
        slices = self.sampler(x)
        b, s = slices.shape[:2]
        emb = self.backbone(_slices_as_rgb(slices, self.image_size)).view(b, s, -1)
        _, (h, _) = self.lstm(emb)
        return self.fc(h[-1])


class Swin3D(nn.Module):
    """Hierarchical shifted-window transformer over 3D patches."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        patch, embed, window = spec["patch"], spec["embed"], spec["window"]
        if spec["input_size"] % patch:
            raise ValueError(f"patch {patch} does not divide input {spec['input_size']}")
        self.patch_embed = nn.Conv3d(1, embed, patch, stride=patch)
        self.patch_norm = nn.LayerNorm(embed)
        res = spec["input_size"] // patch
        dim = embed
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        n_stages = len(spec["depths"])
        for i, (depth, heads) in enumerate(zip(spec["depths"], spec["heads"])):
            blocks = [
                SwinBlock3D(dim, heads, res, window, shift=0 if j % 2 == 0 else window // 2, mlp_ratio=spec["mlp_ratio"])
                for j in range(depth)
            ]
            self.stages.append(nn.Sequential(*blocks))
            if i < n_stages - 1:
                self.merges.append(PatchMerging3D(dim))
                dim *= 2
                res //= 2
        self.norm = nn.LayerNorm(dim)
        self.head = classifier_head(dim, spec["proj_dim"], spec.num_classes)

    def forward_features(self, x: torch.Tensor, return_stages: bool = False):
        x = self.patch_embed(x).permute(0, 2, 3, 4, 1)
        x = self.patch_norm(x)
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            outs.append(x.permute(0, 4, 1, 2, 3))
            if i < len(self.merges):
                x = self.merges[i](x)
        x = self.norm(x).mean(dim=(1, 2, 3))
        return (x, outs) if return_stages else x

    def forward(self, x):
        return self.head(self.forward_features(x))


class WindowConv3D(nn.Module):
    """Conv+BN+ReLU applied independently inside each cubic window."""

    def __init__(self, channels: int, window: int, shift: int = 0):
        super().__init__()
        self.window = window
        self.shift = shift
        self.block = conv_bn_relu3d(channels, channels)

    def forward(self, x):
        b, c, d, h, w = x.shape
        win = self.window
        if d % win or h % win or w % win:
            raise ValueError(f"window {win} does not divide feature grid {(d, h, w)}")
        y = x.permute(0, 2, 3, 4, 1)
        if self.shift:
            y = torch.roll(y, shifts=(-self.shift,) * 3, dims=(1, 2, 3))
        parts = window_partition(y, win)  # (B*nW, win^3, C)
        parts = parts.transpose(1, 2).reshape(-1, c, win, win, win)
        parts = self.block(parts)
        parts = parts.reshape(-1, c, win ** 3).transpose(1, 2)
        y = window_reverse(parts, win, b, d, h, w)
        if self.shift:
            y = torch.roll(y, shifts=(self.shift,) * 3, dims=(1, 2, 3))
        return y.permute(0, 4, 1, 2, 3)


class SwinCNN(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        c1, c2 = spec["widths"]
        self.stem = nn.Sequential(conv_bn_relu3d(1, c1, stride=2), conv_bn_relu3d(c1, c2, stride=2))
        self.window = WindowConv3D(c2, spec["window"])
        self.shifted = WindowConv3D(c2, spec["window"], shift=spec["window"] // 2) if spec["shifted"] else None
        self.head = classifier_head(c2, spec["proj_dim"], spec.num_classes)

    def forward(self, x):
        x = self.stem(x)
        x = x + self.window(x)
        if self.shifted is not None:
            x = x + self.shifted(x)
        return self.head(x.mean(dim=(2, 3, 4)))


def _mamba_backbone(spec: ModelSpec) -> MambaSliceBackbone:
    return MambaSliceBackbone(
        spec["n_slices"], spec["image_size"], spec["patch"], spec["embed"], spec["depth"],
        spec["d_state"], spec["d_conv"], spec["expand"],
    )


class Mamba2D(nn.Module):
    """Selective state-space slice encoder, mean-pooled over slices."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.sampler = SliceSampler(spec["n_slices"])
        self.backbone = _mamba_backbone(spec)
        self.head = classifier_head(spec["embed"], spec["proj_dim"], spec.num_classes)

    def forward(self, x):
        emb = self.backbone(self.sampler(x))
        return self.head(emb.mean(dim=1))


class SliceCNN2D(nn.Module):
    """Small per-slice 2D conv encoder producing one vector per slice."""

    def __init__(self, widths):
        super().__init__()
        layers = []
        cin = 1
        for cout in widths:
            layers.append(conv_bn_relu2d(cin, cout, stride=2))
            cin = cout
        self.body = nn.Sequential(*layers)
        self.out_dim = cin

    def forward(self, slices):
        b, s = slices.shape[:2]
        f = self.body(slices.flatten(0, 1))
        return f.mean(dim=(2, 3)).view(b, s, -1)


class Mamba2DCNN(nn.Module):
    """State-space slice embeddings concatenated with a per-slice CNN branch."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.sampler = SliceSampler(spec["n_slices"])
        self.backbone = _mamba_backbone(spec)
        self.cnn = SliceCNN2D(spec["cnn_widths"])
        self.head = classifier_head(spec["embed"] + self.cnn.out_dim, spec["proj_dim"], spec.num_classes)

    def forward(self, x):
        slices = self.sampler(x)
        fused = torch.cat([self.backbone(slices), self.cnn(slices)], dim=-1)
        return self.head(fused.mean(dim=1))


REGISTRY: dict[Family, type[nn.Module]] = {
    Family.CNN3D: CNN3D,
    Family.LSTM: SliceLSTM,
    Family.VIT3D: ViT3D,
    Family.RESNET3D: ResNet3D,
    Family.CNN_LSTM: CNNLSTM,
    Family.CNN_SE: CNNSE,
    Family.VIT2D_LSTM: ViT2DLSTM,
    Family.SWIN3D: Swin3D,
    Family.SWIN_CNN: SwinCNN,
    Family.MAMBA2D: Mamba2D,
    Family.MAMBA2D_CNN: Mamba2DCNN,
}
