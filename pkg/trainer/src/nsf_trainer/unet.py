"""3D U-Net: five levels, constant feature width, group normalization.

Each level runs two 3x3x3 convolutions with GroupNorm and ReLU.  Downsampling
is 2x2x2 max pooling, upsampling is trilinear interpolation followed by a
convolution, and skip connections are concatenated.  The final 1x1x1 layer
emits L+2 channels: L segmentation logits (softmax applied downstream), one
predicted image channel, and one predicted log-bias channel (log form keeps
the head unconstrained while the loss compares bias fields logarithmically).
"""

import torch
from torch import nn
import torch.nn.functional as F


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, gn_groups):
        super().__init__()
        groups = min(gn_groups, out_ch)
        self.block = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_ch, out_ch, 3, padding=1),
            nn.GroupNorm(groups, out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet3D(nn.Module):
    def __init__(self, out_channels, levels=5, features=64, gn_groups=8, in_channels=1):
        super().__init__()
        self.levels = levels
        self.features = features
        self.out_channels = out_channels
        self.encoders = nn.ModuleList(
            [ConvBlock(in_channels if i == 0 else features, features, gn_groups) for i in range(levels)]
        )
        self.pool = nn.MaxPool3d(2)
        self.up_convs = nn.ModuleList(
            [nn.Conv3d(features, features, 3, padding=1) for _ in range(levels - 1)]
        )
        self.decoders = nn.ModuleList(
            [ConvBlock(2 * features, features, gn_groups) for _ in range(levels - 1)]
        )
        self.head = nn.Conv3d(features, out_channels, 1)

    def forward(self, x):
        stride = 2 ** (self.levels - 1)
        for i, d in enumerate(x.shape[2:]):
            if d % stride:
                raise ValueError(f"spatial dim {i} = {d} not divisible by {stride}")
        skips = []
        h = x
        for level, enc in enumerate(self.encoders):
            h = enc(h)
            if level < self.levels - 1:
                skips.append(h)
                h = self.pool(h)
        for up, dec, skip in zip(self.up_convs, self.decoders, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="trilinear", align_corners=False)
            h = up(h)
            h = dec(torch.cat([h, skip], dim=1))
        return self.head(h)

    def split_heads(self, out):
        """(logits, image, log_bias) from the raw L+2-channel output."""
        num_labels = self.out_channels - 2
        return out[:, :num_labels], out[:, num_labels], out[:, num_labels + 1]


def receptive_field(levels=5, convs_per_level=2, kernel=3):
    """Analytic receptive field of the full encoder-decoder in input voxels."""
    rf, stride = 1, 1
    for level in range(levels):
        rf += convs_per_level * (kernel - 1) * stride
        if level < levels - 1:
            rf += stride  # 2x2x2 pooling window
            stride *= 2
    for _ in range(levels - 1):
        stride //= 2
        rf += stride  # upsampling interpolation support
        rf += (convs_per_level + 1) * (kernel - 1) * stride  # up-conv + decoder block
    return rf
