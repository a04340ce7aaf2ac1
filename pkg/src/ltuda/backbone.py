"""2D U-Net backbone producing a per-pixel embedding map and per-class foreground probabilities.

The decoder's final feature map is the embedding (default 64 channels); the
linear head is a 1x1 projection from that space to C logits, so the threshold
classifier and any prototype classifier share one embedding geometry.
"""

from __future__ import annotations

import torch
import torch.nn as nn


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Encoder-decoder with skip connections; returns (embeddings, sigmoid probs)."""

    def __init__(
        self,
        num_classes: int,
        in_channels: int = 1,
        depth: int = 4,
        base_width: int = 16,
        embedding_dim: int = 64,
    ):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.num_classes = num_classes
        self.depth = depth
        self.embedding_dim = embedding_dim
        widths = [base_width * (2**i) for i in range(depth + 1)]
        self.encoders = nn.ModuleList(
            [_conv_block(in_channels if i == 0 else widths[i - 1], widths[i]) for i in range(depth)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _conv_block(widths[depth - 1], widths[depth])
        self.upsamplers = nn.ModuleList(
            [nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in reversed(range(depth))]
        )
        self.decoders = nn.ModuleList(
            [_conv_block(2 * widths[i], widths[i]) for i in reversed(range(depth))]
        )
        # final decoder feature map: the shared embedding space
        self.embedding = nn.Sequential(
            nn.Conv2d(widths[0], embedding_dim, 1, bias=False),
            nn.BatchNorm2d(embedding_dim),
            nn.ReLU(inplace=True),
        )
        self.head = nn.Conv2d(embedding_dim, num_classes, 1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = x.shape[-2:]
        stride = 2**self.depth
        if h % stride or w % stride:
            raise ValueError(f"input {h}x{w} not divisible by 2^depth = {stride}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        emb = self.embedding(x)
        probs = torch.sigmoid(self.head(emb))
        return emb, probs


def make_teacher(student: nn.Module) -> nn.Module:
    """Detached copy of the student; never receives gradients."""
    import copy

    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


@torch.no_grad()
def ema_update(student: nn.Module, teacher: nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, elementwise.

    Applies to parameters and floating-point buffers (batch-norm statistics);
    integer buffers are copied.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {momentum}")
    s_params = dict(student.named_parameters())
    t_params = dict(teacher.named_parameters())
    if s_params.keys() != t_params.keys():
        raise ValueError("student/teacher parameter trees differ")
    for name, sp in s_params.items():
        tp = t_params[name]
        if tp.shape != sp.shape:
            raise ValueError(f"shape mismatch at {name}: {tp.shape} vs {sp.shape}")
        tp.mul_(momentum).add_(sp, alpha=1.0 - momentum)
    for (name, sb), (_, tb) in zip(student.named_buffers(), teacher.named_buffers()):
        if tb.dtype.is_floating_point:
            tb.mul_(momentum).add_(sb, alpha=1.0 - momentum)
        else:
            tb.copy_(sb)
