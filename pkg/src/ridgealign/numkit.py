"""Dense numeric kernels used by every stage of the pipeline.

All functions are pure and operate on ``torch.Tensor`` values. Test builds
run in float64 so gradient checks against finite differences are meaningful;
float32 inputs are accepted for release-style inference. Everything here is
differentiable with respect to its tensor inputs.
"""

from __future__ import annotations

import torch

from .errors import DimensionError

DTYPE = torch.float64


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product of a [m,k] and b [k,n]."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with max subtraction for stability."""
    m = x.max(dim=-1, keepdim=True).values
    e = torch.exp(x - m)
    return e / e.sum(dim=-1, keepdim=True)


def bilinear_sample(src: torch.Tensor, pts: torch.Tensor) -> torch.Tensor:
    """Sample src [H,W,C] at continuous (x,y) points [N,2].

    Coordinates clamp to the border, so out-of-bounds queries return the
    nearest edge value instead of NaN.
    """
    if src.ndim != 3:
        raise DimensionError(f"bilinear_sample expects [H,W,C] source, got {src.shape}")
    h, w = src.shape[0], src.shape[1]
    x = pts[:, 0].clamp(0.0, float(w - 1))
    y = pts[:, 1].clamp(0.0, float(h - 1))
    x0 = x.floor().clamp(0, w - 2) if w > 1 else torch.zeros_like(x)
    y0 = y.floor().clamp(0, h - 2) if h > 1 else torch.zeros_like(y)
    x0l = x0.long()
    y0l = y0.long()
    fx = (x - x0).unsqueeze(-1)
    fy = (y - y0).unsqueeze(-1)
    tl = src[y0l, x0l]
    tr = src[y0l, (x0l + 1).clamp(max=w - 1)]
    bl = src[(y0l + 1).clamp(max=h - 1), x0l]
    br = src[(y0l + 1).clamp(max=h - 1), (x0l + 1).clamp(max=w - 1)]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def conv2d(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None = None,
           stride: int = 1, pad: int = 0) -> torch.Tensor:
    """2-D convolution. x is [H,W,Cin], kernel is [Cout,Cin,kh,kw]."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d shapes: x {x.shape}, kernel {kernel.shape}")
    if x.shape[2] != kernel.shape[1]:
        raise DimensionError(
            f"channel mismatch: input has {x.shape[2]}, kernel expects {kernel.shape[1]}")
    xc = x.permute(2, 0, 1).unsqueeze(0)
    y = torch.nn.functional.conv2d(xc, kernel, bias=bias, stride=stride, padding=pad)
    return y.squeeze(0).permute(1, 2, 0)


def avgpool2d(x: torch.Tensor, k: int) -> torch.Tensor:
    """Non-overlapping k-by-k average pooling of x [H,W,C]."""
    if x.shape[0] % k or x.shape[1] % k:
        raise DimensionError(f"avgpool2d: {tuple(x.shape)} not divisible by {k}")
    h, w, c = x.shape
    return x.reshape(h // k, k, w // k, k, c).mean(dim=(1, 3))


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x upsampling of x [H,W,C]."""
    xc = x.permute(2, 0, 1).unsqueeze(0)
    y = torch.nn.functional.interpolate(xc, scale_factor=2, mode="bilinear",
                                        align_corners=False)
    return y.squeeze(0).permute(1, 2, 0)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-6) -> torch.Tensor:
    """Normalize over the channel (last) axis, then scale and shift."""
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs channels {x.shape[-1]}")
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps) * gain + bias


def as_tensor(a, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(a, dtype=dtype)
