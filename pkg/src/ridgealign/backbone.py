"""Convolutional feature extractor with an FPN merge.

Produces coarse features at stride 8 and fine features at stride 2 from a
grayscale image. Stem conv (stride 2) -> residual stages at strides 2/4/8
with channels c_fine, 2*c_fine, c_coarse; a top-down path with 1x1 lateral
convs and bilinear upsampling merges back to stride 2 for the fine map.
"""

from __future__ import annotations

import numpy as np
import torch

from . import numkit
from .errors import DimensionError
from .weights import WeightArchive


def pad_to_multiple(img: np.ndarray, m: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Pad bottom/right with zeros to the next multiple of m.

    Returns the padded image and a boolean mask of the original extent.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise DimensionError(f"expected non-empty 2-D image, got shape {img.shape}")
    h, w = img.shape
    hp = ((h + m - 1) // m) * m
    wp = ((w + m - 1) // m) * m
    out = np.zeros((hp, wp), dtype=np.float64)
    out[:h, :w] = img
    mask = np.zeros((hp, wp), dtype=bool)
    mask[:h, :w] = True
    return out, mask


def _conv_ln_relu(x, wa: WeightArchive, name: str, stride: int = 1):
    y = numkit.conv2d(x, wa[f"{name}.w"], wa[f"{name}.b"], stride=stride, pad=1)
    y = numkit.layer_norm(y, wa[f"{name}.ln.g"], wa[f"{name}.ln.b"])
    return torch.relu(y)


def _res_block(x, wa: WeightArchive, name: str):
    y = numkit.conv2d(x, wa[f"{name}.c1.w"], wa[f"{name}.c1.b"], pad=1)
    y = torch.relu(numkit.layer_norm(y, wa[f"{name}.ln.g"], wa[f"{name}.ln.b"]))
    y = numkit.conv2d(y, wa[f"{name}.c2.w"], wa[f"{name}.c2.b"], pad=1)
    return x + y


def extract_features(img: torch.Tensor, wa: WeightArchive):
    """Image [H,W] (H, W multiples of 32, values in [0,1]) -> (coarse, fine).

    coarse: [H/8, W/8, c_coarse]; fine: [H/2, W/2, c_fine].
    """
    if img.ndim != 2:
        raise DimensionError(f"expected [H,W] image, got {tuple(img.shape)}")
    if img.shape[0] % 32 or img.shape[1] % 32:
        raise DimensionError("image dims must be padded to a multiple of 32")
    x = img.unsqueeze(-1)
    f2 = _conv_ln_relu(x, wa, "bb.stem", stride=2)        # /2, c_fine
    f2 = _res_block(f2, wa, "bb.res1")
    f4 = _conv_ln_relu(f2, wa, "bb.down2", stride=2)      # /4, 2*c_fine
    f4 = _res_block(f4, wa, "bb.res2")
    f8 = _conv_ln_relu(f4, wa, "bb.down3", stride=2)      # /8, c_coarse
    coarse = _res_block(f8, wa, "bb.res3")

    top = numkit.conv2d(coarse, wa["bb.lat8.w"], wa["bb.lat8.b"])
    mid = numkit.upsample2x(top) + numkit.conv2d(f4, wa["bb.lat4.w"], wa["bb.lat4.b"])
    low = numkit.upsample2x(mid) + numkit.conv2d(f2, wa["bb.lat2.w"], wa["bb.lat2.b"])
    fine = numkit.conv2d(low, wa["bb.fine.w"], wa["bb.fine.b"], pad=1)
    return coarse, fine
