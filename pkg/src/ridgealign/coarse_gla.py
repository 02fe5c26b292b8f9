"""Coarse feature interaction: positional encoding, initializer, and
global-local attention blocks that also emit Gaussian flow maps.

Feature maps are [H,W,C] tensors at stride 8 (coarse-cell units for all flow
coordinates: x = column, y = row). Flow maps are [H,W,4] holding
(u_x, u_y, sigma_x, sigma_y) per cell; u is the predicted corresponding
coordinate in the other map and sigma sizes the local attention span.
Direction weights are shared: the reverse direction is obtained by swapping
the input order.
"""

from __future__ import annotations

import math

import torch

from . import numkit
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .weights import WeightArchive


def positional_encoding(h: int, w: int, c: int, dtype=numkit.DTYPE) -> torch.Tensor:
    """Fixed 2D sinusoidal encoding [h,w,c] at absolute cell coordinates.

    Frequencies are absolute (not normalized by the map size), so maps of
    different sizes share encodings at equal cell coordinates.
    """
    if c % 4:
        raise ConfigError(f"channel count must be a multiple of 4, got {c}")
    nf = c // 4
    k = torch.arange(nf, dtype=dtype)
    omega = torch.exp(-k * math.log(10000.0) / nf)  # omega[0] = 1 (highest freq)
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype),
                            torch.arange(w, dtype=dtype), indexing="ij")
    px = xs.unsqueeze(-1) * omega
    py = ys.unsqueeze(-1) * omega
    pe = torch.empty(h, w, c, dtype=dtype)
    pe[..., 0::4] = torch.sin(px)
    pe[..., 1::4] = torch.cos(px)
    pe[..., 2::4] = torch.sin(py)
    pe[..., 3::4] = torch.cos(py)
    return pe


def positional_encode(f: torch.Tensor) -> torch.Tensor:
    """Add the fixed sinusoidal encoding to a [H,W,C] feature map."""
    h, w, c = f.shape
    return f + positional_encoding(h, w, c, dtype=f.dtype)


def _linear(x, w, b):
    return x @ w.transpose(0, 1) + b


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
              wa: WeightArchive, prefix: str, heads: int,
              key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-head scaled dot-product cross attention on token sets.

    q: [Nq,C]; k, v: [Nk,C]; returns [Nq,C]. key_mask (bool [Nk]) marks
    valid keys; invalid ones are excluded from the softmax.
    """
    c = q.shape[-1]
    if k.shape[-1] != c or v.shape[-1] != c:
        raise DimensionError("attention channel mismatch")
    dh = c // heads
    qp = _linear(q, wa[f"{prefix}.q.w"], wa[f"{prefix}.q.b"]).reshape(-1, heads, dh)
    kp = _linear(k, wa[f"{prefix}.k.w"], wa[f"{prefix}.k.b"]).reshape(-1, heads, dh)
    vp = _linear(v, wa[f"{prefix}.v.w"], wa[f"{prefix}.v.b"]).reshape(-1, heads, dh)
    scores = torch.einsum("qhd,khd->hqk", qp, kp) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.view(1, 1, -1), -1e30)
    p = numkit.softmax_rows(scores)
    msg = torch.einsum("hqk,khd->qhd", p, vp).reshape(-1, c)
    return _linear(msg, wa[f"{prefix}.out.w"], wa[f"{prefix}.out.b"])


def _blocked_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                       wa: WeightArchive, prefix: str, heads: int,
                       key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Batched attention over independent blocks: q [B,Nq,C], k/v [B,Nk,C].

    key_mask: optional bool [B,Nk]; invalid keys are excluded from the softmax.
    """
    b, nq, c = q.shape
    dh = c // heads
    qp = _linear(q, wa[f"{prefix}.q.w"], wa[f"{prefix}.q.b"]).reshape(b, nq, heads, dh)
    kp = _linear(k, wa[f"{prefix}.k.w"], wa[f"{prefix}.k.b"]).reshape(b, -1, heads, dh)
    vp = _linear(v, wa[f"{prefix}.v.w"], wa[f"{prefix}.v.b"]).reshape(b, -1, heads, dh)
    scores = torch.einsum("bqhd,bkhd->bhqk", qp, kp) / math.sqrt(dh)
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask.view(b, 1, 1, -1), -1e30)
    p = numkit.softmax_rows(scores)
    msg = torch.einsum("bhqk,bkhd->bqhd", p, vp).reshape(b, nq, c)
    return _linear(msg, wa[f"{prefix}.out.w"], wa[f"{prefix}.out.b"])


def initializer(fa: torch.Tensor, fb: torch.Tensor, wa: WeightArchive,
                cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Positional encoding + one lightweight cross-attention pass at /32.

    Both stride-8 maps are encoded, avg-pooled x4, cross-attended in each
    direction with shared weights, upsampled back, and added residually to
    the encoded inputs.
    """
    if fa.shape[-1] != fb.shape[-1]:
        raise DimensionError("initializer channel mismatch")
    fa_pe = positional_encode(fa)
    fb_pe = positional_encode(fb)
    da = numkit.avgpool2d(fa_pe, 4)
    db = numkit.avgpool2d(fb_pe, 4)
    ha, wwa, c = da.shape
    hb, wwb, _ = db.shape
    ma = attention(da.reshape(-1, c), db.reshape(-1, c), db.reshape(-1, c),
                   wa, "init", cfg.heads).reshape(ha, wwa, c)
    mb = attention(db.reshape(-1, c), da.reshape(-1, c), da.reshape(-1, c),
                   wa, "init", cfg.heads).reshape(hb, wwb, c)
    fa1 = fa_pe + numkit.upsample2x(numkit.upsample2x(ma))
    fb1 = fb_pe + numkit.upsample2x(numkit.upsample2x(mb))
    return fa1, fb1


def identity_coords(h: int, w: int, dtype=numkit.DTYPE) -> torch.Tensor:
    """[h,w,2] map of each cell's own (x,y) coordinate."""
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype),
                            torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([xs, ys], dim=-1)


def flow_head(f: torch.Tensor, wa: WeightArchive, block: int) -> torch.Tensor:
    """Predict a [H,W,4] Gaussian flow map from the leading feature channels.

    Raw (u_x,u_y) outputs are offsets from each cell's own coordinates, so a
    zero head yields identity flow; sigmas go through exp for positivity.
    """
    h, w, c = f.shape
    ww = wa[f"gla{block}.flow.w"]
    raw = _linear(f[..., :ww.shape[1]], ww, wa[f"gla{block}.flow.b"])
    u = raw[..., 0:2] + identity_coords(h, w, dtype=f.dtype)
    lim = 4.0 * max(h, w)
    u = u.clamp(-lim, lim)
    sigma = torch.exp(raw[..., 2:4])
    return torch.cat([u, sigma], dim=-1)


def local_cross_attention(q_map: torch.Tensor, kv_map: torch.Tensor,
                          flow: torch.Tensor, wa: WeightArchive, prefix: str,
                          cfg: ModelConfig, s1: int | None = None) -> torch.Tensor:
    """Flow-guided local cross attention.

    q_map is partitioned into s1 x s1 blocks. Each block's mean flow defines
    an s2 x s2 sampling window in kv_map centered at (u_x,u_y) with width
    r*sigma_x and height r*sigma_y; keys/values are bilinearly sampled there
    and standard attention runs per block. Returns the reassembled message.
    """
    s1 = cfg.s1 if s1 is None else s1
    h, w, c = q_map.shape
    if h % s1 or w % s1:
        raise DimensionError(f"s1={s1} does not divide map dims {h}x{w}")
    s2 = cfg.s2
    nbh, nbw = h // s1, w // s1
    nb = nbh * nbw

    def to_blocks(t):
        d = t.shape[-1]
        return (t.reshape(nbh, s1, nbw, s1, d).permute(0, 2, 1, 3, 4)
                .reshape(nb, s1 * s1, d))

    qb = to_blocks(q_map)
    fb = to_blocks(flow).mean(dim=1)  # [nb,4] block-mean flow
    if s2 > 1:
        lin = torch.linspace(-0.5, 0.5, s2, dtype=q_map.dtype)
    else:
        lin = torch.zeros(1, dtype=q_map.dtype)
    # window spans r*sigma in each axis, centered on the mean flow
    xs = fb[:, 0:1] + cfg.r * fb[:, 2:3] * lin        # [nb,s2]
    ys = fb[:, 1:2] + cfg.r * fb[:, 3:4] * lin
    gx = xs.unsqueeze(1).expand(nb, s2, s2)
    gy = ys.unsqueeze(2).expand(nb, s2, s2)
    pts = torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
    kv = numkit.bilinear_sample(kv_map, pts).reshape(nb, s2 * s2, c)
    msg = _blocked_attention(qb, kv, kv, wa, prefix, cfg.heads)
    return (msg.reshape(nbh, nbw, s1, s1, c).permute(0, 2, 1, 3, 4)
            .reshape(h, w, c))


def _flow_to_half_scale(flow: torch.Tensor) -> torch.Tensor:
    """Downsample a flow map by 2 and convert coordinates to the halved grid.

    Cell centers obey x_pix = s*c + s/2 - 0.5, so a coordinate c at scale s
    becomes c/2 - 0.25 at scale 2s; sigmas just halve.
    """
    pooled = numkit.avgpool2d(flow, 2)
    u = pooled[..., 0:2] / 2.0 - 0.25
    sigma = pooled[..., 2:4] / 2.0
    return torch.cat([u, sigma], dim=-1)


def gla_block(fa: torch.Tensor, fb: torch.Tensor, wa: WeightArchive,
              cfg: ModelConfig, block: int):
    """One global-local attention block (both directions, shared weights).

    Per direction: a flow map is predicted, then three cross-attention
    branches run (global at /32, flow-guided local at /16 and /8); the three
    messages and the input are concatenated, layer-normed, and linearly fused
    into a residual update. Returns (fa', fb', flow_a, flow_b).
    """
    def one_direction(q_map, kv_map):
        h, w, c = q_map.shape
        flow = flow_head(q_map, wa, block)
        qg = numkit.avgpool2d(q_map, 4).reshape(-1, c)
        kvg = numkit.avgpool2d(kv_map, 4).reshape(-1, c)
        mg = attention(qg, kvg, kvg, wa, f"gla{block}.glob", cfg.heads)
        mg = numkit.upsample2x(numkit.upsample2x(mg.reshape(h // 4, w // 4, c)))
        q16 = numkit.avgpool2d(q_map, 2)
        kv16 = numkit.avgpool2d(kv_map, 2)
        m16 = local_cross_attention(q16, kv16, _flow_to_half_scale(flow), wa,
                                    f"gla{block}.loc16", cfg, s1=max(1, cfg.s1 // 2))
        m16 = numkit.upsample2x(m16)
        m8 = local_cross_attention(q_map, kv_map, flow, wa,
                                   f"gla{block}.loc8", cfg)
        cat = torch.cat([q_map, mg, m16, m8], dim=-1)
        cat = numkit.layer_norm(cat, wa[f"gla{block}.ffn.ln.g"],
                                wa[f"gla{block}.ffn.ln.b"])
        upd = _linear(cat, wa[f"gla{block}.ffn.lin.w"], wa[f"gla{block}.ffn.lin.b"])
        return q_map + upd, flow

    fa2, flow_a = one_direction(fa, fb)
    fb2, flow_b = one_direction(fb, fa)
    return fa2, fb2, flow_a, flow_b


def coarse_interact(fa0: torch.Tensor, fb0: torch.Tensor, wa: WeightArchive,
                    cfg: ModelConfig):
    """Initializer followed by n_c GLA blocks.

    Returns final features and the per-layer flow maps for each direction
    (needed by the flow loss).
    """
    fa, fb = initializer(fa0, fb0, wa, cfg)
    flows_a: list[torch.Tensor] = []
    flows_b: list[torch.Tensor] = []
    for i in range(cfg.n_c):
        fa, fb, fla, flb = gla_block(fa, fb, wa, cfg, i)
        flows_a.append(fla)
        flows_b.append(flb)
    return fa, fb, flows_a, flows_b
