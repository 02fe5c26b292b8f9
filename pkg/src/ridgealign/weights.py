"""Weight archive: named parameter tensors + manifest, RWA1 file format.

RWA1 layout: 4-byte magic ``RWA1``, u32 little-endian manifest length, UTF-8
JSON manifest (hyperparameters and ordered tensor descriptors), then raw
little-endian float32 payloads in descriptor order.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .config import ModelConfig
from .errors import ArchiveError
from .numkit import DTYPE

MAGIC = b"RWA1"


def _attn_specs(prefix: str, c: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for part in ("q", "k", "v", "out"):
        out.append((f"{prefix}.{part}.w", (c, c)))
        out.append((f"{prefix}.{part}.b", (c,)))
    return out


def tensor_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Every tensor name and shape required by the configured architecture."""
    cf, cc = cfg.c_fine, cfg.c_coarse
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("bb.stem.w", (cf, 1, 3, 3)), ("bb.stem.b", (cf,)),
        ("bb.stem.ln.g", (cf,)), ("bb.stem.ln.b", (cf,)),
        ("bb.res1.c1.w", (cf, cf, 3, 3)), ("bb.res1.c1.b", (cf,)),
        ("bb.res1.ln.g", (cf,)), ("bb.res1.ln.b", (cf,)),
        ("bb.res1.c2.w", (cf, cf, 3, 3)), ("bb.res1.c2.b", (cf,)),
        ("bb.down2.w", (2 * cf, cf, 3, 3)), ("bb.down2.b", (2 * cf,)),
        ("bb.down2.ln.g", (2 * cf,)), ("bb.down2.ln.b", (2 * cf,)),
        ("bb.res2.c1.w", (2 * cf, 2 * cf, 3, 3)), ("bb.res2.c1.b", (2 * cf,)),
        ("bb.res2.ln.g", (2 * cf,)), ("bb.res2.ln.b", (2 * cf,)),
        ("bb.res2.c2.w", (2 * cf, 2 * cf, 3, 3)), ("bb.res2.c2.b", (2 * cf,)),
        ("bb.down3.w", (cc, 2 * cf, 3, 3)), ("bb.down3.b", (cc,)),
        ("bb.down3.ln.g", (cc,)), ("bb.down3.ln.b", (cc,)),
        ("bb.res3.c1.w", (cc, cc, 3, 3)), ("bb.res3.c1.b", (cc,)),
        ("bb.res3.ln.g", (cc,)), ("bb.res3.ln.b", (cc,)),
        ("bb.res3.c2.w", (cc, cc, 3, 3)), ("bb.res3.c2.b", (cc,)),
        ("bb.lat8.w", (cf, cc, 1, 1)), ("bb.lat8.b", (cf,)),
        ("bb.lat4.w", (cf, 2 * cf, 1, 1)), ("bb.lat4.b", (cf,)),
        ("bb.lat2.w", (cf, cf, 1, 1)), ("bb.lat2.b", (cf,)),
        ("bb.fine.w", (cf, cf, 3, 3)), ("bb.fine.b", (cf,)),
    ]
    specs += _attn_specs("init", cc)
    flow_in = min(cc, 4 * cfg.heads)
    for i in range(cfg.n_c):
        specs.append((f"gla{i}.flow.w", (4, flow_in)))
        specs.append((f"gla{i}.flow.b", (4,)))
        specs += _attn_specs(f"gla{i}.glob", cc)
        specs += _attn_specs(f"gla{i}.loc16", cc)
        specs += _attn_specs(f"gla{i}.loc8", cc)
        specs.append((f"gla{i}.ffn.ln.g", (4 * cc,)))
        specs.append((f"gla{i}.ffn.ln.b", (4 * cc,)))
        specs.append((f"gla{i}.ffn.lin.w", (cc, 4 * cc)))
        specs.append((f"gla{i}.ffn.lin.b", (cc,)))
    for t in range(cfg.n_f):
        specs += _attn_specs(f"fine{t}.self", cf)
        specs += _attn_specs(f"fine{t}.cross", cf)
    specs.append(("match.tau", (1,)))
    return specs


class WeightArchive:
    """Immutable-by-convention map of named parameter tensors plus a manifest."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, torch.Tensor]):
        self.cfg = cfg
        self.tensors = tensors
        self.validate()

    def validate(self):
        for name, shape in tensor_specs(self.cfg):
            t = self.tensors.get(name)
            if t is None:
                raise ArchiveError(f"missing weight tensor: {name}")
            if tuple(t.shape) != shape:
                raise ArchiveError(
                    f"tensor {name} has shape {tuple(t.shape)}, expected {shape}")

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise ArchiveError(f"missing weight tensor: {name}") from None

    def parameters(self) -> dict[str, torch.Tensor]:
        return self.tensors

    def clone(self) -> "WeightArchive":
        return WeightArchive(self.cfg, {k: v.detach().clone()
                                        for k, v in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "WeightArchive":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def save(self, path):
        descs = []
        payload = bytearray()
        for name, _ in tensor_specs(self.cfg):
            t = self.tensors[name].detach()
            arr = t.cpu().numpy().astype("<f4")
            descs.append({"name": name, "shape": list(t.shape)})
            payload += arr.tobytes()
        manifest = json.dumps({"hyperparameters": self.cfg.to_dict(),
                               "tensors": descs}, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(manifest)))
            f.write(manifest)
            f.write(payload)

    @classmethod
    def load(cls, path) -> "WeightArchive":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise ArchiveError(f"bad magic in {path!r}: {blob[:4]!r}")
        if len(blob) < 8:
            raise ArchiveError("truncated archive header")
        (mlen,) = struct.unpack("<I", blob[4:8])
        try:
            manifest = json.loads(blob[8:8 + mlen].decode("utf-8"))
            cfg = ModelConfig.from_dict(manifest["hyperparameters"])
            descs = manifest["tensors"]
        except (ValueError, KeyError, TypeError) as e:
            raise ArchiveError(f"malformed manifest: {e}") from None
        off = 8 + mlen
        tensors = {}
        for d in descs:
            shape = tuple(d["shape"])
            n = int(np.prod(shape)) if shape else 1
            end = off + 4 * n
            if end > len(blob):
                raise ArchiveError(f"truncated payload for tensor {d['name']}")
            arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape)
            tensors[d["name"]] = torch.from_numpy(arr.copy()).to(DTYPE)
            off = end
        return cls(cfg, tensors)


def init_weights(cfg: ModelConfig, seed: int = 0) -> WeightArchive:
    """Seeded random initialization of every tensor the architecture needs.

    Linear/conv weights get fan-in scaled normals, norms get unit gain, the
    flow head starts at zero (identity flow, unit sigma), and tau starts at
    1/sqrt(c_coarse).
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, torch.Tensor] = {}
    for name, shape in tensor_specs(cfg):
        if name == "match.tau":
            arr = np.full(shape, 1.0 / np.sqrt(cfg.c_coarse))
        elif name.endswith(".ln.g"):
            arr = np.ones(shape)
        elif name.endswith(".b") or name.endswith(".ln.b"):
            arr = np.zeros(shape)
        elif ".flow." in name:
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            arr = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        tensors[name] = torch.as_tensor(arr, dtype=DTYPE)
    return WeightArchive(cfg, tensors)


def zero_output_projections(wa: WeightArchive) -> WeightArchive:
    """Copy with all attention output projections and FFN fusions zeroed.

    With these at zero every attention/FFN residual becomes the identity,
    which is the ablation used by the identity tests.
    """
    out = wa.clone()
    for name, t in out.tensors.items():
        if ".out.w" in name or ".out.b" in name or ".ffn.lin." in name:
            t.zero_()
    return out
