"""Model configuration, parameter vector layout, and checkpoint files.

A checkpoint is the flat float64 parameter vector plus the architecture
config, step count, optimizer moments (when mid-training), and a
provenance tag. The on-disk format is a small container: magic bytes
"ULAB", a u32 format version, a JSON header, then little-endian float64
payloads. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _kernels

MAGIC = b"ULAB"
FORMAT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAM_WEIGHT_DECAY = 0.01

PROVENANCE_TAGS = ("original", "finetuned", "retained", "unlearned")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    layers: int = 2
    heads: int = 2
    context: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "dim", "layers", "heads", "context"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.dim % self.heads != 0:
            raise ValueError(
                f"dim {self.dim} must be divisible by heads {self.heads}"
            )

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "layers": self.layers,
            "heads": self.heads,
            "context": self.context,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical ordered (name, shape) list defining the flat layout.

    Inner products between flattened gradients are only meaningful
    because every caller shares this order.
    """
    v, d = cfg.vocab_size, cfg.dim
    hidden = 4 * d
    specs: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (v, d)),
        ("pos_emb", (cfg.context, d)),
    ]
    for i in range(cfg.layers):
        p = f"h{i}."
        specs += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w_q", (d, d)), (p + "b_q", (d,)),
            (p + "w_k", (d, d)), (p + "b_k", (d,)),
            (p + "w_v", (d, d)), (p + "b_v", (d,)),
            (p + "w_o", (d, d)), (p + "b_o", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w_fc", (d, hidden)), (p + "b_fc", (hidden,)),
            (p + "w_out", (hidden, d)), (p + "b_out", (d,)),
        ]
    specs += [("lnf_g", (d,)), ("lnf_b", (d,))]
    return specs


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_specs(cfg))


@dataclass
class Checkpoint:
    config: ModelConfig
    theta: np.ndarray
    step_count: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    provenance: str = "original"

    def __post_init__(self):
        expected = param_count(self.config)
        if self.theta.shape != (expected,):
            raise ValueError(
                f"theta has length {self.theta.shape}, config implies {expected}"
            )
        if self.provenance not in PROVENANCE_TAGS:
            raise ValueError(f"unknown provenance tag {self.provenance!r}")

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, cfg: ModelConfig, init_scale: float = 0.02) -> "Checkpoint":
        """Seeded random init: N(0, init_scale^2) weights, unit layer-norm
        gains, zero biases."""
        rng = np.random.default_rng(cfg.seed)
        theta = np.empty(param_count(cfg), dtype=np.float64)
        offset = 0
        for name, shape in param_specs(cfg):
            n = int(np.prod(shape))
            block = theta[offset:offset + n]
            short = name.split(".")[-1]
            if short.startswith("ln") and short.endswith("_g"):
                block[:] = 1.0
            elif short.startswith("b_") or short.endswith("_b"):
                block[:] = 0.0
            else:
                block[:] = rng.normal(0.0, init_scale, size=n)
            offset += n
        return cls(config=cfg, theta=theta)

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "Checkpoint":
        """All-zero parameters; the model's output distribution is exactly
        uniform, which several tests rely on."""
        return cls(config=cfg, theta=np.zeros(param_count(cfg), dtype=np.float64))

    def clone(self, provenance: str | None = None) -> "Checkpoint":
        return Checkpoint(
            config=self.config,
            theta=self.theta.copy(),
            step_count=self.step_count,
            adam_m=None if self.adam_m is None else self.adam_m.copy(),
            adam_v=None if self.adam_v is None else self.adam_v.copy(),
            provenance=provenance or self.provenance,
        )

    def with_provenance(self, tag: str) -> "Checkpoint":
        return replace(self, provenance=tag)

    # -- parameter access ----------------------------------------------------

    def param_views(self) -> dict[str, np.ndarray]:
        """Writable views into theta, one per named parameter."""
        views = {}
        offset = 0
        for name, shape in param_specs(self.config):
            n = int(np.prod(shape))
            views[name] = self.theta[offset:offset + n].reshape(shape)
            offset += n
        return views

    # -- optimization --------------------------------------------------------

    def adamw_update(self, grad: np.ndarray, lr: float) -> "Checkpoint":
        """Functional AdamW step; returns the updated checkpoint."""
        if grad.shape != self.theta.shape:
            raise ValueError("gradient length does not match theta")
        out = self.clone()
        if out.adam_m is None:
            out.adam_m = np.zeros_like(out.theta)
            out.adam_v = np.zeros_like(out.theta)
        out.step_count += 1
        _kernels.adamw_step(
            out.theta, np.ascontiguousarray(grad), out.adam_m, out.adam_v,
            out.step_count, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
            ADAM_WEIGHT_DECAY,
        )
        return out

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "config": self.config.to_dict(),
            "step_count": self.step_count,
            "provenance": self.provenance,
            "has_moments": self.adam_m is not None,
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            f.write(self.theta.astype("<f8").tobytes())
            if self.adam_m is not None:
                f.write(self.adam_m.astype("<f8").tobytes())
                f.write(self.adam_v.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        version = struct.unpack("<I", raw[4:8])[0]
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        hlen = struct.unpack("<I", raw[8:12])[0]
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        n = param_count(cfg)
        offset = 12 + hlen
        width = 8 * n

        def block(k):
            nonlocal offset
            arr = np.frombuffer(raw[offset:offset + width], dtype="<f8").astype(
                np.float64
            )
            offset += width
            if arr.shape != (n,):
                raise ValueError(f"{path}: truncated payload")
            return arr

        theta = block("theta")
        adam_m = adam_v = None
        if header["has_moments"]:
            adam_m = block("m")
            adam_v = block("v")
        return cls(
            config=cfg,
            theta=theta,
            step_count=header["step_count"],
            adam_m=adam_m,
            adam_v=adam_v,
            provenance=header["provenance"],
        )
