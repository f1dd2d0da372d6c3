"""Model/training configuration as flat ``key=value`` text."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    """Raised for invalid configuration; ``problems`` lists every violation."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


MODES = ("fused", "vfe_only", "aue_only", "baseline")
AU_SUBSETS = ("eyes", "nose", "lips", "all")


@dataclass(frozen=True)
class ModelConfig:
    frames: int = 8
    height: int = 64
    width: int = 64
    tube_t: int = 2
    patch: int = 8
    dim: int = 64
    depth: int = 4
    dec_depth: int = 0  # 0 means "same as depth"
    heads: int = 4
    num_aus: int = 16
    mask_ratio: float = 0.5
    loss_support: str = "all"
    au_paper_channels: bool = False
    huber_delta: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    lr: float = 1e-3
    finetune_lr: float = 1e-3
    decay: float = 1e-3
    decay_unit: str = "epoch"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    accum_steps: int = 1
    epochs: int = 50
    finetune_epochs: int = 12
    init_std: float = 0.02
    pixel_mean: float = 0.5
    pixel_std: float = 0.25
    freeze_aue: bool = False
    raw_frames: int = 16
    seed: int = 0
    mode: str = "fused"
    au_subset: str = "all"

    @property
    def decoder_depth(self) -> int:
        return self.dec_depth or self.depth

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.frames // self.tube_t, self.height // self.patch, self.width // self.patch)

    @property
    def n_tokens(self) -> int:
        nt, nh, nw = self.grid
        return nt * nh * nw

    @property
    def n_visible(self) -> int:
        return int(round(self.n_tokens * (1.0 - self.mask_ratio)))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def token_dim(self) -> int:
        return self.tube_t * self.patch * self.patch * 3

    def problems(self) -> list[str]:
        out = []
        for name in ("frames", "height", "width", "tube_t", "patch", "dim", "depth", "heads",
                     "num_aus", "batch", "accum_steps", "raw_frames"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1 (got {getattr(self, name)})")
        if self.tube_t >= 1 and self.frames % self.tube_t:
            out.append(f"tube_t={self.tube_t} must divide frames={self.frames}")
        if self.patch >= 1 and self.height % self.patch:
            out.append(f"patch={self.patch} must divide height={self.height}")
        if self.patch >= 1 and self.width % self.patch:
            out.append(f"patch={self.patch} must divide width={self.width}")
        if self.heads >= 1 and self.dim % self.heads:
            out.append(f"heads={self.heads} must divide dim={self.dim}")
        if self.dim % 4:
            out.append(f"dim={self.dim} must be divisible by 4")
        if not 0.0 <= self.mask_ratio < 1.0:
            out.append(f"mask_ratio={self.mask_ratio} must lie in [0, 1)")
        if self.dec_depth < 0:
            out.append("dec_depth must be >= 0")
        if self.raw_frames < self.frames:
            out.append(f"raw_frames={self.raw_frames} must be >= frames={self.frames}")
        if self.pixel_std <= 0:
            out.append("pixel_std must be > 0")
        if self.huber_delta <= 0:
            out.append("huber_delta must be > 0")
        if self.epochs < 0 or self.finetune_epochs < 0:
            out.append("epoch counts must be >= 0")
        if self.loss_support not in ("all", "masked"):
            out.append("loss_support must be 'all' or 'masked'")
        if self.decay_unit not in ("epoch", "step"):
            out.append("decay_unit must be 'epoch' or 'step'")
        if self.mode not in MODES:
            out.append(f"mode must be one of {', '.join(MODES)}")
        if self.au_subset not in AU_SUBSETS:
            out.append(f"au_subset must be one of {', '.join(AU_SUBSETS)}")
        return out

    def validate(self) -> ModelConfig:
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.to_dict().items())

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def summary(self) -> dict:
        return {
            "N": self.n_tokens,
            "M": self.n_visible,
            "D": self.dim,
            "L": self.depth,
            "H": self.heads,
            "d": self.head_dim,
        }


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(
        frames=16, height=224, width=224, tube_t=2, patch=16, dim=768, depth=11, heads=12,
        lr=1e-5, finetune_lr=1e-5, batch=8, accum_steps=20, epochs=600, finetune_epochs=100,
        raw_frames=32,
    ),
}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, kind):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


_KINDS = {f.name: {"int": int, "float": float, "str": str, "bool": bool}[f.type] for f in fields(ModelConfig)}


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    base = base or PRESETS["desk"]
    values = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key=value")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _KINDS:
            problems.append(f"line {lineno}: unknown key {key!r}")
            continue
        try:
            values[key] = _parse(raw, _KINDS[key])
        except ValueError:
            problems.append(f"line {lineno}: bad value for {key}: {raw!r}")
    if problems:
        raise ConfigError(problems)
    return base.replace(**values).validate()


def load_config(path, base: ModelConfig | None = None) -> ModelConfig:
    return parse_config(Path(path).read_text(), base)


def overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    """Apply non-None keyword overrides and re-validate."""
    return cfg.replace(**{k: v for k, v in kw.items() if v is not None}).validate()


def config_json(cfg: ModelConfig) -> str:
    return json.dumps({**cfg.to_dict(), **cfg.summary()}, sort_keys=True)
