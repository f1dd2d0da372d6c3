"""Fused VFE/AUE encoder, classifier head, focal loss, fine-tuning and attention maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import zoom

from . import numerics as nx
from .config import ConfigError, ModelConfig
from .formats import FormatError, read_tensor_file, write_tensor_file
from .numerics import ShapeError, Tensor
from .optim import Adam, decayed_lr
from .params import count, load_state, named_tensors, ones, state_dict, trunc_normal, zeros
from .pretext import PretextModel, TrainLog, _batches, _cfg_items, accumulate, config_from_header
from .tokenizer import embed_tokens, positional_encoding, standardize_pixels, tubelet_partition
from .transformer import AttentionTrace, StackParams, block_forward, encoder_forward, init_stack
from .video import LabeledClip

PROB_EPS = 1e-7


@dataclass
class Stream:
    embed: Tensor
    stack: StackParams


@dataclass
class ClassifierHead:
    norm_g: Tensor
    norm_b: Tensor
    w: Tensor  # D x 1
    b: Tensor  # 1


@dataclass
class FusedModel:
    vfe: Stream | None
    aue: Stream | None
    head: ClassifierHead
    cfg: ModelConfig = field(default_factory=ModelConfig, metadata={"static": True})
    mode: str = field(default="fused", metadata={"static": True})
    cross_layers: tuple[bool, ...] = field(default=(), metadata={"static": True})

    def __post_init__(self):
        if not self.cross_layers:
            self.cross_layers = tuple(i >= 1 for i in range(self.cfg.depth))
        need_vfe = self.mode in ("fused", "vfe_only", "baseline")
        need_aue = self.mode in ("fused", "aue_only")
        if need_vfe != (self.vfe is not None) or need_aue != (self.aue is not None):
            raise ConfigError(f"mode {self.mode!r} does not match the streams present")

    def parameters(self, freeze_aue: bool = False) -> list[Tensor]:
        return [t for name, t in named_tensors(self) if not (freeze_aue and name.startswith("aue."))]

    def parameter_count(self) -> int:
        return count(self)


@dataclass
class DetectionScore:
    probability: float
    logit: float
    clip_id: int = -1


def _stream(rng, cfg: ModelConfig) -> Stream:
    return Stream(trunc_normal(rng, (cfg.token_dim, cfg.dim), cfg.init_std),
                  init_stack(rng, cfg.depth, cfg.dim, cfg.heads, cfg.init_std))


def init_fused(cfg: ModelConfig, mode: str | None = None, seed: int | None = None) -> FusedModel:
    mode = mode or cfg.mode
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    vfe = _stream(rng, cfg) if mode in ("fused", "vfe_only", "baseline") else None
    aue = _stream(rng, cfg) if mode in ("fused", "aue_only") else None
    head = ClassifierHead(ones(cfg.dim), zeros(cfg.dim), trunc_normal(rng, (cfg.dim, 1), cfg.init_std), zeros(1))
    return FusedModel(vfe, aue, head, cfg, mode)


def _copy_stream(stream: Stream, ckpt: PretextModel, which: str) -> None:
    src = {"embed": ckpt.embed.data, **state_dict(ckpt.encoder, "stack")}
    for name, t in named_tensors(stream):
        if name not in src:
            raise ConfigError(f"{which} checkpoint lacks tensor {name}")
        if src[name].shape != t.shape:
            raise ConfigError(f"{which} checkpoint tensor {name} has shape {src[name].shape}, expected {t.shape}")
        t.data = src[name].astype(t.data.dtype, copy=True)


def from_pretext(
    cfg: ModelConfig,
    vfe_ckpt: PretextModel | None,
    aue_ckpt: PretextModel | None,
    mode: str | None = None,
) -> FusedModel:
    """VFE from the frame-reconstruction checkpoint, AUE from the AU checkpoint; baseline stays random."""
    mode = mode or cfg.mode
    model = init_fused(cfg, mode)
    if mode == "baseline":
        return model
    if model.vfe is not None:
        if vfe_ckpt is None:
            raise ConfigError(f"mode {mode!r} needs a frame_recon checkpoint")
        _copy_stream(model.vfe, vfe_ckpt, "VFE")
    if model.aue is not None:
        if aue_ckpt is None:
            raise ConfigError(f"mode {mode!r} needs an au_detect checkpoint")
        _copy_stream(model.aue, aue_ckpt, "AUE")
    return model


def fused_forward(frames: np.ndarray, model: FusedModel, trace: AttentionTrace | None = None) -> Tensor:
    """X_E for one clip (no masking). ``trace`` receives the final cross block's weights."""
    cfg = model.cfg
    if frames.shape != (cfg.frames, 3, cfg.height, cfg.width):
        raise ShapeError(f"clip shape {frames.shape} does not match config")
    grid = tubelet_partition(standardize_pixels(frames, cfg.pixel_mean, cfg.pixel_std), cfg.tube_t, cfg.patch)
    pe = positional_encoding(*grid.grid, cfg.dim)

    def embed(stream: Stream) -> Tensor:
        return embed_tokens(grid, stream.embed, pe).values

    if model.mode != "fused":
        stream = model.aue if model.mode == "aue_only" else model.vfe
        return encoder_forward(embed(stream), stream.stack)[-1]
    x1 = embed(model.vfe)
    x2 = embed(model.aue)
    blocks1, blocks2 = model.vfe.stack.blocks, model.aue.stack.blocks
    last_cross = max((i for i, on in enumerate(model.cross_layers) if on), default=-1)
    for i, blk in enumerate(blocks1):
        cross = model.cross_layers[i]
        t = trace if (cross and i == last_cross) else None
        new_x1 = block_forward(x1, x2 if cross else None, blk, t)
        # X_2(L) never conditions anything, so the last AUE block is skipped
        if i + 1 < len(blocks1):
            x2 = block_forward(x2, None, blocks2[i])
        x1 = new_x1
    return x1


def classify_logit(x_e: Tensor, head: ClassifierHead) -> Tensor:
    if x_e.shape[1] != head.w.shape[0]:
        raise ShapeError(f"X_E width {x_e.shape[1]} does not match head width {head.w.shape[0]}")
    pooled = nx.mean(x_e, axis=0, keepdims=True)
    return nx.matmul(nx.layer_norm(pooled, head.norm_g, head.norm_b), head.w) + head.b


def logistic(z: float) -> float:
    return float(0.5 * (1.0 + np.tanh(0.5 * z)))


def classify(x_e: Tensor, head: ClassifierHead, clip_id: int = -1) -> DetectionScore:
    z = float(classify_logit(x_e, head).item())
    return DetectionScore(logistic(z), z, clip_id)


def focal_loss(p: Tensor, y, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of -a_t (1 - p_t)^gamma log p_t over the batch."""
    y = np.asarray(y, dtype=float).reshape(p.shape)
    p = nx.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    pt = p * y + (1.0 - p) * (1.0 - y)
    at = alpha * y + (1.0 - alpha) * (1.0 - y)
    per = nx.mul(Tensor(-at), nx.mul(nx.pow_scalar(1.0 - pt, gamma), nx.log(pt)))
    return nx.mean(per)


def predict(model: FusedModel, clips: Sequence[LabeledClip]) -> np.ndarray:
    """Fake-class probabilities for ``clips``."""
    out = np.empty(len(clips))
    for i, clip in enumerate(clips):
        out[i] = classify(fused_forward(clip.stack.frames, model), model.head, i).probability
    return out


def finetune(
    corpus: Sequence[LabeledClip],
    model: FusedModel,
    cfg: ModelConfig | None = None,
    freeze_aue: bool | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[FusedModel, TrainLog]:
    cfg = cfg or model.cfg
    if not corpus:
        raise ConfigError("training corpus is empty")
    freeze = cfg.freeze_aue if freeze_aue is None else freeze_aue
    params = model.parameters(freeze_aue=freeze)
    if freeze and model.aue is not None:
        for _, t in named_tensors(model.aue):
            t.requires_grad = False
    opt = Adam(params, cfg.finetune_lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    log = TrainLog()
    step = 0

    def loss_fn(i):
        clip = corpus[i]
        z = classify_logit(fused_forward(clip.stack.frames, model), model.head)
        return focal_loss(nx.sigmoid(z), [clip.label], cfg.focal_alpha, cfg.focal_gamma)

    for epoch in range(cfg.finetune_epochs):
        batches = _batches(len(corpus), cfg.batch, rng)
        total = 0.0
        for start in range(0, len(batches), cfg.accum_steps):
            window = batches[start:start + cfg.accum_steps]
            opt.lr = decayed_lr(cfg.finetune_lr, cfg.decay, epoch if cfg.decay_unit == "epoch" else step)
            opt.zero_grad()
            loss = accumulate(params, window, loss_fn) / len(window)
            opt.step(grad_scale=1.0 / len(window))
            step += 1
            log.add(step, loss)
            total += loss
        if on_epoch:
            on_epoch(epoch, total / max(1, -(-len(batches) // cfg.accum_steps)))
    return model, log


# -- attention maps -------------------------------------------------------------


def token_mass(weights: Sequence[np.ndarray]) -> np.ndarray:
    """Attention received by each key token, averaged over heads and queries."""
    return np.mean([w.mean(axis=0) for w in weights], axis=0)


def mass_to_frames(mass: np.ndarray, cfg: ModelConfig, upsample: bool = True) -> np.ndarray:
    """Per-frame heat maps, min-max normalised (constant maps become 0.5)."""
    nt, nh, nw = cfg.grid
    grid = np.asarray(mass, dtype=float).reshape(nt, nh, nw)
    per_frame = np.repeat(grid, cfg.tube_t, axis=0)
    if upsample:
        per_frame = np.stack([zoom(f, cfg.patch, order=1, mode="nearest", grid_mode=True) for f in per_frame])
    out = np.empty_like(per_frame)
    for i, f in enumerate(per_frame):
        lo, hi = f.min(), f.max()
        out[i] = 0.5 if hi - lo <= 1e-12 * max(1.0, abs(hi)) else (f - lo) / (hi - lo)
    return out.astype(np.float32)


def extract_attention_maps(frames: np.ndarray, model: FusedModel) -> np.ndarray:
    if model.mode != "fused" or not any(model.cross_layers):
        raise ConfigError("attention maps need a fused model with cross-attention")
    trace = AttentionTrace()
    fused_forward(frames, model, trace)
    return mass_to_frames(token_mass(trace.weights), model.cfg)


# -- checkpoints ----------------------------------------------------------------


def save_fused(model: FusedModel, path) -> None:
    header = {
        "kind": "ckpt",
        "task": "fused",
        "mode": model.mode,
        "fusion.cross_layers": ",".join("1" if c else "0" for c in model.cross_layers),
    }
    header.update({f"cfg.{k}": v for k, v in _cfg_items(model.cfg)})
    write_tensor_file(path, header, state_dict(model))


def load_fused(path) -> FusedModel:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "ckpt" or header.get("task") != "fused":
        raise FormatError(f"{path}: not a fused checkpoint")
    cfg = config_from_header(header)
    model = init_fused(cfg, header["mode"])
    model.cross_layers = tuple(v == "1" for v in header["fusion.cross_layers"].split(","))
    load_state(model, tensors)
    return model
