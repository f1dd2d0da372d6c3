"""Masked-autoencoder pretext training: frame reconstruction and AU-map reconstruction."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .au_maps import build_au_stack
from .config import ConfigError, ModelConfig, parse_config
from .formats import FormatError, read_tensor_file, write_tensor_file
from .numerics import ShapeError, Tensor
from .optim import Adam, decayed_lr
from .params import load_state, named_tensors, state_dict, trunc_normal
from .tokenizer import (
    embed_tokens,
    fold_tokens,
    gather_visible,
    positional_encoding,
    sample_mask,
    standardize_pixels,
    tubelet_partition,
)
from .transformer import (
    OutputHead,
    StackParams,
    decoder_forward,
    encoder_forward,
    init_head,
    init_stack,
)
from .video import LabeledClip

TASKS = ("frame_recon", "au_detect")


@dataclass
class PretextModel:
    """Embedding, encoder, decoder and output projection for one pretext task."""

    embed: Tensor
    encoder: StackParams
    decoder: StackParams
    head: OutputHead
    task: str = field(default="frame_recon", metadata={"static": True})
    cfg: ModelConfig = field(default_factory=ModelConfig, metadata={"static": True})
    step: int = field(default=0, metadata={"static": True})

    def parameters(self) -> list[Tensor]:
        return [t for _, t in named_tensors(self)]


def target_channels(task: str, cfg: ModelConfig) -> int:
    if task == "frame_recon":
        return 3
    return cfg.num_aus * (3 if cfg.au_paper_channels else 1)


def init_pretext(cfg: ModelConfig, task: str, seed: int | None = None) -> PretextModel:
    if task not in TASKS:
        raise ConfigError(f"unknown pretext task {task!r}")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    std = cfg.init_std
    out_dim = cfg.tube_t * cfg.patch * cfg.patch * target_channels(task, cfg)
    return PretextModel(
        trunc_normal(rng, (cfg.token_dim, cfg.dim), std),
        init_stack(rng, cfg.depth, cfg.dim, cfg.heads, std),
        init_stack(rng, cfg.decoder_depth, cfg.dim, cfg.heads, std, placeholder=True),
        init_head(rng, cfg.dim, out_dim, std),
        task,
        cfg,
    )


def huber_loss(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    target = nx.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    if delta <= 0:
        raise ValueError("delta must be positive")
    return nx.mean(nx.huber_elementwise(pred - target, delta))


def task_target(clip: LabeledClip, task: str, cfg: ModelConfig) -> np.ndarray:
    """(T_f, C, H, W) reconstruction target for ``clip``."""
    if task == "frame_recon":
        return clip.stack.frames
    maps = build_au_stack(clip.stack, cfg.au_subset, cfg.num_aus)
    if cfg.au_paper_channels:
        t, f, h, w = maps.shape
        maps = np.repeat(maps[:, :, None], 3, axis=2).reshape(t, 3 * f, h, w)
    return maps


@dataclass
class PretextOutput:
    loss: Tensor
    pred_tokens: Tensor
    target_tokens: np.ndarray
    mask: object


def pretext_forward(
    frames: np.ndarray,
    target: np.ndarray | None,
    model: PretextModel,
    mask_seed: int,
    ratio: float | None = None,
) -> PretextOutput:
    cfg = model.cfg
    if target is None:
        raise ValueError(f"{model.task} needs a reconstruction target")
    if frames.shape != (cfg.frames, 3, cfg.height, cfg.width):
        raise ShapeError(f"clip shape {frames.shape} does not match config")
    grid = tubelet_partition(standardize_pixels(frames, cfg.pixel_mean, cfg.pixel_std), cfg.tube_t, cfg.patch)
    pe = positional_encoding(*grid.grid, cfg.dim)
    seq = embed_tokens(grid, model.embed, pe)
    mask = sample_mask(grid.n_tokens, cfg.mask_ratio if ratio is None else ratio, mask_seed)
    latent = encoder_forward(gather_visible(seq, mask).values, model.encoder)[-1]
    pred = decoder_forward(latent, mask, model.decoder, model.head, pe)
    tgt = tubelet_partition(np.asarray(target), cfg.tube_t, cfg.patch).tokens
    if cfg.loss_support == "masked" and len(mask.masked):
        loss = huber_loss(nx.gather_rows(pred, mask.masked), tgt[mask.masked], cfg.huber_delta)
    else:
        loss = huber_loss(pred, tgt, cfg.huber_delta)
    return PretextOutput(loss, pred, tgt, mask)


def reconstruct(model: PretextModel, frames: np.ndarray, target: np.ndarray, mask_seed: int):
    """Predicted target volume (T_f, C, H, W) and the mask used."""
    out = pretext_forward(frames, target, model, mask_seed)
    cfg = model.cfg
    vol = fold_tokens(out.pred_tokens.data, cfg.grid, (cfg.tube_t, cfg.patch), target.shape[1])
    return vol, out.mask


def masked_voxels(mask, cfg: ModelConfig, channels: int) -> np.ndarray:
    """Boolean (T_f, C, H, W) volume that is True inside masked tubes."""
    flags = np.zeros((cfg.n_tokens, cfg.tube_t * cfg.patch * cfg.patch * channels), dtype=bool)
    flags[mask.masked] = True
    return fold_tokens(flags, cfg.grid, (cfg.tube_t, cfg.patch), channels)


def mask_seed_for(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def add(self, step: int, loss: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for s, l in zip(self.steps, self.losses):
                w.writerow([s, repr(l)])


def accumulate(params: Sequence[Tensor], micro_batches, loss_fn: Callable[[int], Tensor]) -> float:
    """Backpropagate mean-per-batch losses for each micro-batch into ``p.grad``.

    Returns the summed per-batch mean loss; callers divide gradients by the
    number of micro-batches when stepping.
    """
    total = 0.0
    for mb in micro_batches:
        for i in mb:
            loss = loss_fn(int(i))
            nx.backward(nx.scale(loss, 1.0 / len(mb)))
            total += loss.item() / len(mb)
    return total


def train_pretext(
    corpus: Sequence[LabeledClip],
    cfg: ModelConfig,
    task: str,
    model: PretextModel | None = None,
    max_steps: int | None = None,
    targets: Sequence[np.ndarray] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[PretextModel, TrainLog]:
    """Adam + gradient accumulation; one optimizer step per ``accum_steps`` micro-batches."""
    if not corpus:
        raise ConfigError("training corpus is empty")
    model = model or init_pretext(cfg, task)
    if targets is None:
        targets = [task_target(c, task, cfg) for c in corpus]
    params = model.parameters()
    opt = Adam(params, cfg.lr, (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    step = model.step
    for epoch in range(cfg.epochs):
        if max_steps is not None and step >= max_steps:
            break
        batches = _batches(len(corpus), cfg.batch, rng)
        for start in range(0, len(batches), cfg.accum_steps):
            if max_steps is not None and step >= max_steps:
                break
            window = batches[start:start + cfg.accum_steps]
            opt.lr = decayed_lr(cfg.lr, cfg.decay, epoch if cfg.decay_unit == "epoch" else step)
            opt.zero_grad()

            def loss_fn(i, epoch=epoch):
                return pretext_forward(corpus[i].stack.frames, targets[i], model, mask_seed_for(cfg.seed, epoch, i)).loss

            loss = accumulate(params, window, loss_fn) / len(window)
            opt.step(grad_scale=1.0 / len(window))
            step += 1
            log.add(step, loss)
            if on_step:
                on_step(step, loss)
    model.step = step
    return model, log


# -- checkpoints ----------------------------------------------------------------


def save_pretext(model: PretextModel, path) -> None:
    header = {"kind": "ckpt", "task": model.task, "step": model.step}
    header.update({f"cfg.{k}": v for k, v in _cfg_items(model.cfg)})
    write_tensor_file(path, header, state_dict(model))


def _cfg_items(cfg: ModelConfig):
    for line in cfg.to_text().splitlines():
        k, _, v = line.partition("=")
        yield k, v


def config_from_header(header: dict) -> ModelConfig:
    text = "\n".join(f"{k[4:]}={v}" for k, v in header.items() if k.startswith("cfg."))
    return parse_config(text, ModelConfig())


def load_pretext(path) -> PretextModel:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "ckpt" or header.get("task") not in TASKS:
        raise FormatError(f"{path}: not a pretext checkpoint")
    cfg = config_from_header(header)
    model = init_pretext(cfg, header["task"])
    load_state(model, tensors)
    model.step = int(header.get("step", 0))
    return model
