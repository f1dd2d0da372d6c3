"""Tubelet tokens, patch embedding, 3-D sinusoidal positions and token masking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import ConfigError
from .numerics import ShapeError, Tensor


@dataclass
class TubeTokenGrid:
    tokens: np.ndarray  # (N, T*P*P*C)
    grid: tuple[int, int, int]
    tube: tuple[int, int]  # (T, P)
    channels: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


@dataclass
class LatentSequence:
    values: Tensor
    positions: np.ndarray  # row -> flat (t, h, w) cell index

    def __post_init__(self):
        if self.values.shape[0] != len(self.positions):
            raise ShapeError(f"{self.values.shape[0]} rows but {len(self.positions)} positions")


@dataclass(frozen=True)
class MaskPattern:
    visible: np.ndarray
    masked: np.ndarray
    seed: int
    ratio: float

    @property
    def n_tokens(self) -> int:
        return len(self.visible) + len(self.masked)


def tubelet_partition(volume: np.ndarray, tube_t: int, patch: int) -> TubeTokenGrid:
    """Split a (T_f, C, H, W) volume into row-major (t, h, w) tubes flattened as (T, P, P, C)."""
    tf, c, h, w = volume.shape
    for axis, size, div in (("frames", tf, tube_t), ("height", h, patch), ("width", w, patch)):
        if size % div:
            raise ShapeError(f"{axis}={size} is not divisible by {div}")
    nt, nh, nw = tf // tube_t, h // patch, w // patch
    x = volume.reshape(nt, tube_t, c, nh, patch, nw, patch).transpose(0, 3, 5, 1, 4, 6, 2)
    return TubeTokenGrid(x.reshape(nt * nh * nw, -1), (nt, nh, nw), (tube_t, patch), c)


def fold_tokens(tokens: np.ndarray, grid, tube, channels: int) -> np.ndarray:
    """Inverse of ``tubelet_partition``: (N, T*P*P*C) back to (T_f, C, H, W)."""
    nt, nh, nw = grid
    tt, p = tube
    x = np.asarray(tokens).reshape(nt, nh, nw, tt, p, p, channels).transpose(0, 3, 6, 1, 4, 2, 5)
    return x.reshape(nt * tt, channels, nh * p, nw * p)


def _band(pos: np.ndarray, width: int) -> np.ndarray:
    n_sin = (width + 1) // 2
    freq = 1.0 / 10000.0 ** (np.arange(n_sin) * 2.0 / width)
    ang = pos[:, None] * freq[None]
    return np.concatenate([np.sin(ang), np.cos(ang[:, : width - n_sin])], axis=1)


def positional_encoding(n_t: int, n_h: int, n_w: int, dim: int) -> np.ndarray:
    """Fixed separable sinusoids: D/2 for time, D/4 each for rows and columns."""
    if dim % 4:
        raise ConfigError(f"positional encoding needs dim divisible by 4, got {dim}")
    t, h, w = np.meshgrid(np.arange(n_t), np.arange(n_h), np.arange(n_w), indexing="ij")
    pe = np.concatenate(
        [_band(t.ravel().astype(float), dim // 2),
         _band(h.ravel().astype(float), dim // 4),
         _band(w.ravel().astype(float), dim // 4)],
        axis=1,
    )
    return pe.astype(nx.get_dtype())


def standardize_pixels(frames: np.ndarray, mean: float, std: float) -> np.ndarray:
    """Shift and scale encoder input pixels; reconstruction targets stay in [0, 1]."""
    return ((np.asarray(frames) - mean) / std).astype(frames.dtype, copy=False)


def embed_tokens(grid: TubeTokenGrid, weight: Tensor, pe: np.ndarray) -> LatentSequence:
    if weight.shape[0] != grid.tokens.shape[1]:
        raise ShapeError(f"embedding weight has {weight.shape[0]} rows, tokens have width {grid.tokens.shape[1]}")
    if pe.shape != (grid.n_tokens, weight.shape[1]):
        raise ShapeError(f"positional table {pe.shape} does not match {grid.n_tokens}x{weight.shape[1]}")
    values = nx.matmul(Tensor(grid.tokens), weight) + Tensor(pe)
    return LatentSequence(values, np.arange(grid.n_tokens))


def random_mask(n: int, ratio: float, seed: int) -> MaskPattern:
    if not 0.0 <= ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_vis = int(round(n * (1.0 - ratio)))
    perm = np.random.default_rng(seed).permutation(n)
    return MaskPattern(np.sort(perm[n - n_vis:]), np.sort(perm[: n - n_vis]), seed, ratio)


# Other masking patterns register here under a name; "random" is the training default.
MASK_STRATEGIES: dict[str, Callable[[int, float, int], MaskPattern]] = {"random": random_mask}


def sample_mask(n: int, ratio: float, seed: int, strategy: str = "random") -> MaskPattern:
    try:
        fn = MASK_STRATEGIES[strategy]
    except KeyError:
        raise ConfigError(f"unknown mask strategy {strategy!r}") from None
    return fn(n, ratio, seed)


def gather_visible(seq: LatentSequence, mask: MaskPattern) -> LatentSequence:
    n = seq.values.shape[0]
    if mask.n_tokens != n:
        raise IndexError(f"mask covers {mask.n_tokens} tokens, sequence has {n}")
    return LatentSequence(nx.gather_rows(seq.values, mask.visible), seq.positions[mask.visible])


def scatter_back(visible: Tensor, mask: MaskPattern, placeholder: Tensor, pe: np.ndarray | None = None) -> Tensor:
    """Rebuild all N rows: visible rows in place, the shared placeholder (plus PE) elsewhere."""
    if visible.shape[0] != len(mask.visible):
        raise IndexError(f"{visible.shape[0]} visible rows but mask keeps {len(mask.visible)}")
    if len(mask.masked) == 0:
        return visible
    fill = nx.gather_rows(placeholder, np.zeros(len(mask.masked), dtype=np.int64))
    if pe is not None:
        fill = fill + Tensor(pe[mask.masked])
    order = np.concatenate([mask.visible, mask.masked])
    return nx.gather_rows(nx.concat([visible, fill], axis=0), np.argsort(order))
