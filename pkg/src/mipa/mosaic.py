"""Patch decomposition and complementary RGB/IR patch mixing.

Images are ``H x W x C`` arrays. Patches are ordered row-major from the
top-left corner, and an assignment value of 1 selects the IR (``f``)
patch while 0 selects the RGB (``g``) patch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (n, patch_size, patch_size, C)
    grid_h: int
    grid_w: int
    patch_size: int

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        if self.patches.ndim != 4 or self.patches.shape[0] != n:
            raise ValueError(
                f"expected {n} patches for a {self.grid_h}x{self.grid_w} grid, "
                f"got array of shape {self.patches.shape}")
        if self.patches.shape[1:3] != (self.patch_size, self.patch_size):
            raise ValueError(f"patches must be {self.patch_size}x{self.patch_size}, "
                             f"got {self.patches.shape[1:3]}")

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def image_h(self) -> int:
        return self.grid_h * self.patch_size

    @property
    def image_w(self) -> int:
        return self.grid_w * self.patch_size

    @property
    def channels(self) -> int:
        return self.patches.shape[3]

    def geometry(self) -> tuple:
        return (self.grid_h, self.grid_w, self.patch_size, self.channels)


@dataclass(frozen=True)
class ModalityMask:
    assignment: np.ndarray  # (n,) uint8, 1 = IR, 0 = RGB
    rho: float

    @property
    def n(self) -> int:
        return int(self.assignment.shape[0])

    @property
    def m_count(self) -> int:
        return int(self.assignment.sum())

    @property
    def l_count(self) -> int:
        return self.n - self.m_count


def patchify(image, patch_size: int) -> PatchGrid:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    if patch_size <= 0:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    h, w, c = image.shape
    if h % patch_size:
        raise ValueError(f"image height {h} is not divisible by patch_size {patch_size}")
    if w % patch_size:
        raise ValueError(f"image width {w} is not divisible by patch_size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    patches = (image.reshape(gh, patch_size, gw, patch_size, c)
               .transpose(0, 2, 1, 3, 4)
               .reshape(gh * gw, patch_size, patch_size, c))
    return PatchGrid(patches=patches, grid_h=gh, grid_w=gw, patch_size=patch_size)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    s, c = grid.patch_size, grid.channels
    return (grid.patches.reshape(grid.grid_h, grid.grid_w, s, s, c)
            .transpose(0, 2, 1, 3, 4)
            .reshape(grid.image_h, grid.image_w, c))


def mask_count(n: int, rho: float) -> int:
    """Number of IR patches for ``n`` patches at ratio ``rho`` (half-to-even)."""
    return int(np.rint(n * rho))


def _as_generator(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_mask(n: int, rho: float, rng_seed) -> ModalityMask:
    """Draw a complementary assignment with exactly ``round(n * rho)`` IR patches.

    ``rng_seed`` is an int seed or an existing ``np.random.Generator`` (which
    is advanced in place).
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    m = mask_count(n, rho)
    rng = _as_generator(rng_seed)
    assignment = np.zeros(n, dtype=np.uint8)
    assignment[rng.choice(n, size=m, replace=False)] = 1
    return ModalityMask(assignment=assignment, rho=float(rho))


def mix(grid_f: PatchGrid, grid_g: PatchGrid, mask: ModalityMask) -> PatchGrid:
    if grid_f.geometry() != grid_g.geometry():
        raise ValueError(f"grid geometry mismatch: f={grid_f.geometry()} g={grid_g.geometry()}")
    if mask.n != grid_f.n:
        raise ValueError(f"mask length {mask.n} does not match {grid_f.n} patches")
    select = mask.assignment.astype(bool)[:, None, None, None]
    patches = np.where(select, grid_f.patches, grid_g.patches)
    return PatchGrid(patches=patches, grid_h=grid_f.grid_h, grid_w=grid_f.grid_w,
                     patch_size=grid_f.patch_size)


def modality_map_from_mask(mask: ModalityMask, grid_h: int, grid_w: int) -> np.ndarray:
    if mask.n != grid_h * grid_w:
        raise ValueError(f"mask length {mask.n} does not match a {grid_h}x{grid_w} grid")
    return mask.assignment.reshape(grid_h, grid_w).copy()


def mix_images(image_f: torch.Tensor, image_g: torch.Tensor, modality_map: torch.Tensor,
               patch_size: int) -> torch.Tensor:
    """Batched mosaic for channels-first tensors.

    ``image_f``/``image_g`` are ``(B, C, H, W)``; ``modality_map`` is
    ``(B, H / patch_size, W / patch_size)`` with 1 selecting ``image_f``.
    Equivalent to patchify -> mix -> unpatchify per image.
    """
    if image_f.shape != image_g.shape:
        raise ValueError(f"shape mismatch: f={tuple(image_f.shape)} g={tuple(image_g.shape)}")
    b, _, h, w = image_f.shape
    if modality_map.shape != (b, h // patch_size, w // patch_size):
        raise ValueError(f"modality map of shape {tuple(modality_map.shape)} does not fit "
                         f"images {tuple(image_f.shape)} with patch_size {patch_size}")
    pixel_map = modality_map.repeat_interleave(patch_size, 1).repeat_interleave(patch_size, 2)
    return torch.where(pixel_map.bool()[:, None], image_f, image_g)
