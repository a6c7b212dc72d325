"""Perception heads: segmentation decoder and bird's-eye-view builders.

The decoder walks the encoder pyramid deep-to-shallow, upsampling 2x per
level and adding a projected skip from the matching stage, then refines
up to full input resolution and emits 23-class logits. The BEV builders
are plain numpy (no gradients flow through them): build_sdc back-projects
per-pixel classes with metric depth onto a top-down occupancy grid, and
lidar_bev histograms raw points into above/below-ground bins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .backbone import BackboneConfig, StageFeatures
from .errors import ConfigError, ContractError
from .skge import bilinear_resize

NUM_CLASSES = 23


@dataclass
class CameraConfig:
    """Pinhole intrinsics; defaults derive from the image size."""
    focal: float
    cx: float
    cy: float

    @staticmethod
    def for_image(h: int, w: int) -> "CameraConfig":
        return CameraConfig(focal=h / 2.0, cx=w / 2.0, cy=h / 2.0)


@dataclass
class BevConfig:
    size: int = 64          # grid is size x size cells
    resolution_m: float = 0.25  # meters per cell


@dataclass
class BevGrid:
    """One-hot class occupancy per cell, ego at the bottom-center row."""
    occupancy: np.ndarray              # (B, 23, Hb, Wb) in {0,1}
    lidar_hist: Optional[np.ndarray] = None  # (B, 2, Hb, Wb) counts


def seg_argmax(logits: np.ndarray) -> np.ndarray:
    """(B, 23, H, W) logits -> (B, H, W) class ids; ties go to the lowest id."""
    return np.argmax(logits, axis=1)


class SegDecoder(nn.Module):
    """Stage pyramid -> per-pixel 23-class logits at input resolution."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator,
                 decoder_dim: int = 24):
        self.config = config
        self.dim = decoder_dim
        self.laterals = [nn.Linear(config.stage_channels(s), decoder_dim, rng)
                         for s in range(1, 5)]
        # stage-1 grid is input/patch; two depth-to-space levels of 2x each
        # close the remaining gap for the desk patch size of 4
        self.patch = config.patch_size
        if self.patch not in (1, 2, 4):
            raise ConfigError(f"decoder supports patch sizes 1/2/4, got {self.patch}")
        n_up = {1: 0, 2: 1, 4: 2}[self.patch]
        self.upsamplers = [nn.Linear(decoder_dim, 4 * decoder_dim, rng)
                           for _ in range(n_up)]
        self.head = nn.Linear(decoder_dim, NUM_CLASSES, rng)

    @staticmethod
    def _depth_to_space(x: Tensor) -> Tensor:
        b, h, w, c4 = x.shape
        c = c4 // 4
        x = ad.reshape(x, (b, h, w, 2, 2, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (b, 2 * h, 2 * w, c))

    def forward(self, feats: StageFeatures) -> Tensor:
        x = self.laterals[3](feats[4])
        for s in (3, 2, 1):
            skip = self.laterals[s - 1](feats[s])
            x = ad.add(bilinear_resize(x, skip.shape[1], skip.shape[2]), skip)
        for up in self.upsamplers:
            x = self._depth_to_space(up(ad.gelu(x)))
        logits = self.head(x)  # (B, H, W, 23)
        return ad.transpose(logits, (0, 3, 1, 2))


def build_sdc(cls_map: np.ndarray, depth_m: np.ndarray, cam: CameraConfig,
              bev: BevConfig) -> BevGrid:
    """Drop per-pixel classes onto a metric top-down grid.

    Each pixel's ray is back-projected with its depth; the hit cell keeps
    the highest class index seen (order-independent, so permuting pixels
    cannot change the result). Points outside the grid are dropped. The
    ego sits at the bottom-center: row Hb-1 is distance 0.
    """
    if cam.focal <= 0:
        raise ConfigError(f"focal length must be positive, got {cam.focal}")
    if cls_map.ndim == 2:
        cls_map = cls_map[None]
        depth_m = depth_m[None]
    if np.any(depth_m <= 0):
        raise ContractError("depth must be positive meters")
    b, h, w = cls_map.shape
    hb = wb = bev.size
    res = bev.resolution_m

    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    winner = np.full((b, hb, wb), -1, dtype=np.int64)
    for i in range(b):
        z = depth_m[i]
        x = (uu - cam.cx) * z / cam.focal
        rows = hb - 1 - np.rint(z / res).astype(np.int64)
        cols = np.rint(wb / 2.0 + x / res).astype(np.int64)
        keep = (rows >= 0) & (rows < hb) & (cols >= 0) & (cols < wb)
        np.maximum.at(winner[i], (rows[keep], cols[keep]), cls_map[i][keep])

    occ = np.zeros((b, NUM_CLASSES, hb, wb), dtype=np.float32)
    bi, ri, ci = np.nonzero(winner >= 0)
    occ[bi, winner[bi, ri, ci], ri, ci] = 1.0
    return BevGrid(occupancy=occ)


def lidar_bev(points: np.ndarray, bev: BevConfig) -> np.ndarray:
    """(4, N) x/y/z/intensity points -> (2, Hb, Wb) above/below-ground counts.

    x is lateral (right positive), y is forward; the ground plane is z=0,
    bin 0 counts points strictly above it. Out-of-grid points are dropped.
    """
    if points.ndim != 2 or points.shape[0] != 4:
        raise ContractError(f"expected (4, N) points, got {points.shape}")
    hb = wb = bev.size
    out = np.zeros((2, hb, wb), dtype=np.float32)
    if points.shape[1] == 0:
        return out
    x, y, z = points[0], points[1], points[2]
    rows = hb - 1 - np.rint(y / bev.resolution_m).astype(np.int64)
    cols = np.rint(wb / 2.0 + x / bev.resolution_m).astype(np.int64)
    keep = (rows >= 0) & (rows < hb) & (cols >= 0) & (cols < wb)
    above = (z > 0) & keep
    below = (z <= 0) & keep
    np.add.at(out[0], (rows[above], cols[above]), 1.0)
    np.add.at(out[1], (rows[below], cols[below]), 1.0)
    return out
