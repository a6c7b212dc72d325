"""End-to-end driving model.

Forward path: RGB -> encoder A -> skip fusion -> segmentation decoder;
predicted classes + decoded depth -> top-down semantic grid -> encoder B
-> skip fusion at the route target (the control bottleneck) -> pooled
feature -> recurrent controller emitting waypoints, controls, and the
traffic-light / stop-sign probabilities. The grid construction is
discrete (argmax), so encoder A learns through the segmentation loss
while encoder B and the controller learn through the control losses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .backbone import BackboneConfig, SwinEncoder
from .controller import Controller, ControlOutput, global_to_local
from .data import Sample, decode_depth
from .errors import ConfigError
from .heads import (BevConfig, CameraConfig, NUM_CLASSES, SegDecoder, build_sdc,
                    lidar_bev, seg_argmax)
from .skge import SkipFusion, SkipRoute, parse_route


@dataclass
class ModelOutput:
    seg_logits: Tensor        # (B, 23, H, W)
    waypoints: Tensor         # (B, 3, 2)
    steering: Tensor          # (B, 1)
    throttle: Tensor          # (B, 1)
    brake: Tensor             # (B, 1)
    tl_prob: Tensor           # (B, 1)
    ss_prob: Tensor           # (B, 1)
    latent: Tensor            # (B, hidden)


class DrivingModel(nn.Module):
    def __init__(self, backbone: BackboneConfig, route_a: SkipRoute,
                 route_b: SkipRoute, bev: BevConfig,
                 use_lidar: bool = False, hidden: int = 64,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        if bev.size != backbone.input_size:
            raise ConfigError(f"bev size {bev.size} must match backbone input size "
                              f"{backbone.input_size}")
        self.backbone_config = backbone
        self.route_a = route_a
        self.route_b = route_b
        self.bev = bev
        self.cam = CameraConfig.for_image(backbone.input_size, backbone.input_size)
        self.use_lidar = use_lidar
        self.hidden = hidden

        self.enc_a = SwinEncoder(backbone, 3, rng)
        self.fuse_a = SkipFusion(route_a, backbone.stage_channels, rng)
        self.decoder = SegDecoder(backbone, rng)
        in_b = NUM_CLASSES + (2 if use_lidar else 0)
        self.enc_b = SwinEncoder(backbone, in_b, rng)
        self.fuse_b = SkipFusion(route_b, backbone.stage_channels, rng)
        self.controller = Controller(backbone.stage_channels(route_b.target),
                                     hidden, rng)

    def _dtype(self):
        for _, p in self.named_parameters():
            return p.dtype
        return np.float32

    def forward(self, batch: Dict[str, np.ndarray]) -> ModelOutput:
        dtype = self._dtype()
        rgb = Tensor(np.asarray(batch["rgb"], dtype=dtype) / 255.0)
        feats_a = self.enc_a.forward_stages(rgb)
        feats_a[self.route_a.target] = self.fuse_a.fuse(feats_a)
        seg_logits = self.decoder(feats_a)

        cls = seg_argmax(seg_logits.data)
        grid = build_sdc(cls, batch["depth_m"], self.cam, self.bev)
        channels = [grid.occupancy]
        if self.use_lidar:
            hist = batch.get("lidar_hist")
            if hist is None:
                hist = np.zeros((cls.shape[0], 2, self.bev.size, self.bev.size),
                                dtype=np.float32)
            channels.append(hist)
        sdc = Tensor(np.concatenate(channels, axis=1).astype(dtype))

        feats_b = self.enc_b.forward_stages(sdc)
        tap = self.fuse_b.fuse(feats_b)
        pooled = ad.mean(tap, axis=(1, 2))

        route_local = Tensor(np.asarray(batch["route_local"], dtype=dtype))
        speed = Tensor(np.asarray(batch["speed"], dtype=dtype))
        ctrl: ControlOutput = self.controller(pooled, route_local, speed)
        return ModelOutput(seg_logits=seg_logits, waypoints=ctrl.waypoints,
                           steering=ctrl.steering, throttle=ctrl.throttle,
                           brake=ctrl.brake, tl_prob=ctrl.tl_prob,
                           ss_prob=ctrl.ss_prob, latent=ctrl.latent)


def make_batch(samples: List[Sample], use_lidar: bool = False) -> Dict[str, np.ndarray]:
    """Stack Samples into the numpy batch dict the model consumes."""
    rgb = np.stack([s.rgb for s in samples])
    depth_m = np.stack([decode_depth(s.depth_rgb) for s in samples])
    route_local = np.stack([global_to_local(s.route_point, s.ego()) for s in samples])
    speed = np.array([[s.speed] for s in samples], dtype=np.float64)
    batch = {
        "rgb": rgb, "depth_m": depth_m, "route_local": route_local, "speed": speed,
        "seg_gt": np.stack([s.seg_gt for s in samples]),
        "waypoints_gt": np.stack([s.waypoints_gt for s in samples]),
        "controls_gt": np.stack([s.controls_gt for s in samples]),
        "tl_gt": np.array([[s.tl_gt] for s in samples], dtype=np.float64),
        "ss_gt": np.array([[s.ss_gt] for s in samples], dtype=np.float64),
    }
    if use_lidar:
        size = samples[0].rgb.shape[-1]
        bev = BevConfig(size=size)
        hists = []
        for s in samples:
            pts = s.lidar if s.lidar is not None else np.zeros((4, 0), dtype=np.float32)
            hists.append(lidar_bev(pts, bev))
        batch["lidar_hist"] = np.stack(hists)
    return batch


def build_model(cfg, rng: Optional[np.random.Generator] = None) -> DrivingModel:
    """Construct a DrivingModel from a flat RunConfig-style mapping."""
    backbone = BackboneConfig(
        input_size=int(cfg["backbone.input_size"]),
        patch_size=int(cfg["backbone.patch"]),
        window_size=int(cfg["backbone.window"]),
        embed_dim=int(cfg["backbone.embed_dim"]),
        depths=tuple(int(x) for x in str(cfg["backbone.depths"]).split(",")),
        heads=tuple(int(x) for x in str(cfg["backbone.heads"]).split(",")),
        variant_name=str(cfg["backbone.variant"]),
    )
    bev = BevConfig(size=int(cfg["bev.size"]),
                    resolution_m=float(cfg["bev.resolution_m"]))
    return DrivingModel(backbone,
                        parse_route(str(cfg["skge.route_a"])),
                        parse_route(str(cfg["skge.route_b"])),
                        bev, use_lidar=bool(int(cfg["bev.use_lidar"])),
                        rng=rng)
