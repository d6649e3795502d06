"""The shared UNet noise predictor, conditioned on the input view, timestep,
viewpoint difference, and the frustum features of the shared spatial volume.

One parameter set serves all N views; synchronization happens through the
spatial volume built once per step from every view's current noisy state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import geometry as geo
from . import tensor as T
from . import volume as V
from .schedule import NoiseSchedule
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    in_channels: int = 3
    base_width: int = 32
    channel_mults: tuple = (1, 2, 3)
    blocks_per_level: int = 2
    emb_dim: int = 128
    time_freq_dim: int = 64
    attention_levels: tuple = (1, 2)  # desk-scale: attend at 16x16 and 8x8 maps
    volume_size: int = 16
    depth_planes: tuple = (24, 24, 24)
    c2d: int = 8
    c_vol: int = 16
    groups: int = 8
    ablation: str = "attention"  # attention | flatten-depth | none

    def __post_init__(self):
        levels = len(self.channel_mults)
        if not set(self.attention_levels) <= set(range(levels)):
            raise ValueError("attention levels must be a subset of resolution levels")
        if len(self.depth_planes) != levels:
            raise ValueError("need one depth-plane count per resolution level")
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError("image size must be divisible by the total downsampling factor")
        for m in self.channel_mults:
            if (self.base_width * m) % self.groups != 0:
                raise ValueError("level widths must be divisible by the norm group count")
        if self.ablation not in ("attention", "flatten-depth", "none"):
            raise ValueError(f"unknown ablation {self.ablation!r}")

    @property
    def widths(self):
        return [self.base_width * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        for key in ("channel_mults", "attention_levels", "depth_planes"):
            d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def paper_volume(cls, **kw) -> "DenoiserConfig":
        """Full-size volume preset: 32^3 vertices, 48 depth planes."""
        base = dict(volume_size=32, depth_planes=(48, 48, 48))
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True)
class InputView:
    """The conditioning view: its image (C, H, W) in [-1, 1] and camera pose."""

    image: np.ndarray
    pose: geo.SphericalPose


# ---------------------------------------------------------------------------
# embeddings


_FREQ_CACHE: dict[int, np.ndarray] = {}


def time_features(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features at log-spaced frequencies, shape (1, dim)."""
    half = dim // 2
    freqs = _FREQ_CACHE.get(half)
    if freqs is None:
        freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half - 1, 1))
        _FREQ_CACHE[half] = freqs
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])[None, :].astype(T.zeros(1).dtype)


def _mlp2(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = T.add(T.matmul(x, params[f"{prefix}.mlp1.w"]), params[f"{prefix}.mlp1.b"])
    return T.add(T.matmul(T.silu(h), params[f"{prefix}.mlp2.w"]), params[f"{prefix}.mlp2.b"])


def time_embed(t: int, total_steps: int, params: dict, cfg: DenoiserConfig) -> Tensor:
    if not 1 <= t <= total_steps:
        raise ValueError(f"timestep {t} outside [1, {total_steps}]")
    return _mlp2(Tensor(time_features(t, cfg.time_freq_dim)), params, "temb")


def dv_embed(delta: geo.ViewDelta, params: dict) -> Tensor:
    """Embed (d_elevation, sin d_azimuth, cos d_azimuth)."""
    vec = Tensor(delta.vector()[None, :].astype(T.zeros(1).dtype))
    return _mlp2(vec, params, "dv")


# ---------------------------------------------------------------------------
# residual block


def _init_res_block(rng: Rng, prefix: str, c_in: int, c_out: int, emb_dim: int) -> dict:
    k = 3
    p = {
        f"{prefix}.gn1.gamma": T.param(np.ones(c_in, dtype=T.zeros(1).dtype)),
        f"{prefix}.gn1.beta": T.param(T.zeros(c_in)),
        f"{prefix}.conv1.w": T.param(T.he_normal(rng, (c_out, c_in, k, k), c_in * k * k)),
        f"{prefix}.conv1.b": T.param(T.zeros(c_out)),
        f"{prefix}.emb.w": T.param(T.he_normal(rng, (emb_dim, c_out), emb_dim)),
        f"{prefix}.emb.b": T.param(T.zeros((1, c_out))),
        f"{prefix}.gn2.gamma": T.param(np.ones(c_out, dtype=T.zeros(1).dtype)),
        f"{prefix}.gn2.beta": T.param(T.zeros(c_out)),
        f"{prefix}.conv2.w": T.param(T.he_normal(rng, (c_out, c_out, k, k), c_out * k * k)),
        f"{prefix}.conv2.b": T.param(T.zeros(c_out)),
    }
    if c_in != c_out:
        p[f"{prefix}.skip.w"] = T.param(T.he_normal(rng, (c_out, c_in, 1, 1), c_in))
        p[f"{prefix}.skip.b"] = T.param(T.zeros(c_out))
    return p


def _res_block(x: Tensor, emb: Tensor, params: dict, prefix: str, groups: int) -> Tensor:
    _, hh, ww = x.shape
    h = T.silu(T.group_norm(x, groups, params[f"{prefix}.gn1.gamma"], params[f"{prefix}.gn1.beta"]))
    h = T.conv(h, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], dims=2)
    e = T.add(T.matmul(T.silu(emb), params[f"{prefix}.emb.w"]), params[f"{prefix}.emb.b"])
    c_out = e.shape[1]
    h = T.add(h, T.reshape(T.repeat(T.reshape(e, (c_out, 1)), hh * ww, axis=1), (c_out, hh, ww)))
    h = T.silu(T.group_norm(h, groups, params[f"{prefix}.gn2.gamma"], params[f"{prefix}.gn2.beta"]))
    h = T.conv(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], dims=2)
    if f"{prefix}.skip.w" in params:
        x = T.conv(x, params[f"{prefix}.skip.w"], params[f"{prefix}.skip.b"], dims=2)
    return T.add(h, x)


# ---------------------------------------------------------------------------
# parameter assembly


def init_params_for_ring(cfg: DenoiserConfig, n_views: int, rng: Rng) -> dict[str, Tensor]:
    """Full parameter set; the volume CNN's input width depends on the ring size."""
    p = init_params_without_cond(cfg, rng)
    if cfg.ablation == "none":
        return p
    e = cfg.emb_dim
    p.update(V.init_extractor_params(rng, "vol.extract", cfg.in_channels, cfg.c2d, e))
    vg = math.gcd(cfg.groups, cfg.c_vol)
    p.update(V.init_volume_cnn_params(rng, "vol.cnn", n_views, cfg.c2d, cfg.c_vol, vg))
    for lv in range(len(cfg.widths)):
        if lv not in cfg.attention_levels:
            continue
        for side in ("down", "up"):
            prefix = f"{'attn' if cfg.ablation == 'attention' else 'flat'}.{side}{lv}"
            if cfg.ablation == "attention":
                p.update(V.init_depth_attention_params(rng, prefix, cfg.widths[lv], cfg.c_vol,
                                                       cfg.depth_planes[lv]))
            else:
                p.update(V.init_flatten_params(rng, prefix, cfg.widths[lv], cfg.c_vol,
                                               cfg.depth_planes[lv]))
    return p


def init_params_without_cond(cfg: DenoiserConfig, rng: Rng) -> dict[str, Tensor]:
    """UNet and embedding parameters only (the frustum path excluded)."""
    p: dict[str, Tensor] = {}
    e = cfg.emb_dim
    w = cfg.widths
    k = 3

    p["temb.mlp1.w"] = T.param(T.he_normal(rng, (cfg.time_freq_dim, e), cfg.time_freq_dim))
    p["temb.mlp1.b"] = T.param(T.zeros((1, e)))
    p["temb.mlp2.w"] = T.param(T.he_normal(rng, (e, e), e))
    p["temb.mlp2.b"] = T.param(T.zeros((1, e)))
    p["dv.mlp1.w"] = T.param(T.he_normal(rng, (3, e), 3))
    p["dv.mlp1.b"] = T.param(T.zeros((1, e)))
    p["dv.mlp2.w"] = T.param(T.he_normal(rng, (e, e), e))
    p["dv.mlp2.b"] = T.param(T.zeros((1, e)))

    c_in = 2 * cfg.in_channels
    p["unet.conv_in.w"] = T.param(T.he_normal(rng, (w[0], c_in, k, k), c_in * k * k))
    p["unet.conv_in.b"] = T.param(T.zeros(w[0]))

    levels = len(w)
    for lv in range(levels):
        cin = w[lv] if lv == 0 else w[lv - 1]
        for b in range(cfg.blocks_per_level):
            p.update(_init_res_block(rng, f"unet.down{lv}.block{b}", cin if b == 0 else w[lv],
                                     w[lv], e))
    for b in range(2):
        p.update(_init_res_block(rng, f"unet.mid.block{b}", w[-1], w[-1], e))
    for lv in reversed(range(levels)):
        if lv < levels - 1:  # channel map applied right after nearest upsampling
            p[f"unet.upsample{lv}.w"] = T.param(
                T.he_normal(rng, (w[lv], w[lv + 1], k, k), w[lv + 1] * k * k))
            p[f"unet.upsample{lv}.b"] = T.param(T.zeros(w[lv]))
        for b in range(cfg.blocks_per_level):
            p.update(_init_res_block(rng, f"unet.up{lv}.block{b}", 2 * w[lv] if b == 0 else w[lv],
                                     w[lv], e))

    p["unet.out.gn.gamma"] = T.param(np.ones(w[0], dtype=T.zeros(1).dtype))
    p["unet.out.gn.beta"] = T.param(T.zeros(w[0]))
    p["unet.out.conv.w"] = T.param(T.zeros((cfg.in_channels, w[0], k, k)))
    p["unet.out.conv.b"] = T.param(T.zeros(cfg.in_channels))
    return p


def parameter_count(params: dict[str, Tensor]) -> int:
    return sum(t.size for t in params.values())


# ---------------------------------------------------------------------------
# the synchronized predictor


class Denoiser:
    """Noise predictor for all N views, sharing one UNet and one volume."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor],
                 ring: geo.ViewRing, sched: NoiseSchedule):
        self.cfg = cfg
        self.params = params
        self.ring = ring
        self.sched = sched
        self.stats = {"volume_builds": 0}
        self._vol_groups = math.gcd(cfg.groups, cfg.c_vol)
        # sample locations are camera constants: precompile per ring slot
        self._vertex_coords = None
        self._frustum_coords = {}
        if cfg.ablation != "none":
            pts = geo.cube_vertices(cfg.volume_size)
            s = cfg.image_size
            vgrid = (cfg.volume_size,) * 3
            self._vertex_coords = [
                T.make_sample_plan(V.view_sample_coords(pts, cam, s, s), (s, s))
                for cam in ring.target_cameras
            ]
            for slot, cam in enumerate(ring.target_cameras):
                for lv in cfg.attention_levels:
                    res = s // (2 ** lv)
                    self._frustum_coords[(slot, lv)] = T.make_sample_plan(
                        V.frustum_volume_coords(cam, res, res, cfg.depth_planes[lv],
                                                cfg.volume_size), vgrid)

    @classmethod
    def create(cls, cfg: DenoiserConfig, ring: geo.ViewRing, sched: NoiseSchedule,
               seed: int = 0) -> "Denoiser":
        params = init_params_for_ring(cfg, ring.n_views, Rng(seed).spawn(0xD0))
        return cls(cfg, params, ring, sched)

    # -- conditioning -------------------------------------------------------

    def _build_volume(self, x_all: np.ndarray, t_emb: Tensor) -> V.SpatialVolume:
        feats = [
            V.extract_view_features(Tensor(x_all[n]), t_emb, self.params, "vol.extract")
            for n in range(x_all.shape[0])
        ]
        vol = V.build_spatial_volume(feats, self.ring.target_cameras, self.cfg.volume_size,
                                     self.params, "vol.cnn", self._vol_groups,
                                     coords_list=self._vertex_coords)
        self.stats["volume_builds"] += 1
        return vol

    def _frustums_for(self, volume, slot: int, cam: geo.Camera):
        """One frustum volume per attention level, at that level's resolution."""
        if volume is None:
            return {}
        out = {}
        for lv in self.cfg.attention_levels:
            res = self.cfg.image_size // (2 ** lv)
            out[lv] = V.gather_frustum(volume, cam, res, res, self.cfg.depth_planes[lv],
                                       coords=self._frustum_coords.get((slot, lv)))
        return out

    def _cond_residual(self, h: Tensor, frustums, lv: int, side: str) -> Tensor:
        if self.cfg.ablation == "none" or lv not in self.cfg.attention_levels:
            return h
        if self.cfg.ablation == "attention":
            res = V.depth_attention(h, frustums[lv], self.params, f"attn.{side}{lv}")
        else:
            res = V.flatten_depth_variant(h, frustums[lv], self.params, f"flat.{side}{lv}")
        return T.add(h, res)

    # -- UNet ---------------------------------------------------------------

    def predict_view(self, x_n: np.ndarray, y: InputView, t: int,
                     delta: geo.ViewDelta, frustums) -> Tensor:
        """Noise prediction for a single view given its gathered frustums."""
        cfg = self.cfg
        if x_n.shape != y.image.shape:
            raise ValueError(f"view {x_n.shape} vs input view {y.image.shape}")
        emb = T.add(time_embed(t, self.sched.steps, self.params, cfg),
                    dv_embed(delta, self.params))

        h = T.conv(Tensor(np.concatenate([x_n, y.image], axis=0)),
                   self.params["unet.conv_in.w"], self.params["unet.conv_in.b"], dims=2)
        skips = []
        levels = len(cfg.widths)
        for lv in range(levels):
            if lv > 0:
                h = T.avg_pool2d(h, 2)
            for b in range(cfg.blocks_per_level):
                h = _res_block(h, emb, self.params, f"unet.down{lv}.block{b}", cfg.groups)
            h = self._cond_residual(h, frustums, lv, "down")
            skips.append(h)
        for b in range(2):
            h = _res_block(h, emb, self.params, f"unet.mid.block{b}", cfg.groups)
        for lv in reversed(range(levels)):
            if lv < levels - 1:
                h = T.upsample2d(h, 2)
                h = T.conv(h, self.params[f"unet.upsample{lv}.w"],
                           self.params[f"unet.upsample{lv}.b"], dims=2)
            h = T.concat([h, skips.pop()], axis=0)
            for b in range(cfg.blocks_per_level):
                h = _res_block(h, emb, self.params, f"unet.up{lv}.block{b}", cfg.groups)
            h = self._cond_residual(h, frustums, lv, "up")
        h = T.silu(T.group_norm(h, cfg.groups, self.params["unet.out.gn.gamma"],
                                self.params["unet.out.gn.beta"]))
        return T.conv(h, self.params["unet.out.conv.w"], self.params["unet.out.conv.b"], dims=2)

    # -- public prediction interfaces ---------------------------------------

    def predict_view_train(self, x_all: np.ndarray, t: int, y: InputView, n: int) -> Tensor:
        """Tape-attached prediction for view n, conditioned on all N views."""
        t_emb = time_embed(t, self.sched.steps, self.params, self.cfg)
        volume = None if self.cfg.ablation == "none" else self._build_volume(x_all, t_emb)
        cam = self.ring.target_cameras[n]
        frustums = self._frustums_for(volume, n, cam)
        delta = geo.viewpoint_difference(y.pose, cam.pose)
        return self.predict_view(x_all[n], y, t, delta, frustums)

    def predict_all(self, x_all: np.ndarray, t: int, y: InputView) -> np.ndarray:
        """Forward-only joint prediction; the volume is built once and shared."""
        t_emb = time_embed(t, self.sched.steps, self.params, self.cfg)
        volume = None if self.cfg.ablation == "none" else self._build_volume(x_all, t_emb)
        out = np.empty_like(x_all)
        for n, cam in enumerate(self.ring.target_cameras):
            frustums = self._frustums_for(volume, n, cam)
            delta = geo.viewpoint_difference(y.pose, cam.pose)
            out[n] = self.predict_view(x_all[n], y, t, delta, frustums).data
        return out

    def __call__(self, x: np.ndarray, t: int, y: InputView = None, ring=None) -> np.ndarray:
        """NoisePredictor interface; accepts (N, C, H, W) or batched (B, N, C, H, W)."""
        if x.ndim == 4:
            return self.predict_all(x, t, y)
        return np.stack([self.predict_all(xb, t, y) for xb in x])
