"""3D-aware conditioning path: 2D features from every noisy view, the shared
spatial feature volume over the unit cube, per-view frustum resampling, and
depth-wise attention (plus the flatten-depth ablation variant).

Parameters live in flat name->Tensor dicts under a caller-supplied prefix so
the denoiser can compose and checkpoint them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import tensor as T
from .tensor import Rng, Tensor

BEHIND_SENTINEL = -1e9  # coordinate pushing a sample far out of range -> zero


@dataclass
class SpatialVolume:
    """Feature grid over the cube's vertex lattice, shared by all views."""

    features: Tensor  # (c_vol, V, V, V)
    size: int


@dataclass
class FrustumVolume:
    """The volume resampled pixel-aligned to one view, depth fastest.

    Row p*D + k of `features` is depth plane k of pixel p (row-major pixels),
    matching the layout depth attention consumes directly.
    """

    features: Tensor  # (H*W*D, c_vol)
    height: int
    width: int
    depth_planes: int


# ---------------------------------------------------------------------------
# 2D view feature extraction


def init_extractor_params(rng: Rng, prefix: str, in_channels: int, c2d: int,
                          emb_dim: int) -> dict[str, Tensor]:
    k = 3
    return {
        f"{prefix}.conv1.w": T.param(T.he_normal(rng, (c2d, in_channels, k, k), in_channels * k * k)),
        f"{prefix}.conv1.b": T.param(T.zeros(c2d)),
        f"{prefix}.temb.w": T.param(T.he_normal(rng, (emb_dim, c2d), emb_dim)),
        f"{prefix}.temb.b": T.param(T.zeros((1, c2d))),
        f"{prefix}.conv2.w": T.param(T.he_normal(rng, (c2d, c2d, k, k), c2d * k * k)),
        f"{prefix}.conv2.b": T.param(T.zeros(c2d)),
    }


def extract_view_features(x, t_emb: Tensor, params: dict, prefix: str) -> Tensor:
    """Two shared conv layers per view, timestep added channel-wise after the first."""
    x = T.as_tensor(x)
    _, h, w = x.shape
    out = T.conv(x, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], dims=2)
    e = T.add(T.matmul(T.silu(t_emb), params[f"{prefix}.temb.w"]), params[f"{prefix}.temb.b"])
    c2d = e.shape[1]
    bias = T.reshape(T.repeat(T.reshape(e, (c2d, 1)), h * w, axis=1), (c2d, h, w))
    out = T.silu(T.add(out, bias))
    return T.conv(out, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], dims=2)


# ---------------------------------------------------------------------------
# spatial volume


def view_sample_coords(points: np.ndarray, camera: geo.Camera, fh: int, fw: int) -> np.ndarray:
    """Fractional feature-grid coords of world points seen by one camera.

    Pixel (i, j) centers sit at (u, v) = (j+0.5, i+0.5) at feature scale;
    behind-camera points get a sentinel far outside the grid so they sample
    zero. Pure camera geometry: cacheable across denoising steps.
    """
    uv, _, behind = camera.project(points)
    su, sv = fw / camera.intrinsics.width, fh / camera.intrinsics.height
    coords = np.stack([uv[:, 1] * sv - 0.5, uv[:, 0] * su - 0.5], axis=1)
    coords[behind] = BEHIND_SENTINEL
    return coords


def gather_multiview_features(points: np.ndarray, view_feats: list[Tensor],
                              cameras: list[geo.Camera], coords_list=None) -> Tensor:
    """Project world points into every view and concatenate bilinear samples.

    Blocks follow canonical ring order (ascending ring_index) regardless of
    the order the views are handed in; points behind a camera or off its
    image sample zero. coords_list, when given, must align with the input
    view indexing (precomputed view_sample_coords).
    """
    order = sorted(range(len(cameras)), key=lambda i: cameras[i].ring_index)
    blocks = []
    for i in order:
        cam, feat = cameras[i], view_feats[i]
        _, fh, fw = feat.shape
        coords = coords_list[i] if coords_list is not None else view_sample_coords(
            points, cam, fh, fw)
        blocks.append(T.grid_sample(feat, coords))
    return T.concat(blocks, axis=1)  # (M, N*c2d)


def init_volume_cnn_params(rng: Rng, prefix: str, n_views: int, c2d: int, c_vol: int,
                           groups: int) -> dict[str, Tensor]:
    k = 3
    c_in = n_views * c2d
    # first layer mixes the N concatenated view blocks channel-wise (1^3 kernel);
    # the two 3^3 layers that follow propagate spatial context
    p = {
        f"{prefix}.conv1.w": T.param(T.he_normal(rng, (c_vol, c_in, 1, 1, 1), c_in)),
        f"{prefix}.conv1.b": T.param(T.zeros(c_vol)),
        f"{prefix}.gn1.gamma": T.param(np.ones(c_vol, dtype=T.zeros(1).dtype)),
        f"{prefix}.gn1.beta": T.param(T.zeros(c_vol)),
        f"{prefix}.conv2.w": T.param(T.he_normal(rng, (c_vol, c_vol, k, k, k), c_vol * k ** 3)),
        f"{prefix}.conv2.b": T.param(T.zeros(c_vol)),
        f"{prefix}.gn2.gamma": T.param(np.ones(c_vol, dtype=T.zeros(1).dtype)),
        f"{prefix}.gn2.beta": T.param(T.zeros(c_vol)),
        f"{prefix}.conv3.w": T.param(T.he_normal(rng, (c_vol, c_vol, k, k, k), c_vol * k ** 3)),
        f"{prefix}.conv3.b": T.param(T.zeros(c_vol)),
    }
    return p


def build_spatial_volume(view_feats: list[Tensor], cameras: list[geo.Camera], size: int,
                         params: dict, prefix: str, groups: int,
                         coords_list=None) -> SpatialVolume:
    """Gather every vertex's per-view features and fuse with a 3-layer 3D CNN."""
    pts = geo.cube_vertices(size)
    gathered = gather_multiview_features(pts, view_feats, cameras, coords_list)  # (V^3, N*c2d)
    vol = T.reshape(T.transpose(gathered), (gathered.shape[1], size, size, size))
    h = T.conv(vol, params[f"{prefix}.conv1.w"], params[f"{prefix}.conv1.b"], dims=3)
    h = T.silu(T.group_norm(h, groups, params[f"{prefix}.gn1.gamma"], params[f"{prefix}.gn1.beta"]))
    h = T.conv(h, params[f"{prefix}.conv2.w"], params[f"{prefix}.conv2.b"], dims=3)
    h = T.silu(T.group_norm(h, groups, params[f"{prefix}.gn2.gamma"], params[f"{prefix}.gn2.beta"]))
    h = T.conv(h, params[f"{prefix}.conv3.w"], params[f"{prefix}.conv3.b"], dims=3)
    return SpatialVolume(h, size)


def frustum_volume_coords(camera: geo.Camera, height: int, width: int, depth_planes: int,
                          volume_size: int) -> np.ndarray:
    """Volume-grid coords of this view's frustum samples (camera constants)."""
    pts = geo.frustum_points(camera, height, width, depth_planes)
    return geo.world_to_volume_coords(pts, volume_size)


def gather_frustum(volume: SpatialVolume, camera: geo.Camera, height: int, width: int,
                   depth_planes: int, coords=None) -> FrustumVolume:
    """Trilinear resample of the shared volume along this view's pixel rays."""
    if coords is None:
        coords = frustum_volume_coords(camera, height, width, depth_planes, volume.size)
    feats = T.grid_sample(volume.features, coords)  # outside the cube -> zeros
    return FrustumVolume(feats, height, width, depth_planes)


# ---------------------------------------------------------------------------
# depth-wise attention


def sinusoidal_table(length: int, dim: int) -> np.ndarray:
    """Standard sin/cos position table of shape (length, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    angles = np.arange(length)[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if table.shape[1] < dim:
        table = np.concatenate([table, np.zeros((length, dim - table.shape[1]))], axis=1)
    return table


def init_depth_attention_params(rng: Rng, prefix: str, c_u: int, c_vol: int,
                                depth_planes: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.wq": T.param(T.he_normal(rng, (c_u, c_vol), c_u)),
        f"{prefix}.wk": T.param(T.he_normal(rng, (c_vol, c_vol), c_vol)),
        f"{prefix}.wv": T.param(T.he_normal(rng, (c_vol, c_vol), c_vol)),
        f"{prefix}.wo": T.param(T.zeros((c_vol, c_u))),  # zero residual at init
        f"{prefix}.posenc": T.param(sinusoidal_table(depth_planes, c_vol).astype(T.zeros(1).dtype)),
    }


def depth_attention(feat: Tensor, frustum: FrustumVolume, params: dict, prefix: str) -> Tensor:
    """Single-head attention of each pixel's UNet feature over its D depth samples.

    Returns the additive residual (c_u, H, W); exactly zero at initialization
    because the output projection starts at zero.
    """
    c_u, h, w = feat.shape
    if (h, w) != (frustum.height, frustum.width):
        raise ValueError(f"attention: features {h}x{w} vs frustum {frustum.height}x{frustum.width}")
    hw = h * w
    d = frustum.depth_planes
    c_vol = frustum.features.shape[1]

    q = T.matmul(T.transpose(T.reshape(feat, (c_u, hw))), params[f"{prefix}.wq"])  # (hw, c)
    pos = T.reshape(params[f"{prefix}.posenc"], (1, d * c_vol))
    pos = T.reshape(T.repeat(pos, hw, axis=0), (hw * d, c_vol))  # tile per pixel
    kv_in = T.add(frustum.features, pos)
    k = T.matmul(kv_in, params[f"{prefix}.wk"])
    v = T.matmul(kv_in, params[f"{prefix}.wv"])

    scores = T.tsum(T.mul(T.repeat(q, d, axis=0), k), axis=1)  # (hw*d,)
    scores = T.scale(T.reshape(scores, (hw, d)), 1.0 / math.sqrt(c_vol))
    weights = T.softmax(scores, axis=1)

    wcol = T.repeat(T.reshape(weights, (hw * d, 1)), c_vol, axis=1)
    mixed = T.tsum(T.reshape(T.mul(wcol, v), (hw, d, c_vol)), axis=1)  # (hw, c_vol)
    out = T.matmul(mixed, params[f"{prefix}.wo"])  # (hw, c_u)
    return T.reshape(T.transpose(out), (c_u, h, w))


# ---------------------------------------------------------------------------
# flatten-depth ablation


def init_flatten_params(rng: Rng, prefix: str, c_u: int, c_vol: int,
                        depth_planes: int) -> dict[str, Tensor]:
    del rng  # zero-initialized so the residual path starts silent, like attention
    return {f"{prefix}.w": T.param(T.zeros((c_u, depth_planes * c_vol, 3, 3)))}


def flatten_depth_variant(feat: Tensor, frustum: FrustumVolume, params: dict,
                          prefix: str) -> Tensor:
    """Treat the frustum volume as a (D*c_vol)-channel image and convolve."""
    c_u, h, w = feat.shape
    if (h, w) != (frustum.height, frustum.width):
        raise ValueError("flatten-depth: spatial size mismatch")
    d, c_vol = frustum.depth_planes, frustum.features.shape[1]
    img = T.transpose(T.reshape(frustum.features, (h, w, d * c_vol)), (2, 0, 1))
    return T.conv(img, params[f"{prefix}.w"], dims=2)
