"""Hierarchical residual encoding of pseudo-point neighborhoods.

Per point, each refinement step gathers the fixed pixel-grid neighborhood,
concatenates the feature residual against the centroid with the feature
itself, reweights elementwise by an MLP of the positional residual
(x, y, z, u, v offsets), and aggregates all K+1 reweighted vectors with a
second MLP. The final representation concatenates every step's output.

All forwards keep caches so gradients are exact; backward passes accumulate
into a name-keyed grads dict.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import Mlp
from .pseudo_cloud import PseudoCloud, neighbor_table

POSITION_WIDTH = 5  # (x, y, z, u, v)
ATTR_WIDTH = 6  # (x, y, z, u, v, r)


@dataclass
class HprConfig:
    """Shape of the encoder: step count, neighbor radius, and widths."""

    steps: int = 3
    radius: int = 1
    step_widths: tuple = (16, 16, 32)
    init_width: int = 16
    init_hidden: int = 16
    theta_hidden: int = 16
    gamma_hidden: int = 32
    # fixed prescales: attr_scale on the raw (x, y, z, u, v, r) attributes,
    # pos_scale on positional residuals (depth discontinuities make raw xyz
    # offsets heavy-tailed); both linear, so residual invariances hold
    attr_scale: tuple = (0.02, 0.02, 0.02, 0.005, 0.005, 1.0)
    pos_scale: tuple = (0.2, 0.2, 0.2, 0.5, 0.5)

    def __post_init__(self):
        if self.steps < 1 or self.radius < 1 or self.init_width < 1:
            raise ValueError("steps, radius, and init_width must be >= 1")
        if len(self.step_widths) != self.steps:
            raise ValueError("need one step width per step")
        if any(w < 1 for w in self.step_widths):
            raise ValueError("step widths must be >= 1")

    @property
    def neighbors(self) -> int:
        """K: non-centroid slots in each neighborhood."""
        return (2 * self.radius + 1) ** 2 - 1

    @property
    def out_width(self) -> int:
        return int(sum(self.step_widths))

    def width_at(self, t: int) -> int:
        """Feature width entering step t (0-based)."""
        return self.init_width if t == 0 else int(self.step_widths[t - 1])


@dataclass
class HprParams:
    """All encoder networks: the initial attribute MLP plus per-step pairs."""

    init_mlp: Mlp
    theta: list  # step t: positional-residual net, 5 -> 2 * width_at(t)
    gamma: list  # step t: aggregator, (K+1) * 2 * width_at(t) -> step_widths[t]

    def named_params(self, prefix: str = "hpr"):
        yield from self.init_mlp.named_params(f"{prefix}.init")
        for t, (th, ga) in enumerate(zip(self.theta, self.gamma)):
            yield from th.named_params(f"{prefix}.theta{t}")
            yield from ga.named_params(f"{prefix}.gamma{t}")


def create_hpr_params(cfg: HprConfig, rng) -> HprParams:
    init_mlp = Mlp.create([ATTR_WIDTH, cfg.init_hidden, cfg.init_width], rng)
    theta, gamma = [], []
    k1 = cfg.neighbors + 1
    for t in range(cfg.steps):
        c_in = cfg.width_at(t)
        theta.append(Mlp.create([POSITION_WIDTH, cfg.theta_hidden, 2 * c_in], rng))
        gamma_in = k1 * 2 * c_in
        gamma.append(
            Mlp.create(
                [gamma_in, cfg.gamma_hidden, cfg.step_widths[t]], rng,
                input_scale=min(1.0, np.sqrt(256.0 / gamma_in)),
            )
        )
    return HprParams(init_mlp=init_mlp, theta=theta, gamma=gamma)


def _check_step_shapes(cfg: HprConfig, t: int, feats: np.ndarray, params: HprParams):
    c_in = cfg.width_at(t)
    if feats.shape[1] != c_in:
        raise ValueError(f"step {t}: feature width {feats.shape[1]} != {c_in}")
    if params.theta[t].out_width != 2 * c_in:
        raise ValueError(f"step {t}: theta output must be {2 * c_in}")
    k1 = cfg.neighbors + 1
    if params.gamma[t].in_width != k1 * 2 * c_in:
        raise ValueError(f"step {t}: gamma input must be {k1 * 2 * c_in}")


def hpr_step(
    t: int,
    feats: np.ndarray,
    neighborhoods: np.ndarray,
    positions: np.ndarray,
    cfg: HprConfig,
    params: HprParams,
):
    """One refinement step: (N, C_t) features -> (N, C_{t+1}); returns cache."""
    _check_step_shapes(cfg, t, feats, params)
    npts, k1 = neighborhoods.shape
    gathered = feats[neighborhoods]  # (N, K+1, C)
    resid = gathered - feats[:, None, :]
    pairs = np.concatenate([resid, gathered], axis=2)  # (N, K+1, 2C)
    pos_resid = (positions[neighborhoods] - positions[:, None, :]) * np.asarray(
        cfg.pos_scale, dtype=np.float64
    )
    weights_flat, theta_cache = params.theta[t].forward(
        pos_resid.reshape(npts * k1, POSITION_WIDTH)
    )
    weights = weights_flat.reshape(npts, k1, -1)
    reweighted = pairs * weights
    out, gamma_cache = params.gamma[t].forward(reweighted.reshape(npts, -1))
    cache = (neighborhoods, pairs, weights, theta_cache, gamma_cache, feats.shape)
    return out, cache


def hpr_step_backward(
    t: int, cache, d_out: np.ndarray, cfg: HprConfig, params: HprParams,
    grads: dict, prefix: str = "hpr",
) -> np.ndarray:
    """Backprop one step; returns the gradient w.r.t. the incoming features."""
    neighborhoods, pairs, weights, theta_cache, gamma_cache, in_shape = cache
    npts, k1 = neighborhoods.shape
    c_in = in_shape[1]
    d_rw = params.gamma[t].backward(
        gamma_cache, d_out, grads, f"{prefix}.gamma{t}"
    ).reshape(npts, k1, 2 * c_in)
    d_pairs = d_rw * weights
    d_weights = d_rw * pairs
    params.theta[t].backward(
        theta_cache, d_weights.reshape(npts * k1, 2 * c_in), grads, f"{prefix}.theta{t}"
    )
    d_resid = d_pairs[:, :, :c_in]
    d_gathered = d_resid + d_pairs[:, :, c_in:]
    d_feats = -d_resid.sum(axis=1)
    np.add.at(d_feats, neighborhoods.reshape(-1), d_gathered.reshape(-1, c_in))
    return d_feats


def point_attributes(cloud: PseudoCloud) -> np.ndarray:
    """Initial (x, y, z, u, v, r) attributes per point."""
    return np.concatenate(
        [cloud.xyz, cloud.uv.astype(np.float64), cloud.rgb[:, :1]], axis=1
    )


def point_positions(cloud: PseudoCloud) -> np.ndarray:
    """(x, y, z, u, v) positional vector per point."""
    return np.concatenate([cloud.xyz, cloud.uv.astype(np.float64)], axis=1)


def hpr_encode(cloud: PseudoCloud, cfg: HprConfig, params: HprParams):
    """Encode a (cropped) cloud: returns ((N, sum C_t) features, cache)."""
    if len(cloud) == 0:
        return np.zeros((0, cfg.out_width)), None
    attrs = point_attributes(cloud) * np.asarray(cfg.attr_scale, dtype=np.float64)
    positions = point_positions(cloud)
    neighborhoods = neighbor_table(cloud, cfg.radius)
    feats, init_cache = params.init_mlp.forward(attrs)
    step_outs, step_caches = [], []
    for t in range(cfg.steps):
        feats, cache = hpr_step(t, feats, neighborhoods, positions, cfg, params)
        step_outs.append(feats)
        step_caches.append(cache)
    encoded = np.concatenate(step_outs, axis=1)
    return encoded, (init_cache, step_caches)


def hpr_encode_backward(
    cloud_len: int, cfg: HprConfig, params: HprParams, cache, d_encoded: np.ndarray,
    grads: dict, prefix: str = "hpr",
):
    """Backprop through the full encoder into all network parameters."""
    if cache is None:
        return
    init_cache, step_caches = cache
    splits = np.cumsum(cfg.step_widths)[:-1]
    chunk_grads = np.split(np.asarray(d_encoded, dtype=np.float64), splits, axis=1)
    upstream = chunk_grads[-1]
    for t in range(cfg.steps - 1, -1, -1):
        d_in = hpr_step_backward(t, step_caches[t], upstream, cfg, params, grads, prefix)
        upstream = d_in + (chunk_grads[t - 1] if t > 0 else 0.0)
    params.init_mlp.backward(init_cache, upstream, grads, f"{prefix}.init")
