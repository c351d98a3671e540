"""Precomputed importance distribution over space-time training rays.

Spatial probabilities come from the softmax of each pixel's temporal
standard deviation; temporal conditionals from the residual of each frame's
color to the pixel's temporal median. Both stages sample through alias
tables, so draws are O(1) per sample and deterministic given the seed.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMPORTANCE_MAGIC = b"MSTP"
IMPORTANCE_VERSION = 1


def build_alias(probs: np.ndarray):
    """Vose alias table for a 1D probability vector."""
    p = np.asarray(probs, dtype=np.float64)
    n = p.size
    scaled = p * n / p.sum()
    prob = np.zeros(n)
    alias = np.zeros(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    scaled = scaled.copy()
    while small and large:
        s = small.pop()
        l = large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = scaled[l] + scaled[s] - 1.0
        (small if scaled[l] < 1.0 else large).append(l)
    for rest in (large, small):
        for i in rest:
            prob[i] = 1.0
            alias[i] = i
    return prob, alias


def alias_sample(prob: np.ndarray, alias: np.ndarray, n: int, rng: np.random.Generator):
    k = rng.integers(0, prob.shape[-1], size=n)
    accept = rng.random(n) < prob[k]
    return np.where(accept, k, alias[k])


@dataclass
class RayImportanceTable:
    """Two-stage sampling table over (training ray, time step) pairs."""

    ray_std: np.ndarray  # (n_rays,)
    p_ray: np.ndarray  # (n_rays,)
    p_t_given_ray: np.ndarray  # (n_rays, T) renormalized from uint16 storage
    p_t_quant: np.ndarray  # (n_rays, T) uint16
    ray_prob_alias: tuple  # alias table for P(r)
    t_prob: np.ndarray  # (n_rays, T) alias probs
    t_alias: np.ndarray  # (n_rays, T) alias indices
    ray_index: np.ndarray  # (n_rays, 3) (camera, py, px) in dataset pixel coords
    tau1: float
    tau2: float
    downsample: int
    n_times: int

    def sample_batch(self, n: int, rng: np.random.Generator):
        """n (ray_id, t) pairs: alias-sample a ray, then a time step."""
        prob, alias = self.ray_prob_alias
        rays = alias_sample(prob, alias, n, rng)
        j = rng.integers(0, self.n_times, size=n)
        accept = rng.random(n) < self.t_prob[rays, j]
        ts = np.where(accept, j, self.t_alias[rays, j])
        return rays, ts

    def sample_batch_inverse_cdf(self, n: int, rng: np.random.Generator):
        """Reference sampler used to cross-check the alias tables."""
        cdf_r = np.cumsum(self.p_ray)
        rays = np.searchsorted(cdf_r, rng.random(n), side="right")
        rays = np.clip(rays, 0, self.p_ray.size - 1)
        cdf_t = np.cumsum(self.p_t_given_ray[rays], axis=1)
        u = rng.random(n)
        ts = (u[:, None] > cdf_t).sum(axis=1)
        ts = np.clip(ts, 0, self.n_times - 1)
        return rays, ts

    def mixed_batch(self, n: int, rng: np.random.Generator, p_uniform: float = 0.2):
        """Blend importance draws with uniform draws for coverage."""
        use_uniform = rng.random(n) < p_uniform
        rays_i, ts_i = self.sample_batch(n, rng)
        rays_u = rng.integers(0, self.p_ray.size, size=n)
        ts_u = rng.integers(0, self.n_times, size=n)
        return np.where(use_uniform, rays_u, rays_i), np.where(use_uniform, ts_u, ts_i)


def _luma(images: np.ndarray) -> np.ndarray:
    return images @ np.array([0.299, 0.587, 0.114])


def build_importance(dataset, tau1: float = 0.1, tau2: float = 0.05, downsample: int = 1):
    """Build the two-stage table from a dataset's training videos."""
    cams = dataset.split["train"]
    T = dataset.n_times
    grays, index = [], []
    for cam_id in cams:
        frames = dataset.images[cam_id]  # (T, H, W, 3)
        g = _luma(frames)[:, ::downsample, ::downsample]  # (T, h, w)
        h, w = g.shape[1:]
        yy, xx = np.mgrid[0:h, 0:w]
        grays.append(g.reshape(T, -1))
        index.append(
            np.stack(
                [np.full(h * w, cam_id), (yy * downsample).ravel(), (xx * downsample).ravel()],
                axis=1,
            )
        )
    gray = np.concatenate(grays, axis=1).T  # (n_rays, T)
    ray_index = np.concatenate(index, axis=0)
    if T < 2:
        warnings.warn("single-frame dataset: temporal std undefined, using uniform P(r)")
        std = np.zeros(gray.shape[0])
    else:
        std = gray.std(axis=1)
    logits = std / tau1
    logits -= logits.max()
    p_ray = np.exp(logits)
    p_ray /= p_ray.sum()
    med = np.median(gray, axis=1, keepdims=True)
    tl = np.abs(gray - med) / tau2
    tl -= tl.max(axis=1, keepdims=True)
    pt = np.exp(tl)
    pt /= pt.sum(axis=1, keepdims=True)
    # 16-bit fixed point storage, renormalized after quantization
    quant = np.round(pt * 65535.0).astype(np.uint16)
    quant = np.maximum(quant, 1)  # keep every frame reachable
    pt = quant.astype(np.float64)
    pt /= pt.sum(axis=1, keepdims=True)
    ray_prob_alias = build_alias(p_ray)
    t_prob = np.empty_like(pt)
    t_alias = np.empty(pt.shape, dtype=np.int64)
    for r in range(pt.shape[0]):
        t_prob[r], t_alias[r] = build_alias(pt[r])
    return RayImportanceTable(
        ray_std=std,
        p_ray=p_ray,
        p_t_given_ray=pt,
        p_t_quant=quant,
        ray_prob_alias=ray_prob_alias,
        t_prob=t_prob,
        t_alias=t_alias,
        ray_index=ray_index,
        tau1=tau1,
        tau2=tau2,
        downsample=downsample,
        n_times=T,
    )


def save_importance(table: RayImportanceTable, path) -> None:
    path = Path(path)
    meta = {
        "tau1": table.tau1,
        "tau2": table.tau2,
        "downsample": table.downsample,
        "n_times": table.n_times,
        "n_rays": int(table.p_ray.size),
    }
    with open(path, "wb") as f:
        f.write(IMPORTANCE_MAGIC)
        f.write(struct.pack("<I", IMPORTANCE_VERSION))
        blob = json.dumps(meta).encode()
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for arr in (table.ray_std, table.p_ray, table.p_t_quant, table.ray_index):
            np.lib.format.write_array(f, np.ascontiguousarray(arr))


def load_importance(path) -> RayImportanceTable:
    path = Path(path)
    with open(path, "rb") as f:
        if f.read(4) != IMPORTANCE_MAGIC:
            raise ValueError(f"{path} is not an importance table")
        (version,) = struct.unpack("<I", f.read(4))
        if version != IMPORTANCE_VERSION:
            raise ValueError(f"unsupported importance table version {version}")
        (n,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(n))
        std = np.lib.format.read_array(f)
        p_ray = np.lib.format.read_array(f)
        quant = np.lib.format.read_array(f)
        ray_index = np.lib.format.read_array(f)
    pt = quant.astype(np.float64)
    pt /= pt.sum(axis=1, keepdims=True)
    t_prob = np.empty_like(pt)
    t_alias = np.empty(pt.shape, dtype=np.int64)
    for r in range(pt.shape[0]):
        t_prob[r], t_alias[r] = build_alias(pt[r])
    return RayImportanceTable(
        ray_std=std,
        p_ray=p_ray,
        p_t_given_ray=pt,
        p_t_quant=quant,
        ray_prob_alias=build_alias(p_ray),
        t_prob=t_prob,
        t_alias=t_alias,
        ray_index=ray_index,
        tau1=meta["tau1"],
        tau2=meta["tau2"],
        downsample=meta["downsample"],
        n_times=meta["n_times"],
    )
