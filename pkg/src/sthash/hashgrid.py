"""Multi-resolution hash-grid encoders for 3D points and 4D space-time points.

A level with resolution R places R lattice points along each axis (integer
coordinates 0..R-1); continuous coordinates in [0, 1] are scaled by R-1 and
d-linearly interpolated from the 2^dims surrounding corners. Levels whose
dense lattice fits in the table are indexed directly (row-major, x fastest);
larger levels use the XOR hash with fixed odd multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ParamBuffer

HASH_PRIMES = np.array([1, 2654435761, 805459861, 3674653429], dtype=np.uint32)


@dataclass(frozen=True)
class HashGridConfig:
    dims: int
    levels: int
    features_per_level: int
    log2_table_size: int
    base_resolution: int
    max_resolution: int
    time_base_resolution: int | None = None
    time_max_resolution: int | None = None

    def __post_init__(self):
        if self.dims not in (3, 4):
            raise ValueError("dims must be 3 or 4")
        if self.levels < 1 or self.features_per_level < 1:
            raise ValueError("levels and features_per_level must be >= 1")
        if not (self.max_resolution >= self.base_resolution >= 1):
            raise ValueError("need max_resolution >= base_resolution >= 1")
        if self.dims == 4:
            if self.time_base_resolution is None or self.time_max_resolution is None:
                raise ValueError("4D grids need temporal resolutions")
            if not (self.time_max_resolution >= self.time_base_resolution >= 1):
                raise ValueError("need time_max >= time_base >= 1")

    @property
    def out_dim(self) -> int:
        return self.levels * self.features_per_level


def _geometric_levels(n_min: int, n_max: int, levels: int) -> np.ndarray:
    if levels == 1:
        return np.array([n_min], dtype=np.int64)
    b = np.exp((np.log(n_max) - np.log(n_min)) / (levels - 1))
    res = np.floor(n_min * b ** np.arange(levels) + 1e-9).astype(np.int64)
    return res


def level_resolutions(config: HashGridConfig) -> np.ndarray:
    """Per-level per-axis resolutions, shape (levels, dims)."""
    spatial = _geometric_levels(config.base_resolution, config.max_resolution, config.levels)
    res = np.repeat(spatial[:, None], 3, axis=1)
    if config.dims == 4:
        temporal = _geometric_levels(
            config.time_base_resolution, config.time_max_resolution, config.levels
        )
        res = np.concatenate([res, temporal[:, None]], axis=1)
    return res


class HashTable:
    """Per-level feature storage backing one multi-resolution encoder."""

    def __init__(self, config: HashGridConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.resolutions = level_resolutions(config)
        table_size = 1 << config.log2_table_size
        self.level_slots = []
        self.level_dense = []
        for res in self.resolutions:
            dense_count = int(np.prod(res))
            if dense_count <= table_size:
                self.level_slots.append(dense_count)
                self.level_dense.append(True)
            else:
                self.level_slots.append(table_size)
                self.level_dense.append(False)
        self.level_offsets = np.concatenate(
            [[0], np.cumsum(np.asarray(self.level_slots) * config.features_per_level)]
        )
        # row-major strides (x fastest) for the dense-bypass levels
        self.level_strides = np.concatenate(
            [np.ones((config.levels, 1), dtype=np.int64),
             np.cumprod(self.resolutions[:, :-1], axis=1)],
            axis=1,
        )
        self.dense_levels = np.asarray(self.level_dense)
        total = int(self.level_offsets[-1])
        init = rng.uniform(-1e-4, 1e-4, size=total).astype(dtype)
        self.storage = ParamBuffer.from_values(init)
        self.clamp_events = 0  # out-of-range query counter

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def level_view(self, level: int, flat: np.ndarray) -> np.ndarray:
        f = self.config.features_per_level
        lo, hi = self.level_offsets[level], self.level_offsets[level + 1]
        return flat[lo:hi].reshape(self.level_slots[level], f)

    def with_storage(self, storage: ParamBuffer) -> "HashTable":
        """Shallow clone sharing config but with a different buffer (shadow mode)."""
        clone = object.__new__(HashTable)
        clone.config = self.config
        clone.resolutions = self.resolutions
        clone.level_slots = self.level_slots
        clone.level_dense = self.level_dense
        clone.level_offsets = self.level_offsets
        clone.level_strides = self.level_strides
        clone.dense_levels = self.dense_levels
        clone.storage = storage
        clone.clamp_events = 0
        return clone


def hash_index(lattice_points: np.ndarray, level: int, table: HashTable) -> np.ndarray:
    """Slot index within ``level`` for integer lattice points (..., dims)."""
    pts = np.asarray(lattice_points, dtype=np.uint32)
    dims = table.config.dims
    if table.level_dense[level]:
        res = table.resolutions[level]
        stride = np.uint64(1)
        idx = np.zeros(pts.shape[:-1], dtype=np.uint64)
        for axis in range(dims):
            idx += pts[..., axis].astype(np.uint64) * stride
            stride *= np.uint64(res[axis])
        return idx.astype(np.int64)
    acc = np.zeros(pts.shape[:-1], dtype=np.uint32)
    for axis in range(dims):
        acc ^= pts[..., axis] * HASH_PRIMES[axis]
    mask = np.uint32((1 << table.config.log2_table_size) - 1)
    return (acc & mask).astype(np.int64)


def _corner_offsets(dims: int) -> np.ndarray:
    n = 1 << dims
    offs = ((np.arange(n)[:, None] >> np.arange(dims)[None, :]) & 1).astype(np.int64)
    return offs  # (2^dims, dims), axis 0 is the fastest-varying bit


@dataclass
class EncodeCache:
    """Backward-pass record: global slot index of each corner and its weight."""

    slots: np.ndarray  # (B, levels, 2^dims) slot index across all levels
    weights: np.ndarray  # (B, levels, 2^dims)
    batch: int


def encode(table: HashTable, points: np.ndarray) -> tuple[np.ndarray, EncodeCache]:
    """Interpolated multi-level features for normalized points (B, dims).

    For a 4D table the time coordinate is the last column. Out-of-range
    coordinates are clamped (counted on ``table.clamp_events``).
    """
    points = np.atleast_2d(points)
    cfg = table.config
    if points.shape[1] != cfg.dims:
        raise ValueError(f"expected {cfg.dims}-D points, got shape {points.shape}")
    oob = (points < 0.0) | (points > 1.0)
    if oob.any():
        table.clamp_events += int(oob.sum())
        points = np.clip(points, 0.0, 1.0)
    B, d, L, F = points.shape[0], cfg.dims, cfg.levels, cfg.features_per_level
    C = 1 << d
    dtype = table.storage.values.dtype
    points = points.astype(dtype, copy=False)
    offs = _corner_offsets(d)  # (C, d)
    res = table.resolutions  # (L, d)
    xs = points[:, None, :] * (res - 1).astype(dtype)  # (B, L, d)
    base = np.clip(np.floor(xs), 0, np.maximum(res - 2, 0))
    frac = xs - base
    basei = base.astype(np.int64)
    # accumulate interpolation weight, dense index and hash per axis to avoid
    # materializing a (B, L, C, dims) corner array
    w = np.ones((B, L, C), dtype=dtype)
    dense_idx = np.zeros((B, L, C), dtype=np.int64)
    acc = np.zeros((B, L, C), dtype=np.uint32)
    for axis in range(d):
        bit = (offs[:, axis] == 1).astype(np.int64)  # (C,)
        ca = np.minimum(basei[:, :, axis, None] + bit, (res[:, axis] - 1)[None, :, None])
        fa = frac[:, :, axis, None]
        w *= np.where(bit == 1, fa, 1.0 - fa)
        dense_idx += ca * table.level_strides[None, :, axis, None]
        acc ^= ca.astype(np.uint32) * HASH_PRIMES[axis]
    mask = np.uint32((1 << cfg.log2_table_size) - 1)
    idx = np.where(table.dense_levels[None, :, None], dense_idx, (acc & mask).astype(np.int64))
    slots = (table.level_offsets[:-1] // F)[None, :, None] + idx
    vals = table.storage.values.reshape(-1, F)[slots]  # (B, L, C, F)
    feats = (w[..., None] * vals).sum(axis=2)
    return feats.reshape(B, cfg.out_dim), EncodeCache(slots, w, B)


def encode_backward(table: HashTable, cache: EncodeCache, d_feature: np.ndarray) -> None:
    """Scatter-add ``d_feature`` (B, levels*F) into the table's gradients."""
    cfg = table.config
    d = np.atleast_2d(d_feature)
    if d.shape != (cache.batch, cfg.out_dim):
        raise ValueError(f"d_feature shape {d.shape} does not match cache/table")
    F = cfg.features_per_level
    d = d.reshape(cache.batch, cfg.levels, F)
    n_slots = int(table.level_offsets[-1]) // F
    g = table.storage.grads.reshape(n_slots, F)
    flat_slots = cache.slots.ravel()
    for f in range(F):
        contrib = (cache.weights * d[:, :, f][:, :, None]).ravel()
        g[:, f] += np.bincount(flat_slots, weights=contrib, minlength=n_slots).astype(
            g.dtype
        )


def collision_stats(table: HashTable, lattice_points: np.ndarray, level: int) -> dict:
    """Occupancy diagnostics for a set of integer lattice keys at one level."""
    pts = np.atleast_2d(np.asarray(lattice_points, dtype=np.int64))
    keys = np.unique(pts, axis=0)
    slot_count = table.level_slots[level]
    key_slots = hash_index(keys, level, table)
    distinct_slots = int(np.unique(key_slots).size)
    distinct_keys = keys.shape[0]
    denom = min(distinct_keys, slot_count)
    loads = np.bincount(key_slots, minlength=slot_count)
    return {
        "queries": int(pts.shape[0]),
        "distinct_keys": distinct_keys,
        "distinct_slots": distinct_slots,
        "collision_rate": 1.0 - distinct_slots / denom,
        "max_slot_load": int(loads.max()),
        "occupied_fraction": distinct_slots / slot_count,
        "dense": bool(table.level_dense[level]),
    }
