"""The masked space-time field.

Blends a 3D and a 4D hash encoding through a learnable sigmoid mask,
decodes density and color through shared MLPs for both the dynamic branch
(space-time input) and the time-agnostic static branch (3D input only),
and evaluates a dense soft-plus uncertainty grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .hashgrid import HashGridConfig, HashTable, encode, encode_backward
from .nn import MlpSpec, ParamBuffer, mlp_backward, mlp_forward, sigmoid, softplus


class DenseGrid:
    """Dense voxel grid with trilinear interpolation of raw values.

    Resolution R means R lattice points per axis over [0, 1]^3 (same
    convention as the hash levels). Optionally ``channels`` values per voxel.
    """

    def __init__(self, resolution: int, channels: int = 1, dtype=np.float32, init: float = 0.0):
        self.resolution = resolution
        self.channels = channels
        n = resolution**3 * channels
        self.values_shape = (resolution, resolution, resolution, channels)
        buf = np.full(n, init, dtype=dtype)
        self.storage = ParamBuffer.from_values(buf)

    def grid_view(self, flat: np.ndarray) -> np.ndarray:
        return flat.reshape(self.values_shape)

    def interp(self, points: np.ndarray):
        """Trilinear interpolation; returns (B, channels) raw values + cache."""
        points = np.clip(np.atleast_2d(points), 0.0, 1.0)
        R = self.resolution
        if R == 1:
            vals = np.broadcast_to(
                self.grid_view(self.storage.values)[0, 0, 0], (points.shape[0], self.channels)
            ).copy()
            cache = (points, None, None)
            return vals, cache
        xs = points * (R - 1)
        base = np.clip(np.floor(xs), 0, R - 2).astype(np.int64)
        frac = (xs - base).astype(points.dtype)
        offs = ((np.arange(8)[:, None] >> np.arange(3)[None, :]) & 1).astype(np.int64)
        corners = base[:, None, :] + offs[None, :, :]  # (B, 8, 3)
        w = np.where(offs[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]).prod(axis=2)
        flat_idx = (
            corners[..., 0] * (R * R) + corners[..., 1] * R + corners[..., 2]
        )  # (B, 8)
        grid = self.storage.values.reshape(R**3, self.channels)
        vals = (w[:, :, None] * grid[flat_idx]).sum(axis=1)
        return vals, (points, flat_idx, w)

    def interp_backward(self, cache, d_vals: np.ndarray) -> None:
        points, flat_idx, w = cache
        d_vals = np.atleast_2d(d_vals)
        if d_vals.ndim == 2 and d_vals.shape[1] != self.channels:
            d_vals = d_vals.reshape(-1, self.channels)
        R = self.resolution
        gview = self.storage.grads.reshape(R**3 if R > 1 else 1, self.channels)
        if flat_idx is None:
            gview[0] += d_vals.sum(axis=0)
            return
        for c in range(self.channels):
            contrib = (w * d_vals[:, c][:, None]).ravel()
            gview[:, c] += np.bincount(
                flat_idx.ravel(), weights=contrib, minlength=R**3
            ).astype(gview.dtype)


class MaskGrid:
    """Learnable blend mask m(x) = sigmoid of a trilinearly interpolated grid."""

    def __init__(self, resolution: int = 128, dtype=np.float32):
        self.grid = DenseGrid(resolution, 1, dtype=dtype, init=0.0)

    @property
    def storage(self) -> ParamBuffer:
        return self.grid.storage

    def value(self, points: np.ndarray):
        raw, cache = self.grid.interp(points)
        m = sigmoid(raw[:, 0])
        return m, (cache, m)

    def backward(self, cache, d_m: np.ndarray) -> None:
        grid_cache, m = cache
        d_raw = d_m * m * (1.0 - m)
        self.grid.interp_backward(grid_cache, d_raw[:, None])


class UncertaintyGrid:
    """Per-point aleatoric uncertainty u(x) = u_min_shift + softplus(raw)."""

    def __init__(self, resolution: int = 64, shift: float = 0.03, dtype=np.float32):
        self.grid = DenseGrid(resolution, 1, dtype=dtype, init=0.0)
        self.shift = shift

    @property
    def storage(self) -> ParamBuffer:
        return self.grid.storage

    def value(self, points: np.ndarray):
        raw, cache = self.grid.interp(points)
        u = self.shift + softplus(raw[:, 0])
        return u, (cache, raw[:, 0])

    def backward(self, cache, d_u: np.ndarray) -> None:
        grid_cache, raw = cache
        d_raw = d_u * sigmoid(raw)
        self.grid.interp_backward(grid_cache, d_raw[:, None])


# Real spherical harmonics basis up to degree 4 (bands l = 0..3), the usual
# fixed direction encoding for hash-grid fields.
def sh_encode(dirs: np.ndarray, degree: int = 4) -> np.ndarray:
    d = np.atleast_2d(dirs)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    comps = [np.full_like(x, 0.28209479177387814)]
    if degree > 1:
        comps += [-0.48860251190291987 * y, 0.48860251190291987 * z, -0.48860251190291987 * x]
    if degree > 2:
        xy, yz, xz = x * y, y * z, x * z
        x2, y2, z2 = x * x, y * y, z * z
        comps += [
            1.0925484305920792 * xy,
            -1.0925484305920792 * yz,
            0.94617469575755997 * z2 - 0.31539156525252005,
            -1.0925484305920792 * xz,
            0.54627421529603959 * (x2 - y2),
        ]
    if degree > 3:
        comps += [
            0.59004358992664352 * y * (-3.0 * x2 + y2),
            2.8906114426405538 * xy * z,
            0.45704579946446572 * y * (1.0 - 5.0 * z2),
            0.3731763325901154 * z * (5.0 * z2 - 3.0),
            0.45704579946446572 * x * (1.0 - 5.0 * z2),
            1.4453057213202769 * z * (x2 - y2),
            0.59004358992664352 * x * (-x2 + 3.0 * y2),
        ]
    return np.stack(comps, axis=1).astype(d.dtype)


def sh_dim(degree: int) -> int:
    return degree * degree


@dataclass
class FieldConfig:
    levels: int = 8
    features_per_level: int = 2
    log2_table_size_3d: int = 19
    log2_table_size_4d: int = 19
    base_resolution: int = 16
    max_resolution: int = 512
    time_base_resolution: int = 2
    time_max_resolution: int = 32
    mask_resolution: int = 128
    uncertainty_resolution: int = 64
    uncertainty_shift: float = 0.03
    geo_features: int = 15
    hidden_dim: int = 64
    density_hidden_layers: int = 1
    color_hidden_layers: int = 2
    sh_degree: int = 4
    density_clamp: float = 15.0
    blend_mode: str = "masked"  # masked | additive | pure4d


class SpaceTimeField:
    """Dual hash tables + mask + uncertainty + shared decoding MLPs."""

    def __init__(self, cfg: FieldConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        enc_dim = cfg.levels * cfg.features_per_level
        self.table3d = HashTable(
            HashGridConfig(
                dims=3,
                levels=cfg.levels,
                features_per_level=cfg.features_per_level,
                log2_table_size=cfg.log2_table_size_3d,
                base_resolution=cfg.base_resolution,
                max_resolution=cfg.max_resolution,
            ),
            rng,
            dtype=dtype,
        )
        self.table4d = HashTable(
            HashGridConfig(
                dims=4,
                levels=cfg.levels,
                features_per_level=cfg.features_per_level,
                log2_table_size=cfg.log2_table_size_4d,
                base_resolution=cfg.base_resolution,
                max_resolution=cfg.max_resolution,
                time_base_resolution=cfg.time_base_resolution,
                time_max_resolution=cfg.time_max_resolution,
            ),
            rng,
            dtype=dtype,
        )
        assert self.table3d.out_dim == self.table4d.out_dim == enc_dim
        self.mask = MaskGrid(cfg.mask_resolution, dtype=dtype)
        self.uncertainty = UncertaintyGrid(
            cfg.uncertainty_resolution, cfg.uncertainty_shift, dtype=dtype
        )
        self.density_spec = MlpSpec(
            input_dim=enc_dim,
            hidden_dim=cfg.hidden_dim,
            hidden_layers=cfg.density_hidden_layers,
            output_dim=1 + cfg.geo_features,
        )
        self.color_spec = MlpSpec(
            input_dim=cfg.geo_features + sh_dim(cfg.sh_degree),
            hidden_dim=cfg.hidden_dim,
            hidden_layers=cfg.color_hidden_layers,
            output_dim=3,
            output_activation="sigmoid",
        )
        self.density_params = nn.mlp_init(self.density_spec, rng, dtype=dtype)
        self.color_params = nn.mlp_init(self.color_spec, rng, dtype=dtype)

    def param_groups(self) -> dict[str, ParamBuffer]:
        groups = {
            "table3d": self.table3d.storage,
            "table4d": self.table4d.storage,
            "mask": self.mask.storage,
            "uncertainty": self.uncertainty.storage,
            "density_mlp": self.density_params,
            "color_mlp": self.color_params,
        }
        return groups

    # -- encoding -----------------------------------------------------------

    def blended_encoding(self, x: np.ndarray, t: np.ndarray):
        """enc(x, t) = m(x) h3d(x) + (1 - m(x)) h4d(x, t), plus backward cache."""
        x = np.atleast_2d(x)
        t = np.broadcast_to(np.asarray(t, dtype=x.dtype).reshape(-1), (x.shape[0],))
        mode = self.cfg.blend_mode
        if mode == "pure4d":
            h4, c4 = encode(self.table4d, np.concatenate([x, t[:, None]], axis=1))
            return h4, {"mode": mode, "c4": c4}
        h3, c3 = encode(self.table3d, x)
        h4, c4 = encode(self.table4d, np.concatenate([x, t[:, None]], axis=1))
        if mode == "additive":
            return h3 + h4, {"mode": mode, "c3": c3, "c4": c4, "h3": h3}
        m, cm = self.mask.value(x)
        enc = m[:, None] * h3 + (1.0 - m)[:, None] * h4
        return enc, {"mode": mode, "c3": c3, "c4": c4, "cm": cm, "m": m, "h3": h3, "h4": h4}

    def blended_encoding_backward(self, cache, d_enc: np.ndarray, d_m_extra=None) -> None:
        """Route encoding gradients to both tables and the mask.

        ``d_m_extra`` lets callers add loss terms that hit m(x) directly
        (sparsity, mutual information) in the same mask-grid scatter.
        """
        mode = cache["mode"]
        if mode == "pure4d":
            encode_backward(self.table4d, cache["c4"], d_enc)
            return
        if mode == "additive":
            encode_backward(self.table3d, cache["c3"], d_enc)
            encode_backward(self.table4d, cache["c4"], d_enc)
            return
        m = cache["m"]
        encode_backward(self.table3d, cache["c3"], m[:, None] * d_enc)
        encode_backward(self.table4d, cache["c4"], (1.0 - m)[:, None] * d_enc)
        d_m = ((cache["h3"] - cache["h4"]) * d_enc).sum(axis=1)
        if d_m_extra is not None:
            d_m = d_m + d_m_extra
        self.mask.backward(cache["cm"], d_m)

    # -- decoding -----------------------------------------------------------

    def decode(self, enc: np.ndarray, dirs: np.ndarray):
        """Density (exp-activated, clamped) and sigmoid color for encodings."""
        sigma_pre_out, dcache = mlp_forward(self.density_spec, self.density_params, enc)
        pre = sigma_pre_out[:, 0]
        clamped = np.minimum(pre, self.cfg.density_clamp)
        sigma = np.exp(clamped)
        g = sigma_pre_out[:, 1:]
        sh = sh_encode(dirs, self.cfg.sh_degree).astype(enc.dtype, copy=False)
        sh = np.broadcast_to(sh, (enc.shape[0], sh.shape[1]))
        color_in = np.concatenate([g, sh], axis=1)
        color, ccache = mlp_forward(self.color_spec, self.color_params, color_in)
        if not (np.isfinite(sigma).all() and np.isfinite(color).all()):
            bad = np.where(~np.isfinite(sigma) | ~np.isfinite(color).all(axis=1))[0]
            raise FloatingPointError(f"non-finite field output at batch rows {bad[:8]}")
        cache = {"dcache": dcache, "ccache": ccache, "pre": pre, "sigma": sigma}
        return sigma, color, cache

    def decode_backward(self, cache, d_sigma: np.ndarray, d_color: np.ndarray) -> np.ndarray:
        """Accumulate MLP grads; return gradient w.r.t. the encoding."""
        d_color_in = mlp_backward(cache["ccache"], d_color)
        g_dim = self.cfg.geo_features
        d_out = np.empty_like(cache["dcache"].output)
        active = cache["pre"] < self.cfg.density_clamp
        d_out[:, 0] = d_sigma * cache["sigma"] * active
        d_out[:, 1:] = d_color_in[:, :g_dim]
        return mlp_backward(cache["dcache"], d_out)

    # -- queries ------------------------------------------------------------

    def query_dynamic(self, x: np.ndarray, dirs: np.ndarray, t):
        enc, enc_cache = self.blended_encoding(x, t)
        sigma, color, dec_cache = self.decode(enc, dirs)
        return sigma, color, {"enc": enc_cache, "dec": dec_cache}

    def query_dynamic_backward(self, cache, d_sigma, d_color, d_m_extra=None) -> None:
        d_enc = self.decode_backward(cache["dec"], d_sigma, d_color)
        self.blended_encoding_backward(cache["enc"], d_enc, d_m_extra=d_m_extra)

    def query_static(self, x: np.ndarray, dirs: np.ndarray, h3_cache=None):
        """Time-agnostic branch: decode h3d(x) alone through the shared MLPs."""
        if h3_cache is None:
            h3, c3 = encode(self.table3d, np.atleast_2d(x))
        else:
            h3, c3 = h3_cache
        sigma, color, dec_cache = self.decode(h3, dirs)
        return sigma, color, {"c3": c3, "dec": dec_cache}

    def query_static_backward(self, cache, d_sigma, d_color) -> None:
        d_h3 = self.decode_backward(cache["dec"], d_sigma, d_color)
        encode_backward(self.table3d, cache["c3"], d_h3)

    def uncertainty_value(self, x: np.ndarray):
        return self.uncertainty.value(np.atleast_2d(x))
