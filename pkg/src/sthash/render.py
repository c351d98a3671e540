"""Ray generation, proposal-based sampling and quadrature volume rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import DenseGrid
from .nn import ParamBuffer, sigmoid, softplus


@dataclass
class PinholeCamera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    pose: np.ndarray  # 3x4 camera-to-world
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.far > self.near > 0):
            raise ValueError("need far > near > 0")
        R = self.pose[:, :3]
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-5:
            raise ValueError("camera rotation is not orthonormal")


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float


@dataclass
class RaySampleBatch:
    """Per-ray quadrature record produced by :func:`composite`."""

    positions: np.ndarray  # (B, n)
    deltas: np.ndarray  # (B, n)
    sigmas: np.ndarray  # (B, n)
    colors: np.ndarray | None  # (B, n, 3)
    weights: np.ndarray  # (B, n)
    t_final: np.ndarray  # (B,)


def generate_rays(camera: PinholeCamera, px: np.ndarray, py: np.ndarray):
    """Rays through pixel centers; ``px``/``py`` are pixel indices (any shape)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    dirs_cam = np.stack(
        [
            (px + 0.5 - camera.cx) / camera.fx,
            (py + 0.5 - camera.cy) / camera.fy,
            np.ones_like(px),
        ],
        axis=-1,
    )
    R = camera.pose[:, :3]
    dirs = dirs_cam @ R.T
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:, 3], dirs.shape)
    return origins, dirs


def generate_ray(camera: PinholeCamera, px: float, py: float) -> Ray:
    o, d = generate_rays(camera, np.array([px]), np.array([py]))
    return Ray(o[0], d[0], camera.near, camera.far)


def ray_aabb(origins, dirs, box_min, box_max, near: float, far: float):
    """Clip [near, far] to the axis-aligned box; misses collapse to near=far."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box_min - origins) * inv
        t1 = (box_max - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axes with zero direction: inside -> (-inf, inf), outside -> miss
    inside = (origins >= box_min) & (origins <= box_max)
    zero = dirs == 0.0
    tmin = np.where(zero, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(zero, np.where(inside, np.inf, -np.inf), tmax)
    enter = np.maximum(tmin.max(axis=-1), near)
    exit_ = np.minimum(tmax.min(axis=-1), far)
    exit_ = np.maximum(exit_, enter)
    return enter, exit_


def stratified_samples(near, far, n: int, rng: np.random.Generator | None = None, jitter=False):
    """One sample per equal sub-interval of [near, far]; midpoints when unjittered.

    ``near``/``far`` may be scalars or (B,) arrays; returns (B, n) positions.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    B = near.shape[0]
    if jitter:
        if rng is None:
            raise ValueError("jittered sampling needs an rng")
        u = rng.random((B, n))
    else:
        u = np.full((B, n), 0.5)
    frac = (np.arange(n) + u) / n
    return near[:, None] + frac * (far - near)[:, None]


def proposal_resample(
    bin_edges: np.ndarray,
    weights: np.ndarray,
    n: int,
    rng: np.random.Generator | None = None,
    jitter: bool = False,
    weight_floor: float = 1e-3,
) -> np.ndarray:
    """Inverse-CDF sampling from a piecewise-constant PDF over coarse bins.

    ``bin_edges`` is (B, nc+1), ``weights`` (B, nc) nonnegative. A small
    floor keeps every bin reachable; all-zero rows fall back to uniform.
    Returns (B, n) sorted positions.
    """
    weights = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    B, nc = weights.shape
    zero_rows = weights.sum(axis=1) <= 0.0
    w = weights + weight_floor
    w[zero_rows] = 1.0  # uniform fallback
    cdf = np.concatenate([np.zeros((B, 1)), np.cumsum(w, axis=1)], axis=1)
    cdf /= cdf[:, -1:]
    if jitter:
        if rng is None:
            raise ValueError("jittered resampling needs an rng")
        u = (np.arange(n) + rng.random((B, n))) / n
    else:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (B, n)).copy()
    # per-row searchsorted
    idx = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        idx[b] = np.searchsorted(cdf[b], u[b], side="right") - 1
    idx = np.clip(idx, 0, nc - 1)
    lo = np.take_along_axis(cdf, idx, axis=1)
    hi = np.take_along_axis(cdf, idx + 1, axis=1)
    frac = (u - lo) / np.maximum(hi - lo, 1e-12)
    e_lo = np.take_along_axis(bin_edges, idx, axis=1)
    e_hi = np.take_along_axis(bin_edges, idx + 1, axis=1)
    return e_lo + frac * (e_hi - e_lo)


def composite(sigmas: np.ndarray, colors: np.ndarray | None, deltas: np.ndarray):
    """Discrete quadrature of the rendering integral.

    alpha_i = 1 - exp(-sigma_i delta_i); T_i = prod_{j<i} (1 - alpha_j);
    w_i = T_i alpha_i. Returns (rendered (B,3) or None, weights (B,n),
    residual transmittance (B,)).
    """
    a = sigmas * deltas
    s_excl = np.cumsum(a, axis=1) - a
    trans = np.exp(-s_excl)
    alpha = -np.expm1(-a)
    weights = trans * alpha
    t_final = np.exp(-(s_excl[:, -1] + a[:, -1])) if a.shape[1] else np.ones(a.shape[0])
    rendered = None
    if colors is not None:
        rendered = (weights[:, :, None] * colors).sum(axis=1)
    return rendered, weights, t_final


def composite_backward(
    sigmas: np.ndarray,
    deltas: np.ndarray,
    weights: np.ndarray,
    d_weights: np.ndarray,
    d_t_final: np.ndarray | None = None,
    t_final: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient of the compositing weights w.r.t. the densities.

    Uses dw_k/da_i = -w_k for i < k and dw_i/da_i = T_{i+1}, with
    a_i = sigma_i delta_i.
    """
    a = sigmas * deltas
    s_excl = np.cumsum(a, axis=1) - a
    trans = np.exp(-s_excl)
    t_next = trans - weights  # T_{i+1} = T_i - w_i
    gw = d_weights * weights
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw  # sum over k > i
    d_a = d_weights * t_next - suffix
    if d_t_final is not None:
        d_a -= (d_t_final * t_final)[:, None]
    return d_a * deltas


def render_uncertainty(static_sigmas, uncertainties, deltas):
    """Ray-level uncertainty: composite the per-sample u with static weights."""
    _, w, t_final = composite(static_sigmas, None, deltas)
    return (w * uncertainties).sum(axis=1), w, t_final


def render_dynamic_weight(sigmas, mask_values, deltas):
    """Ray-aggregated dynamic weight M(r) = sum_i w_i (1 - m_i)."""
    _, w, _ = composite(sigmas, None, deltas)
    return (w * (1.0 - mask_values)).sum(axis=1)


def visible_dynamic_weight(sigmas, mask_values, deltas):
    """Per-ray max of transmittance-gated (1 - m): flags rays that pass any
    visible dynamic region, even one that is empty at the queried time.

    The density-weighted aggregate above misses space a moving object only
    visits at other times; gating by transmittance alone keeps everything in
    front of the first opaque surface eligible.
    """
    a = sigmas * deltas
    trans = np.exp(-(np.cumsum(a, axis=1) - a))
    return (trans * (1.0 - mask_values)).max(axis=1)


class ProposalField:
    """Coarse density-only field: dense spatial grid with a few time channels.

    Raw values are soft-plus activated; time conditioning interpolates
    linearly between channel slices.
    """

    def __init__(self, resolution: int = 64, time_channels: int = 4, dtype=np.float32):
        self.resolution = resolution
        self.time_channels = time_channels
        self.grid = DenseGrid(resolution, time_channels, dtype=dtype, init=0.0)

    @property
    def storage(self) -> ParamBuffer:
        return self.grid.storage

    def density(self, points: np.ndarray, t: np.ndarray):
        points = np.atleast_2d(points)
        t = np.broadcast_to(np.asarray(t, dtype=points.dtype).reshape(-1), (points.shape[0],))
        raw_all, grid_cache = self.grid.interp(points)  # (B, C)
        C = self.time_channels
        if C == 1:
            raw = raw_all[:, 0]
            cache = (grid_cache, None, None, raw)
            return softplus(raw), cache
        ts = np.clip(t, 0.0, 1.0) * (C - 1)
        lo = np.clip(np.floor(ts), 0, C - 2).astype(np.int64)
        frac = ts - lo
        raw = (1.0 - frac) * raw_all[np.arange(points.shape[0]), lo] + frac * raw_all[
            np.arange(points.shape[0]), lo + 1
        ]
        cache = (grid_cache, lo, frac, raw)
        return softplus(raw), cache

    def density_backward(self, cache, d_sigma: np.ndarray) -> None:
        grid_cache, lo, frac, raw = cache
        d_raw = d_sigma * sigmoid(raw)
        C = self.time_channels
        d_all = np.zeros((d_raw.shape[0], C), dtype=d_raw.dtype)
        if lo is None:
            d_all[:, 0] = d_raw
        else:
            rows = np.arange(d_raw.shape[0])
            np.add.at(d_all, (rows, lo), (1.0 - frac) * d_raw)
            np.add.at(d_all, (rows, lo + 1), frac * d_raw)
        self.grid.interp_backward(grid_cache, d_all)


def sample_along_rays(
    origins,
    dirs,
    near,
    far,
    n_samples: int,
    proposal: ProposalField | None = None,
    t=0.0,
    n_coarse: int = 32,
    rng: np.random.Generator | None = None,
    jitter: bool = False,
    bounds=None,
):
    """Quadrature positions for a ray batch, optionally proposal-guided.

    Returns (positions (B, n), deltas (B, n), aux) where aux carries the
    coarse pass (edges, proposal weights and cache) for proposal training.
    """
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    B = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64).reshape(-1), (B,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64).reshape(-1), (B,))
    aux = {}
    if proposal is None:
        pos = stratified_samples(near, far, n_samples, rng=rng, jitter=jitter)
    else:
        edges = near[:, None] + (far - near)[:, None] * (np.arange(n_coarse + 1) / n_coarse)
        mids = 0.5 * (edges[:, :-1] + edges[:, 1:])
        widths = edges[:, 1:] - edges[:, :-1]
        pts = origins[:, None, :] + mids[:, :, None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        if bounds is not None:
            flat = (flat - bounds[0]) / (bounds[1] - bounds[0])
        t_flat = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (B, n_coarse))
        sig, pcache = proposal.density(flat, t_flat.reshape(-1))
        sig = sig.reshape(B, n_coarse)
        _, pw, _ = composite(sig, None, widths)
        pos = proposal_resample(edges, pw, n_samples, rng=rng, jitter=jitter)
        aux = {
            "edges": edges,
            "widths": widths,
            "prop_sigma": sig,
            "prop_weights": pw,
            "prop_cache": pcache,
        }
    pos = np.sort(pos, axis=1)
    deltas = np.diff(pos, axis=1, append=far[:, None])
    deltas = np.maximum(deltas, 0.0)
    return pos, deltas, aux


def _field_eval(field, pts_world, dirs, t_per_ray, bounds, n):
    B = pts_world.shape[0] // n
    x = (pts_world - bounds[0]) / (bounds[1] - bounds[0])
    x = np.clip(x, 0.0, 1.0)
    t = np.repeat(np.broadcast_to(np.asarray(t_per_ray).reshape(-1), (B,)), n)
    d_rep = np.repeat(dirs, n, axis=0)
    sigma, color, cache = field.query_dynamic(x, d_rep, t)
    return sigma.reshape(B, n), color.reshape(B, n, 3), x, cache


def render_rays(
    field,
    origins,
    dirs,
    t,
    bounds,
    n_samples: int = 128,
    proposal: ProposalField | None = None,
    n_coarse: int = 32,
    near: float = 0.05,
    far: float = 10.0,
):
    """Deterministic rendering of a ray batch at time ``t`` (normalized)."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    enter, exit_ = ray_aabb(origins, dirs, bounds[0], bounds[1], near, far)
    pos, deltas, _ = sample_along_rays(
        origins, dirs, enter, exit_, n_samples, proposal=proposal, t=t,
        n_coarse=n_coarse, bounds=bounds,
    )
    pts = origins[:, None, :] + pos[:, :, None] * dirs[:, None, :]
    B = origins.shape[0]
    sigma, color, x, _ = _field_eval(field, pts.reshape(-1, 3), dirs, t, bounds, n_samples)
    hit = (exit_ > enter)[:, None]
    sigma = sigma * hit
    rendered, w, t_final = composite(sigma, color, deltas)
    depth = (w * pos).sum(axis=1)
    m, _ = field.mask.value(x)
    dyn = visible_dynamic_weight(sigma, m.reshape(B, n_samples), deltas)
    return {
        "color": rendered,
        "weights": w,
        "t_final": t_final,
        "depth": depth,
        "dynamic_weight": dyn,
        "positions": pos,
        "deltas": deltas,
    }


def supersample_camera(camera: PinholeCamera, factor: int) -> PinholeCamera:
    """Same view rendered on a ``factor``-times denser pixel grid."""
    return PinholeCamera(
        width=camera.width * factor, height=camera.height * factor,
        fx=camera.fx * factor, fy=camera.fy * factor,
        cx=camera.cx * factor, cy=camera.cy * factor,
        pose=camera.pose.copy(), near=camera.near, far=camera.far,
    )


def render_frame(
    field,
    camera: PinholeCamera,
    t,
    bounds,
    n_samples: int = 128,
    proposal: ProposalField | None = None,
    n_coarse: int = 32,
    chunk: int = 4096,
    pixel_mask: np.ndarray | None = None,
    supersample: int = 1,
):
    """Render a full frame (or the pixels selected by ``pixel_mask``).

    ``supersample`` > 1 shoots that many rays per pixel axis and box-filters
    back down, anti-aliasing object edges. Returns image (H, W, 3), depth
    (H, W) and the dynamic-weight map M(r).
    """
    if supersample > 1:
        s = supersample
        up_mask = None if pixel_mask is None else np.repeat(np.repeat(pixel_mask, s, 0), s, 1)
        img, depth, dyn = render_frame(
            field, supersample_camera(camera, s), t, bounds,
            n_samples=n_samples, proposal=proposal, n_coarse=n_coarse,
            chunk=chunk, pixel_mask=up_mask,
        )
        H, W = camera.height, camera.width
        box = lambda a: a.reshape(H, s, W, s, *a.shape[2:]).mean(axis=(1, 3))
        return box(img), box(depth), box(dyn)
    H, W = camera.height, camera.width
    yy, xx = np.mgrid[0:H, 0:W]
    sel = np.ones(H * W, dtype=bool) if pixel_mask is None else pixel_mask.ravel()
    px, py = xx.ravel()[sel], yy.ravel()[sel]
    origins, dirs = generate_rays(camera, px, py)
    img = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    dyn = np.zeros(H * W)
    idx = np.where(sel)[0]
    for s in range(0, idx.size, chunk):
        piece = slice(s, s + chunk)
        out = render_rays(
            field, origins[piece], dirs[piece], t, bounds,
            n_samples=n_samples, proposal=proposal, n_coarse=n_coarse,
            near=camera.near, far=camera.far,
        )
        img[idx[piece]] = out["color"]
        depth[idx[piece]] = out["depth"]
        dyn[idx[piece]] = out["dynamic_weight"]
    return img.reshape(H, W, 3), depth.reshape(H, W), dyn.reshape(H, W)


def render_video_incremental(
    field,
    camera: PinholeCamera,
    times,
    bounds,
    epsilon: float,
    n_samples: int = 128,
    proposal: ProposalField | None = None,
    n_coarse: int = 32,
):
    """Render frame 0 fully, then only the pixels classified dynamic.

    A pixel is dynamic iff its aggregated dynamic weight M(r) from frame 0
    exceeds eps_ray = 1 - epsilon. Reports the pixel-reuse speedup ratio.
    """
    if not (0.0 < epsilon < 1.0):
        raise ValueError(f"epsilon must be in (0, 1), got {epsilon}")
    eps_ray = 1.0 - epsilon
    times = list(times)
    img0, _, dyn0 = render_frame(
        field, camera, times[0], bounds, n_samples=n_samples,
        proposal=proposal, n_coarse=n_coarse,
    )
    dynamic_px = dyn0 > eps_ray
    frames = [img0]
    n_dyn = int(dynamic_px.sum())
    for t in times[1:]:
        frame = img0.copy()
        if n_dyn:
            img_t, _, _ = render_frame(
                field, camera, t, bounds, n_samples=n_samples,
                proposal=proposal, n_coarse=n_coarse, pixel_mask=dynamic_px,
            )
            frame[dynamic_px] = img_t[dynamic_px]
        frames.append(frame)
    total = len(times) * camera.height * camera.width
    rendered = camera.height * camera.width + (len(times) - 1) * n_dyn
    stats = {
        "dynamic_pixels": n_dyn,
        "dynamic_fraction": n_dyn / (camera.height * camera.width),
        "speedup": total / rendered,
    }
    return np.stack(frames), dynamic_px, stats
