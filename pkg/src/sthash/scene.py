"""Dataset loading, procedural synthetic scenes with a brute-force rendering
oracle, and image metrics (PSNR, SSIM / D-SSIM).

The synthetic scenes are closed-form fields (x, t) -> (density, color) built
from constant-density primitives, some of which move along parametric
trajectories. They provide ground truth for rendering oracles and per-pixel
dynamic masks for mask-accuracy metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import images as img_io
from .render import PinholeCamera, composite, generate_rays, ray_aabb

MANIFEST_NAME = "scene.json"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# analytic scenes
# ---------------------------------------------------------------------------


@dataclass
class Orbit:
    """Circular trajectory in the xz-plane, one revolution per period."""

    center: np.ndarray
    radius: float
    period: float = 1.0
    phase: float = 0.0

    def position(self, t: float) -> np.ndarray:
        ang = 2.0 * np.pi * (t / self.period + self.phase)
        c = np.asarray(self.center, dtype=np.float64)
        return c + self.radius * np.array([np.cos(ang), 0.0, np.sin(ang)])


@dataclass
class LinearPath:
    start: np.ndarray
    end: np.ndarray

    def position(self, t: float) -> np.ndarray:
        s = np.asarray(self.start, dtype=np.float64)
        e = np.asarray(self.end, dtype=np.float64)
        return s + t * (e - s)


@dataclass
class SpherePrimitive:
    center: np.ndarray
    radius: float
    density: float
    color: np.ndarray
    trajectory: Orbit | LinearPath | None = None

    def center_at(self, t: float) -> np.ndarray:
        if self.trajectory is None:
            return np.asarray(self.center, dtype=np.float64)
        return self.trajectory.position(t)

    def inside(self, pts: np.ndarray, t: float) -> np.ndarray:
        d = pts - self.center_at(t)
        return (d * d).sum(axis=1) <= self.radius**2

    def ray_hits(self, origins: np.ndarray, dirs: np.ndarray, t: float) -> np.ndarray:
        c = self.center_at(t)
        oc = origins - c
        b = (oc * dirs).sum(axis=1)
        cterm = (oc * oc).sum(axis=1) - self.radius**2
        disc = b * b - cterm
        hit = disc >= 0
        s = -b - np.sqrt(np.maximum(disc, 0.0))
        s2 = -b + np.sqrt(np.maximum(disc, 0.0))
        return hit & (s2 > 0)

    @property
    def is_dynamic(self) -> bool:
        return self.trajectory is not None


@dataclass
class BoxPrimitive:
    lo: np.ndarray
    hi: np.ndarray
    density: float
    color: np.ndarray
    trajectory: LinearPath | None = None  # offset path applied to both corners

    def _corners_at(self, t: float):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if self.trajectory is not None:
            off = self.trajectory.position(t)
            lo, hi = lo + off, hi + off
        return lo, hi

    def inside(self, pts: np.ndarray, t: float) -> np.ndarray:
        lo, hi = self._corners_at(t)
        return ((pts >= lo) & (pts <= hi)).all(axis=1)

    def ray_hits(self, origins: np.ndarray, dirs: np.ndarray, t: float) -> np.ndarray:
        lo, hi = self._corners_at(t)
        enter, exit_ = ray_aabb(origins, dirs, lo, hi, 1e-6, np.inf)
        return exit_ > enter

    @property
    def is_dynamic(self) -> bool:
        return self.trajectory is not None


@dataclass
class AnalyticScene:
    """Closed-form (x, t) -> (density, color) field over constant primitives."""

    primitives: list
    bounds: np.ndarray  # (2, 3)

    def field(self, pts: np.ndarray, t: float):
        pts = np.atleast_2d(pts)
        sigma = np.zeros(pts.shape[0])
        weighted = np.zeros((pts.shape[0], 3))
        for prim in self.primitives:
            mask = prim.inside(pts, t)
            sigma += mask * prim.density
            weighted += mask[:, None] * prim.density * np.asarray(prim.color)
        color = np.where(sigma[:, None] > 0, weighted / np.maximum(sigma, 1e-12)[:, None], 0.0)
        return sigma, np.clip(color, 0.0, 1.0)

    @property
    def moving(self) -> list:
        return [p for p in self.primitives if p.is_dynamic]

    def dynamic_fraction(self, times, rng: np.random.Generator, n: int = 20000) -> float:
        """Monte-Carlo volume fraction swept by moving primitives."""
        pts = self.bounds[0] + rng.random((n, 3)) * (self.bounds[1] - self.bounds[0])
        hit = np.zeros(n, dtype=bool)
        for t in times:
            for prim in self.moving:
                hit |= prim.inside(pts, t)
        return float(hit.mean())


class AnalyticFieldAdapter:
    """Wraps an AnalyticScene so the quadrature renderer can consume it.

    The renderer passes normalized coordinates; the adapter maps them back
    to world space. The mask is identically 1 (nothing dynamic from the
    renderer's point of view).
    """

    def __init__(self, scene: AnalyticScene, t_override=None):
        self.scene = scene
        self.t_override = t_override

        class _Mask:
            def value(self, pts):
                return np.ones(np.atleast_2d(pts).shape[0]), None

        self.mask = _Mask()

    def query_dynamic(self, x_norm, dirs, t):
        lo, hi = self.scene.bounds
        pts = lo + np.atleast_2d(x_norm) * (hi - lo)
        tt = float(np.asarray(t).reshape(-1)[0]) if self.t_override is None else self.t_override
        sigma, color = self.scene.field(pts, tt)
        return sigma, color, None


# ---------------------------------------------------------------------------
# scene zoo
# ---------------------------------------------------------------------------


def _unit_bounds() -> np.ndarray:
    return np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


def orbiting_sphere_scene() -> AnalyticScene:
    """Static floor/pillar/sphere plus one sphere orbiting the center."""
    prims = [
        BoxPrimitive(
            lo=np.array([0.05, 0.05, 0.05]),
            hi=np.array([0.95, 0.16, 0.95]),
            density=40.0,
            color=np.array([0.35, 0.55, 0.35]),
        ),
        BoxPrimitive(
            lo=np.array([0.40, 0.16, 0.40]),
            hi=np.array([0.60, 0.62, 0.60]),
            density=40.0,
            color=np.array([0.75, 0.45, 0.2]),
        ),
        SpherePrimitive(
            center=np.array([0.2, 0.3, 0.22]),
            radius=0.1,
            density=40.0,
            color=np.array([0.3, 0.4, 0.85]),
        ),
        SpherePrimitive(
            center=np.array([0.5, 0.42, 0.5]),
            radius=0.09,
            density=40.0,
            color=np.array([0.9, 0.2, 0.25]),
            trajectory=Orbit(center=np.array([0.5, 0.42, 0.5]), radius=0.28),
        ),
    ]
    return AnalyticScene(primitives=prims, bounds=_unit_bounds())


def static_scene() -> AnalyticScene:
    scene = orbiting_sphere_scene()
    prims = [p for p in scene.primitives if not p.is_dynamic]
    prims.append(
        SpherePrimitive(
            center=np.array([0.75, 0.35, 0.68]),
            radius=0.09,
            density=40.0,
            color=np.array([0.9, 0.2, 0.25]),
        )
    )
    return AnalyticScene(primitives=prims, bounds=scene.bounds)


def moving_box_scene() -> AnalyticScene:
    """Two-frame style scene: a box sliding along x."""
    scene = static_scene()
    prims = [p for p in scene.primitives if not isinstance(p, SpherePrimitive)]
    prims.append(
        BoxPrimitive(
            lo=np.array([0.15, 0.16, 0.62]),
            hi=np.array([0.33, 0.34, 0.80]),
            density=40.0,
            color=np.array([0.85, 0.8, 0.25]),
            trajectory=LinearPath(start=np.zeros(3), end=np.array([0.4, 0.0, 0.0])),
        )
    )
    return AnalyticScene(primitives=prims, bounds=scene.bounds)


SCENES = {
    "orbiter": orbiting_sphere_scene,
    "static": static_scene,
    "moving_box": moving_box_scene,
}


def look_at_pose(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """3x4 camera-to-world with +z forward, +x right, +y down (pixel y)."""
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(np.asarray(up, dtype=np.float64), fwd)
    right /= np.linalg.norm(right)
    down = -np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=1)
    return np.concatenate([R, pos[:, None]], axis=1)


def ring_cameras(
    n: int, width: int = 96, height: int = 96, radius: float = 1.6, elevation: float = 0.55
):
    """Cameras on a ring around the unit cube center, looking inward."""
    center = np.array([0.5, 0.5, 0.5])
    fx = fy = 0.5 * width / np.tan(np.deg2rad(45.0) / 2.0)
    cams = []
    for i in range(n):
        ang = 2.0 * np.pi * i / n + 0.3
        pos = center + np.array([radius * np.cos(ang), elevation, radius * np.sin(ang)])
        cams.append(
            PinholeCamera(
                width=width,
                height=height,
                fx=fx,
                fy=fy,
                cx=width / 2.0,
                cy=height / 2.0,
                pose=look_at_pose(pos, center),
                near=0.1,
                far=5.0,
            )
        )
    return cams


# ---------------------------------------------------------------------------
# oracle rendering
# ---------------------------------------------------------------------------


def oracle_render(
    scene: AnalyticScene, camera: PinholeCamera, t: float, n_samples: int = 4096
) -> np.ndarray:
    """Brute-force quadrature against the closed-form field.

    Independent of the trainable rendering path except for the shared
    compositing formula; this is the ground-truth oracle.
    """
    H, W = camera.height, camera.width
    yy, xx = np.mgrid[0:H, 0:W]
    origins, dirs = generate_rays(camera, xx.ravel(), yy.ravel())
    img = np.zeros((H * W, 3))
    chunk = max(1, 2**22 // n_samples)
    for s in range(0, H * W, chunk):
        piece = slice(s, s + chunk)
        o, d = origins[piece], dirs[piece]
        enter, exit_ = ray_aabb(o, d, scene.bounds[0], scene.bounds[1], camera.near, camera.far)
        span = exit_ - enter
        frac = (np.arange(n_samples) + 0.5) / n_samples
        pos = enter[:, None] + frac[None, :] * span[:, None]
        pts = o[:, None, :] + pos[:, :, None] * d[:, None, :]
        sigma, color = scene.field(pts.reshape(-1, 3), t)
        sigma = sigma.reshape(-1, n_samples) * (span > 0)[:, None]
        color = color.reshape(-1, n_samples, 3)
        deltas = np.broadcast_to((span / n_samples)[:, None], sigma.shape)
        rendered, _, _ = composite(sigma, color, deltas)
        img[piece] = rendered
    return img.reshape(H, W, 3)


def ground_truth_dynamic_mask(
    scene: AnalyticScene, camera: PinholeCamera, times
) -> np.ndarray:
    """Pixel is dynamic iff any moving primitive crosses its ray at any time."""
    H, W = camera.height, camera.width
    yy, xx = np.mgrid[0:H, 0:W]
    origins, dirs = generate_rays(camera, xx.ravel(), yy.ravel())
    hit = np.zeros(H * W, dtype=bool)
    for t in times:
        for prim in scene.moving:
            hit |= prim.ray_hits(origins, dirs, t)
    return hit.reshape(H, W)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class SceneDataset:
    cameras: list
    images: list  # per camera: (T, H, W, 3) float32
    n_times: int
    bounds: np.ndarray
    split: dict  # {"train": [ids], "test": [ids]}
    gt_dynamic_masks: list | None = None  # per camera (H, W) bool, when available
    path: Path | None = None

    def frame(self, cam_id: int, t_idx: int) -> np.ndarray:
        return self.images[cam_id][t_idx]


@dataclass
class SyntheticSpec:
    scene: str = "orbiter"
    n_train_cameras: int = 4
    n_test_cameras: int = 1
    width: int = 96
    height: int = 96
    n_times: int = 30
    oracle_samples: int = 1024


def frame_times(n_times: int) -> np.ndarray:
    """Normalized times t_idx / (T - 1)."""
    if n_times == 1:
        return np.zeros(1)
    return np.arange(n_times) / (n_times - 1)


def generate_synthetic(spec: SyntheticSpec, out_path, rng: np.random.Generator) -> SceneDataset:
    """Render the analytic scene to a dataset on disk, plus ground-truth masks."""
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    scene = SCENES[spec.scene]()
    n_cams = spec.n_train_cameras + spec.n_test_cameras
    cams = ring_cameras(n_cams, spec.width, spec.height)
    times = frame_times(spec.n_times)
    cam_entries = []
    all_images = []
    masks = []
    for ci, cam in enumerate(cams):
        cam_dir = out / f"cam{ci}"
        cam_dir.mkdir(exist_ok=True)
        frames = []
        names = []
        for ti, t in enumerate(times):
            img = oracle_render(scene, cam, float(t), n_samples=spec.oracle_samples)
            name = f"cam{ci}/{ti:04d}.png"
            img_io.write_png(out / name, img)
            frames.append(img_io.read_png(out / name))  # keep quantized values
            names.append(name)
        all_images.append(np.stack(frames).astype(np.float32))
        gt = ground_truth_dynamic_mask(scene, cam, times)
        img_io.write_png(out / f"cam{ci}/dynamic_mask.png", gt.astype(np.float64))
        masks.append(gt)
        cam_entries.append(
            {
                "id": ci,
                "width": cam.width,
                "height": cam.height,
                "fx": cam.fx,
                "fy": cam.fy,
                "cx": cam.cx,
                "cy": cam.cy,
                "pose": [float(v) for v in cam.pose.ravel()],
                "frames": names,
            }
        )
    manifest = {
        "version": MANIFEST_VERSION,
        "T": spec.n_times,
        "bounds": scene.bounds.tolist(),
        "cameras": cam_entries,
        "split": {
            "train": list(range(spec.n_train_cameras)),
            "test": list(range(spec.n_train_cameras, n_cams)),
        },
        "scene": spec.scene,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=1)
    return SceneDataset(
        cameras=cams,
        images=all_images,
        n_times=spec.n_times,
        bounds=scene.bounds,
        split=manifest["split"],
        gt_dynamic_masks=masks,
        path=out,
    )


def load_dataset(path) -> SceneDataset:
    """Load and validate a dataset from its scene.json manifest."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    root = manifest_path.parent
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('version')}")
    T = manifest["T"]
    cams, all_images, masks = [], [], []
    for entry in manifest["cameras"]:
        cam = PinholeCamera(
            width=entry["width"],
            height=entry["height"],
            fx=entry["fx"],
            fy=entry["fy"],
            cx=entry["cx"],
            cy=entry["cy"],
            pose=np.asarray(entry["pose"]).reshape(3, 4),
            near=entry.get("near", 0.1),
            far=entry.get("far", 5.0),
        )
        if len(entry["frames"]) != T:
            raise ValueError(
                f"camera {entry['id']} has {len(entry['frames'])} frames, expected T={T}"
            )
        frames = []
        for name in entry["frames"]:
            fpath = root / name
            if not fpath.exists():
                raise FileNotFoundError(f"missing frame file: {fpath}")
            img = img_io.read_png(fpath)
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError(
                    f"frame {name}: shape {img.shape[:2]} != camera "
                    f"({cam.height}, {cam.width})"
                )
            frames.append(img[..., :3] if img.ndim == 3 else np.repeat(img[..., None], 3, -1))
        all_images.append(np.stack(frames).astype(np.float32))
        mask_path = root / f"cam{entry['id']}/dynamic_mask.png"
        masks.append(img_io.read_png(mask_path) > 0.5 if mask_path.exists() else None)
        cams.append(cam)
    if any(m is None for m in masks):
        masks = None
    return SceneDataset(
        cameras=cams,
        images=all_images,
        n_times=T,
        bounds=np.asarray(manifest["bounds"], dtype=np.float64),
        split={k: list(v) for k, v in manifest["split"].items()},
        gt_dynamic_masks=masks,
        path=root,
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = 0.01**2, 0.03**2
    sigma, truncate = 1.5, 5.0 / 1.5  # 11-tap window
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        blur = lambda v: gaussian_filter(v, sigma=sigma, truncate=truncate, mode="reflect")
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def d_ssim(a: np.ndarray, b: np.ndarray) -> float:
    return (1.0 - ssim(a, b)) / 2.0
