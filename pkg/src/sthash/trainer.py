"""Optimization loop wiring the field, renderer, losses and ray sampler.

One training step: draw a (ray, time) batch from the importance table, run
the proposal pass, quadrature-render the dynamic and static branches, then
hand-chain the backward passes of every loss into the parameter groups and
apply one Adam update per group.
"""

from __future__ import annotations

import json
from dataclasses import asdict, replace

import numpy as np

from . import checkpoint as ckpt_io
from .config import TrainConfig, resolved_dump
from .field import FieldConfig, SpaceTimeField
from .losses import (
    LossWeights,
    MineEstimator,
    distortion_loss,
    mask_sparsity_loss,
    proposal_matching_loss,
    recon_loss,
    total_loss,
    uncertainty_loss,
)
from .nn import adam_step
from .render import (
    ProposalField,
    composite,
    composite_backward,
    generate_rays,
    ray_aabb,
    render_frame,
    sample_along_rays,
)
from .sampler import build_importance
from .scene import SceneDataset, d_ssim, frame_times, psnr


class TrainingDiverged(RuntimeError):
    def __init__(self, component: str, components: dict):
        super().__init__(f"non-finite loss component {component!r}: {components}")
        self.component = component
        self.components = components


def field_config_from(cfg: TrainConfig) -> FieldConfig:
    return FieldConfig(
        levels=cfg.levels,
        features_per_level=cfg.features_per_level,
        log2_table_size_3d=cfg.log2_table_size_3d,
        log2_table_size_4d=cfg.log2_table_size_4d,
        base_resolution=cfg.base_resolution,
        max_resolution=cfg.max_resolution,
        time_base_resolution=cfg.time_base_resolution,
        time_max_resolution=cfg.time_max_resolution,
        mask_resolution=cfg.mask_resolution,
        uncertainty_resolution=cfg.uncertainty_resolution,
        uncertainty_shift=cfg.uncertainty_shift,
        geo_features=cfg.geo_features,
        hidden_dim=cfg.hidden_dim,
        sh_degree=cfg.sh_degree,
        density_clamp=cfg.density_clamp,
        blend_mode=cfg.blend_mode,
    )


def loss_weights_from(cfg: TrainConfig) -> LossWeights:
    lw = LossWeights(
        lambda_u=cfg.lambda_u,
        gamma=cfg.gamma,
        lambda_mask=cfg.lambda_mask,
        lambda_dist=cfg.lambda_dist,
        lambda_prop=cfg.lambda_prop,
    )
    if cfg.blend_mode == "pure4d":
        # no 3D table and no mask: the static/uncertainty branch cannot exist
        lw.lambda_u = 0.0
        lw.gamma = 0.0
        lw.lambda_mask = 0.0
    elif cfg.blend_mode == "additive":
        lw.lambda_mask = 0.0
        lw.gamma = 0.0
    return lw


def compute_losses(
    field: SpaceTimeField,
    proposal: ProposalField | None,
    mine: MineEstimator | None,
    weights: LossWeights,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_norm: np.ndarray,
    target: np.ndarray,
    bounds: np.ndarray,
    n_samples: int,
    n_coarse: int = 32,
    sample_rng: np.random.Generator | None = None,
    jitter: bool = False,
    mine_rng: np.random.Generator | None = None,
    mine_batch: int = 1024,
    near: float = 0.1,
    far: float = 5.0,
    with_grads: bool = True,
) -> dict:
    """Forward all loss branches for one ray batch; optionally accumulate
    the analytic gradients of the total objective into every parameter group.
    """
    B = origins.shape[0]
    enter, exit_ = ray_aabb(origins, dirs, bounds[0], bounds[1], near, far)
    pos, deltas, aux = sample_along_rays(
        origins, dirs, enter, exit_, n_samples,
        proposal=proposal, t=t_norm, n_coarse=n_coarse,
        rng=sample_rng, jitter=jitter, bounds=bounds,
    )
    pts = origins[:, None, :] + pos[:, :, None] * dirs[:, None, :]
    x = (pts.reshape(-1, 3) - bounds[0]) / (bounds[1] - bounds[0])
    x = np.clip(x, 0.0, 1.0)
    t_rep = np.repeat(t_norm, n_samples)
    dirs_rep = np.repeat(dirs, n_samples, axis=0)

    enc, enc_cache = field.blended_encoding(x, t_rep)
    sigma, color, dec_cache = field.decode(enc, dirs_rep)
    sig = sigma.reshape(B, n_samples)
    col = color.reshape(B, n_samples, 3)
    rendered, w, t_final = composite(sig, col, deltas)

    comps = {}
    comps["L_r"], d_rendered = recon_loss(rendered, target)
    d_w = (d_rendered[:, None, :] * col).sum(axis=2)
    d_col = w[:, :, None] * d_rendered[:, None, :]

    span = np.maximum(exit_ - enter, 1e-8)
    s_norm = (pos - enter[:, None]) / span[:, None]
    d_norm = deltas / span[:, None]
    if weights.lambda_dist > 0:
        comps["L_dist"], d_w_dist = distortion_loss(w, s_norm, d_norm)
        d_w = d_w + weights.lambda_dist * d_w_dist
    else:
        comps["L_dist"] = 0.0

    if proposal is not None and weights.lambda_prop > 0:
        comps["L_prop"], d_pw = proposal_matching_loss(
            w, pos, aux["edges"], aux["prop_weights"]
        )
        if with_grads:
            d_prop_sigma = composite_backward(
                aux["prop_sigma"], aux["widths"], aux["prop_weights"],
                weights.lambda_prop * d_pw,
            )
            proposal.density_backward(aux["prop_cache"], d_prop_sigma.ravel())
    else:
        comps["L_prop"] = 0.0

    # mask-level terms
    d_m_extra = None
    m_flat = enc_cache.get("m") if isinstance(enc_cache, dict) else None
    if m_flat is not None and weights.lambda_mask > 0:
        comps["L_mask"], d_m_sp = mask_sparsity_loss(m_flat)
        d_m_extra = weights.lambda_mask * d_m_sp
    else:
        comps["L_mask"] = 0.0

    # static / uncertainty branch
    comps["L_u"] = 0.0
    comps["I"] = 0.0
    static_on = field.cfg.blend_mode != "pure4d" and (weights.lambda_u > 0 or weights.gamma > 0)
    if static_on:
        h3_cache = (enc_cache["h3"], enc_cache["c3"])
        sigma_s, color_s, s_cache = field.query_static(x, dirs_rep, h3_cache=h3_cache)
        sig_s = sigma_s.reshape(B, n_samples)
        col_s = color_s.reshape(B, n_samples, 3)
        rendered_s, w_s, _ = composite(sig_s, col_s, deltas)
        u_flat, u_cache = field.uncertainty_value(x)
        u = u_flat.reshape(B, n_samples)
        ray_u = (w_s * u).sum(axis=1)
        comps["L_u"], d_rend_s, d_ray_u = uncertainty_loss(target, rendered_s, ray_u)
        d_w_s = weights.lambda_u * (
            (d_rend_s[:, None, :] * col_s).sum(axis=2) + d_ray_u[:, None] * u
        )
        d_col_s = weights.lambda_u * (w_s[:, :, None] * d_rend_s[:, None, :])
        d_u_flat = (weights.lambda_u * (d_ray_u[:, None] * w_s)).ravel()

        if mine is not None and m_flat is not None:
            if mine_rng is None:
                raise ValueError("MINE evaluation needs an rng")
            n_pts = m_flat.size
            k = min(mine_batch, n_pts)
            idx = mine_rng.permutation(n_pts)[:k]
            i_val, d_m_mine, d_u_mine = mine.estimate(
                m_flat[idx], u_flat[idx], mine_rng,
                grad_scale=(-weights.gamma if with_grads else 0.0),
            )
            comps["I"] = i_val
            if with_grads and weights.gamma > 0:
                if d_m_extra is None:
                    d_m_extra = np.zeros_like(m_flat)
                scatter = np.zeros_like(m_flat)
                scatter[idx] = d_m_mine
                d_m_extra = d_m_extra + scatter
                add_u = np.zeros_like(u_flat)
                add_u[idx] = d_u_mine
                d_u_flat = d_u_flat + add_u

        if with_grads:
            d_sig_s = composite_backward(sig_s, deltas, w_s, d_w_s)
            field.query_static_backward(
                s_cache, d_sig_s.ravel(), d_col_s.reshape(-1, 3)
            )
            field.uncertainty.backward(u_cache, d_u_flat)

    if with_grads:
        d_sig = composite_backward(sig, deltas, w, d_w)
        d_enc = field.decode_backward(dec_cache, d_sig.ravel(), d_col.reshape(-1, 3))
        field.blended_encoding_backward(enc_cache, d_enc, d_m_extra=d_m_extra)

    comps["total"] = total_loss(comps, weights)
    comps["weights_sum_check"] = float(np.abs(w.sum(axis=1) + t_final - 1.0).max())
    return comps


class Trainer:
    """Owns all trainable state plus the sampling tables for one dataset."""

    def __init__(self, cfg: TrainConfig, dataset: SceneDataset, dtype=np.float32):
        self.cfg = cfg
        self.dataset = dataset
        self.dtype = dtype
        init_rng = np.random.default_rng(cfg.seed)
        self.field = SpaceTimeField(field_config_from(cfg), init_rng, dtype=dtype)
        self.proposal = ProposalField(
            cfg.proposal_resolution, cfg.proposal_time_channels, dtype=dtype
        )
        self.mine = MineEstimator(
            init_rng, hidden_dim=cfg.mine_hidden, ema_rate=cfg.mine_ema_rate, dtype=dtype
        )
        self.weights = loss_weights_from(cfg)
        self.importance = build_importance(
            dataset, tau1=cfg.tau1, tau2=cfg.tau2, downsample=cfg.importance_downsample
        )
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.step_count = 0
        self.metrics: list[dict] = []
        self._dirs_cache: dict[int, np.ndarray] = {}
        self.near = min(c.near for c in dataset.cameras)
        self.far = max(c.far for c in dataset.cameras)

    # -- parameter groups ---------------------------------------------------

    def param_groups(self):
        g = [(name, buf, self.cfg.lr_tables) for name, buf in [
            ("table3d", self.field.table3d.storage),
            ("table4d", self.field.table4d.storage),
            ("mask", self.field.mask.storage),
            ("uncertainty", self.field.uncertainty.storage),
            ("proposal", self.proposal.storage),
        ]]
        g += [
            ("density_mlp", self.field.density_params, self.cfg.lr_mlps),
            ("color_mlp", self.field.color_params, self.cfg.lr_mlps),
            ("mine", self.mine.params, self.cfg.lr_mlps),
        ]
        if self.cfg.blend_mode == "pure4d":
            skip = {"table3d", "mask", "uncertainty", "mine"}
            g = [item for item in g if item[0] not in skip]
        elif self.cfg.blend_mode == "additive":
            g = [item for item in g if item[0] not in {"mask", "mine"}]
        return g

    def lr_scale(self) -> float:
        if not self.cfg.cosine_decay or self.cfg.steps <= 1:
            return 1.0
        frac = min(self.step_count / self.cfg.steps, 1.0)
        return 0.1 + 0.45 * (1.0 + np.cos(np.pi * frac))

    # -- batching -----------------------------------------------------------

    def _camera_dirs(self, cam_id: int) -> np.ndarray:
        if cam_id not in self._dirs_cache:
            cam = self.dataset.cameras[cam_id]
            yy, xx = np.mgrid[0 : cam.height, 0 : cam.width]
            _, dirs = generate_rays(cam, xx.ravel(), yy.ravel())
            self._dirs_cache[cam_id] = dirs
        return self._dirs_cache[cam_id]

    def sample_training_batch(self, n: int):
        rays, ts = self.importance.mixed_batch(n, self.rng, self.cfg.p_uniform)
        idx = self.importance.ray_index[rays]
        cams, pys, pxs = idx[:, 0], idx[:, 1], idx[:, 2]
        origins = np.empty((n, 3))
        dirs = np.empty((n, 3))
        target = np.empty((n, 3))
        for cam_id in np.unique(cams):
            sel = cams == cam_id
            cam = self.dataset.cameras[cam_id]
            all_dirs = self._camera_dirs(int(cam_id))
            flat = pys[sel] * cam.width + pxs[sel]
            dirs[sel] = all_dirs[flat]
            origins[sel] = cam.pose[:, 3]
            target[sel] = self.dataset.images[cam_id][ts[sel], pys[sel], pxs[sel]]
        T = self.dataset.n_times
        t_norm = ts / (T - 1) if T > 1 else np.zeros(n)
        return origins, dirs, t_norm, target

    # -- optimization -------------------------------------------------------

    def step_weights(self) -> LossWeights:
        """Loss weights for the current step; the sparsity weight optionally
        ramps up so the 4D branch can claim dynamic regions before the mask
        is pushed toward static."""
        warmup = self.cfg.lambda_mask_warmup
        if warmup <= 0 or self.weights.lambda_mask == 0.0:
            return self.weights
        ramp = min(1.0, self.step_count / warmup)
        return replace(self.weights, lambda_mask=self.weights.lambda_mask * ramp)

    def step(self) -> dict:
        origins, dirs, t_norm, target = self.sample_training_batch(self.cfg.batch_rays)
        comps = compute_losses(
            self.field, self.proposal, self.mine, self.step_weights(),
            origins, dirs, t_norm, target, self.dataset.bounds,
            n_samples=self.cfg.n_samples, n_coarse=self.cfg.n_coarse,
            sample_rng=self.rng, jitter=self.cfg.jitter,
            mine_rng=self.rng, mine_batch=self.cfg.mine_batch,
            near=self.near, far=self.far, with_grads=True,
        )
        for key in ("L_r", "L_u", "I", "L_mask", "L_dist", "L_prop", "total"):
            if not np.isfinite(comps[key]):
                raise TrainingDiverged(key, comps)
        scale = self.lr_scale()
        for _, buf, lr in self.param_groups():
            adam_step(
                buf, lr * scale,
                beta1=self.cfg.adam_beta1,
                beta2=self.cfg.adam_beta2,
                eps=self.cfg.adam_eps,
            )
            buf.zero_grads()
        self.step_count += 1
        record = {"step": self.step_count}
        record.update(
            {k: float(comps[k]) for k in ("L_r", "L_u", "I", "L_mask", "L_dist", "L_prop", "total")}
        )
        return record

    def train(self, log_path=None, checkpoint_path=None) -> list[dict]:
        log_f = open(log_path, "w") if log_path else None
        try:
            while self.step_count < self.cfg.steps:
                try:
                    record = self.step()
                except TrainingDiverged:
                    if checkpoint_path:
                        save_checkpoint(self, checkpoint_path)
                    raise
                if (
                    self.step_count % self.cfg.log_every == 0
                    or self.step_count == self.cfg.steps
                ):
                    self.metrics.append(record)
                    if log_f:
                        log_f.write(json.dumps(record) + "\n")
                if (
                    self.cfg.eval_every
                    and self.step_count % self.cfg.eval_every == 0
                    and self.step_count < self.cfg.steps
                ):
                    ev = evaluate(self, frame_stride=max(1, self.dataset.n_times // 3))
                    ev_rec = {"step": self.step_count, "eval_psnr": ev["psnr"]}
                    self.metrics.append(ev_rec)
                    if log_f:
                        log_f.write(json.dumps(ev_rec) + "\n")
        finally:
            if log_f:
                log_f.close()
        if checkpoint_path:
            save_checkpoint(self, checkpoint_path)
        return self.metrics

    # -- inference ----------------------------------------------------------

    def render(self, camera, t, n_samples=None, pixel_mask=None, supersample=1):
        return render_frame(
            self.field, camera, t, self.dataset.bounds,
            n_samples=n_samples or self.cfg.n_samples,
            proposal=self.proposal, n_coarse=self.cfg.n_coarse,
            pixel_mask=pixel_mask, supersample=supersample,
        )


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def occupancy_mask_stats(trainer: Trainer, grid: int = 40, sigma_threshold: float = 1.0):
    """Mask statistics over voxels the static branch considers occupied."""
    axes = (np.arange(grid) + 0.5) / grid
    xs, ys, zs = np.meshgrid(axes, axes, axes, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    field = trainer.field
    dirs = np.tile(np.array([[0.0, 0.0, 1.0]]), (pts.shape[0], 1))
    chunks = []
    masks = []
    for s in range(0, pts.shape[0], 16384):
        piece = slice(s, s + 16384)
        if field.cfg.blend_mode == "pure4d":
            sigma, _, _ = field.query_dynamic(pts[piece], dirs[piece], 0.0)
        else:
            sigma, _, _ = field.query_static(pts[piece], dirs[piece])
        chunks.append(sigma)
        m, _ = field.mask.value(pts[piece])
        masks.append(m)
    sigma = np.concatenate(chunks)
    m = np.concatenate(masks)
    occ = sigma > sigma_threshold
    if not occ.any():
        return {"occupied_fraction": 0.0, "dynamic_fraction": 0.0, "middle_fraction": 0.0}
    mo = m[occ]
    return {
        "occupied_fraction": float(occ.mean()),
        "dynamic_fraction": float((1.0 - mo).mean()),
        "middle_fraction": float(((mo > 0.1) & (mo < 0.9)).mean()),
    }


def learned_dynamic_pixels(trainer: Trainer, cam_id: int, threshold: float = 0.25,
                           time_stride: int = 3, n_samples: int = 64) -> np.ndarray:
    """Pixels whose aggregated dynamic weight exceeds ``threshold`` at any time."""
    cam = trainer.dataset.cameras[cam_id]
    times = frame_times(trainer.dataset.n_times)[::time_stride]
    agg = None
    for t in times:
        _, _, dyn = trainer.render(cam, float(t), n_samples=n_samples)
        agg = dyn if agg is None else np.maximum(agg, dyn)
    return agg > threshold


def table4d_write_stats(trainer: Trainer, n_points: int = 20000, gate: float = 0.01):
    """Counts of 4D-table corner writes with and without mask gating.

    A sample point writes to all its 4D corners; with the mask, writes whose
    blend weight (1 - m) is below ``gate`` carry negligible gradient and are
    counted as suppressed.
    """
    rng = np.random.default_rng(0)
    pts = rng.random((n_points, 3))
    corners_per_point = trainer.cfg.levels * 16
    ungated = n_points * corners_per_point
    if trainer.cfg.blend_mode == "pure4d":
        return {"ungated_writes": ungated, "gated_writes": ungated}
    m, _ = trainer.field.mask.value(pts)
    gated = int(((1.0 - m) > gate).sum()) * corners_per_point
    return {"ungated_writes": ungated, "gated_writes": gated}


def evaluate(
    trainer: Trainer,
    split: str = "test",
    frame_stride: int = 1,
    n_samples: int | None = None,
    supersample: int = 1,
) -> dict:
    """Frame-by-frame PSNR / D-SSIM on a split, plus mask metrics."""
    ds = trainer.dataset
    times = frame_times(ds.n_times)
    psnrs, dssims = [], []
    per_frame = []
    for cam_id in ds.split[split]:
        cam = ds.cameras[cam_id]
        for ti in range(0, ds.n_times, frame_stride):
            img, _, _ = trainer.render(
                cam, float(times[ti]), n_samples=n_samples, supersample=supersample
            )
            gt = ds.images[cam_id][ti]
            p = psnr(img, gt)
            d = d_ssim(img, gt)
            psnrs.append(p)
            dssims.append(d)
            per_frame.append({"camera": int(cam_id), "t": int(ti), "psnr": p, "d_ssim": d})
    out = {
        "psnr": float(np.mean(psnrs)),
        "d_ssim": float(np.mean(dssims)),
        "per_frame": per_frame,
    }
    out.update(occupancy_mask_stats(trainer))
    out.update(table4d_write_stats(trainer))
    if ds.gt_dynamic_masks is not None and split in ds.split and ds.split[split]:
        ious = []
        for cam_id in ds.split[split]:
            learned = learned_dynamic_pixels(trainer, cam_id)
            gt_mask = ds.gt_dynamic_masks[cam_id]
            union = (learned | gt_mask).sum()
            if union:
                ious.append(float((learned & gt_mask).sum() / union))
        if ious:
            out["mask_iou"] = float(np.mean(ious))
    return out


ABLATION_VARIANTS = ("pure4d", "additive", "masked", "masked_no_uncertainty")


def ablate(cfg: TrainConfig, dataset: SceneDataset, variants=ABLATION_VARIANTS) -> dict:
    """Train each encoding variant with identical seed/batches and compare."""
    report = {}
    for variant in variants:
        vcfg = replace(cfg)
        if variant == "masked_no_uncertainty":
            vcfg = replace(cfg, blend_mode="masked", lambda_u=0.0, gamma=0.0)
        else:
            vcfg = replace(cfg, blend_mode=variant)
        trainer = Trainer(vcfg, dataset)
        trainer.train()
        ev = evaluate(trainer, frame_stride=max(1, dataset.n_times // 10))
        report[variant] = {
            "psnr": ev["psnr"],
            "d_ssim": ev["d_ssim"],
            "dynamic_fraction": ev["dynamic_fraction"],
            "middle_fraction": ev["middle_fraction"],
            "mask_iou": ev.get("mask_iou"),
            "trainer": trainer,
        }
    return report


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(trainer: Trainer, path) -> None:
    records = {
        "config": asdict(trainer.cfg),
        "resolved_config": resolved_dump(trainer.cfg),
        "step": trainer.step_count,
        "rng_state": trainer.rng.bit_generator.state,
        "mine_ema": -1.0 if trainer.mine.ema_denominator is None else trainer.mine.ema_denominator,
    }
    for name, buf, _ in trainer.param_groups():
        records[f"{name}.values"] = buf.values
        records[f"{name}.adam_m"] = buf.adam_m
        records[f"{name}.adam_v"] = buf.adam_v
        records[f"{name}.step_count"] = buf.step_count
    ckpt_io.write_container(path, records)


# ---------------------------------------------------------------------------
# end-to-end gradient verification
# ---------------------------------------------------------------------------


def pipeline_gradcheck(seed: int = 0, h: float = 1e-5, probes: int = 12) -> dict:
    """Central finite differences of the total objective against the
    hand-written backward pass, in 64-bit, on a tiny field (2 rays, 4
    samples). Checks both hash tables, the mask and uncertainty grids, the
    two decoding MLPs and the MI critic.

    Returns per-group and overall max relative error.
    """
    rng = np.random.default_rng(seed)
    fcfg = FieldConfig(
        levels=2, features_per_level=2,
        log2_table_size_3d=8, log2_table_size_4d=8,
        base_resolution=4, max_resolution=8,
        time_base_resolution=2, time_max_resolution=4,
        mask_resolution=4, uncertainty_resolution=4,
        geo_features=7, hidden_dim=8, sh_degree=2,
    )
    field = SpaceTimeField(fcfg, rng, dtype=np.float64)
    # table entries start near zero; spread them out so every loss branch
    # sees a non-degenerate signal
    for buf in (field.table3d.storage, field.table4d.storage):
        buf.values[:] = rng.uniform(-0.3, 0.3, size=buf.values.size)
    field.mask.storage.values[:] = rng.uniform(-0.8, 0.8, size=len(field.mask.storage))
    field.uncertainty.storage.values[:] = rng.uniform(
        -0.8, 0.8, size=len(field.uncertainty.storage)
    )
    mine = MineEstimator(rng, hidden_dim=8, dtype=np.float64)
    weights = LossWeights(
        lambda_u=0.3, gamma=0.2, lambda_mask=0.1, lambda_dist=0.1, lambda_prop=0.0
    )
    bounds = np.stack([np.zeros(3), np.ones(3)])
    origins = np.array([[0.5, 0.45, -0.6], [0.25, 0.6, -0.7]])
    dirs = np.array([[0.05, -0.02, 1.0], [0.12, -0.08, 1.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t_norm = np.array([0.25, 0.7])
    target = rng.random((2, 3))

    def run(with_grads: bool) -> dict:
        mine.ema_denominator = None  # keeps the log-denominator gradient exact
        return compute_losses(
            field, None, mine, weights, origins, dirs, t_norm, target, bounds,
            n_samples=4, sample_rng=None, jitter=False,
            mine_rng=np.random.default_rng(7), mine_batch=8,
            near=0.05, far=3.0, with_grads=with_grads,
        )

    groups = {
        "table3d": field.table3d.storage,
        "table4d": field.table4d.storage,
        "mask": field.mask.storage,
        "uncertainty": field.uncertainty.storage,
        "density_mlp": field.density_params,
        "color_mlp": field.color_params,
        "critic": mine.params,
    }
    for buf in groups.values():
        buf.zero_grads()
    run(True)
    analytic = {name: buf.grads.copy() for name, buf in groups.items()}

    probe_rng = np.random.default_rng(seed + 1)
    report = {}
    for name, buf in groups.items():
        g = analytic[name]
        n = g.size
        by_mag = np.argsort(-np.abs(g))[: probes // 2]
        extra = probe_rng.permutation(n)[:probes]
        idx = np.unique(np.concatenate([by_mag, extra]))
        errs = []
        for i in idx:
            keep = buf.values[i]
            buf.values[i] = keep + h
            up = run(False)["total"]
            buf.values[i] = keep - h
            dn = run(False)["total"]
            buf.values[i] = keep
            fd = (up - dn) / (2.0 * h)
            denom = max(abs(g[i]), abs(fd), 1e-6)
            errs.append(abs(g[i] - fd) / denom)
        report[name] = float(max(errs))
    report["max_rel_err"] = float(max(report.values()))
    return report


def load_checkpoint(path, dataset: SceneDataset) -> Trainer:
    records = ckpt_io.read_container(path)
    cfg = TrainConfig(**records["config"])
    trainer = Trainer(cfg, dataset)
    for name, buf, _ in trainer.param_groups():
        buf.values[:] = records[f"{name}.values"]
        buf.adam_m[:] = records[f"{name}.adam_m"]
        buf.adam_v[:] = records[f"{name}.adam_v"]
        buf.step_count = int(records[f"{name}.step_count"])
        buf.zero_grads()
    trainer.step_count = int(records["step"])
    trainer.rng.bit_generator.state = records["rng_state"]
    ema = records["mine_ema"]
    trainer.mine.ema_denominator = None if ema < 0 else float(ema)
    return trainer
