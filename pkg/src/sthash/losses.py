"""Training objectives: reconstruction, uncertainty, mutual information,
mask sparsity, distortion and proposal matching.

Every loss returns its scalar value together with the gradients w.r.t. its
direct inputs, so the trainer can chain them through the field's backward
passes. Channel convention for color errors: sum over the 3 channels, mean
over rays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MlpSpec, ParamBuffer, mlp_backward, mlp_forward, mlp_init


@dataclass
class LossWeights:
    lambda_u: float = 3e-5
    gamma: float = 3e-4
    lambda_mask: float = 1e-2
    lambda_dist: float = 2e-2
    lambda_prop: float = 1.0

    def __post_init__(self):
        for name, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


def recon_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean over rays of the channel-summed squared error."""
    diff = rendered - target
    B = rendered.shape[0]
    value = float((diff * diff).sum() / B)
    d_rendered = 2.0 * diff / B
    return value, d_rendered


U_FLOOR = 1e-2  # keeps the uncertainty loss finite as U -> 0


def uncertainty_loss(target: np.ndarray, rendered_static: np.ndarray, ray_u: np.ndarray):
    """Heteroscedastic loss err^2 / (2 U^2) + log U per ray, U floored.

    Returns (value, d_rendered_static, d_ray_u).
    """
    diff = rendered_static - target
    err2 = (diff * diff).sum(axis=1)
    u = np.maximum(ray_u, U_FLOOR)
    B = target.shape[0]
    value = float((err2 / (2.0 * u * u) + np.log(u)).mean())
    d_rendered = diff / (u * u)[:, None] / B
    active = ray_u > U_FLOOR
    d_u = np.where(active, (-err2 / u**3 + 1.0 / u) / B, 0.0)
    return value, d_rendered, d_u


def mask_sparsity_loss(m: np.ndarray):
    """mean(1 - m): pulls the mask toward the static (3D) table."""
    n = m.size
    value = float(1.0 - m.mean())
    d_m = np.full_like(m, -1.0 / n)
    return value, d_m


def distortion_loss(weights: np.ndarray, midpoints: np.ndarray, deltas: np.ndarray):
    """Bilateral distortion regularizer on the weight distribution along rays.

    ``midpoints`` and ``deltas`` must be normalized to the [0, 1] ray span.
    Returns (value, d_weights).
    """
    B = weights.shape[0]
    dist = np.abs(midpoints[:, :, None] - midpoints[:, None, :])  # (B, n, n)
    cross = np.einsum("bi,bj,bij->b", weights, weights, dist)
    self_term = (weights * weights * deltas).sum(axis=1) / 3.0
    value = float((cross + self_term).mean())
    d_w = (2.0 * np.einsum("bij,bj->bi", dist, weights) + (2.0 / 3.0) * weights * deltas) / B
    return value, d_w


def proposal_matching_loss(
    main_weights: np.ndarray,
    main_positions: np.ndarray,
    bin_edges: np.ndarray,
    prop_weights: np.ndarray,
):
    """Squared error between normalized proposal and binned main-weight
    histograms. The main-field histogram is a fixed target (no gradient).

    Returns (value, d_prop_weights).
    """
    B, nc = prop_weights.shape
    span = bin_edges[:, -1] - bin_edges[:, 0]
    rel = (main_positions - bin_edges[:, :1]) / np.maximum(span, 1e-12)[:, None]
    bins = np.clip((rel * nc).astype(np.int64), 0, nc - 1)
    target = np.zeros((B, nc))
    rows = np.repeat(np.arange(B), main_weights.shape[1])
    np.add.at(target, (rows, bins.ravel()), main_weights.ravel())
    target /= np.maximum(target.sum(axis=1, keepdims=True), 1e-8)
    psum = np.maximum(prop_weights.sum(axis=1, keepdims=True), 1e-8)
    pn = prop_weights / psum
    diff = pn - target
    value = float((diff * diff).sum() / B)
    g = 2.0 * diff / B
    d_prop = (g - (g * pn).sum(axis=1, keepdims=True)) / psum
    return value, d_prop


class MineEstimator:
    """Lower-bound mutual-information estimator with a tiny critic MLP.

    The critic sees standardized (m, u) pairs; marginal samples permute u
    within the batch. The gradient of the log-denominator uses an EMA of
    the denominator (bias reduction); on the first call the EMA equals the
    batch mean, so a fresh estimator's gradients are exact.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        hidden_dim: int = 64,
        ema_rate: float = 0.99,
        dtype=np.float32,
    ):
        self.spec = MlpSpec(input_dim=2, hidden_dim=hidden_dim, hidden_layers=2, output_dim=1)
        self.params = mlp_init(self.spec, rng, dtype=dtype)
        self.ema_rate = ema_rate
        self.ema_denominator: float | None = None
        self.skipped_batches = 0

    @staticmethod
    def _standardize(x: np.ndarray):
        mu = x.mean()
        sd = x.std()
        s = sd + 1e-8
        z = (x - mu) / s
        return z, s

    @staticmethod
    def _standardize_backward(z: np.ndarray, s: float, g: np.ndarray) -> np.ndarray:
        return (g - g.mean() - z * (g * z).mean()) / s

    def estimate(
        self,
        m: np.ndarray,
        u: np.ndarray,
        rng: np.random.Generator,
        grad_scale: float = 0.0,
        update_ema: bool = True,
    ):
        """Estimate I(m, u); optionally backprop ``grad_scale * dI`` into the
        critic and return matching gradients for m and u.

        Returns (value, d_m, d_u); the input gradients are zero when
        ``grad_scale`` is 0.
        """
        m = np.asarray(m, dtype=np.float64).ravel()
        u = np.asarray(u, dtype=np.float64).ravel()
        if m.size != u.size:
            raise ValueError("m and u batches must have equal length")
        n = m.size
        if n < 2:
            self.skipped_batches += 1
            return 0.0, np.zeros_like(m), np.zeros_like(u)
        perm = rng.permutation(n)
        zm, sm = self._standardize(m)
        zu, su = self._standardize(u)
        joint = np.stack([zm, zu], axis=1)
        marginal = np.stack([zm, zu[perm]], axis=1)
        tj, cache_j = mlp_forward(self.spec, self.params, joint.astype(self.params.dtype))
        tm, cache_m = mlp_forward(self.spec, self.params, marginal.astype(self.params.dtype))
        tj = tj[:, 0].astype(np.float64)
        tm = tm[:, 0].astype(np.float64)
        et = np.exp(tm)
        den = float(et.mean())
        value = float(tj.mean() - np.log(den))
        d_m = np.zeros_like(m)
        d_u = np.zeros_like(u)
        if grad_scale != 0.0:
            ema = den if self.ema_denominator is None else self.ema_denominator
            d_tj = np.full((n, 1), grad_scale / n)
            d_tm = (-grad_scale * et / (n * ema))[:, None]
            d_joint = mlp_backward(cache_j, d_tj.astype(self.params.dtype)).astype(np.float64)
            d_marg = mlp_backward(cache_m, d_tm.astype(self.params.dtype)).astype(np.float64)
            d_zm = d_joint[:, 0] + d_marg[:, 0]
            d_zu = d_joint[:, 1]
            d_zu_perm = d_marg[:, 1]
            d_zu_full = d_zu.copy()
            np.add.at(d_zu_full, perm, d_zu_perm)
            d_m = self._standardize_backward(zm, sm, d_zm)
            d_u = self._standardize_backward(zu, su, d_zu_full)
        if update_ema:
            if self.ema_denominator is None:
                self.ema_denominator = den
            else:
                self.ema_denominator = (
                    self.ema_rate * self.ema_denominator + (1.0 - self.ema_rate) * den
                )
        return value, d_m, d_u


def total_loss(components: dict, weights: LossWeights) -> float:
    """L = L_r + lambda L_u - gamma I + sparsity/distortion/proposal terms."""
    return (
        components.get("L_r", 0.0)
        + weights.lambda_u * components.get("L_u", 0.0)
        - weights.gamma * components.get("I", 0.0)
        + weights.lambda_mask * components.get("L_mask", 0.0)
        + weights.lambda_dist * components.get("L_dist", 0.0)
        + weights.lambda_prop * components.get("L_prop", 0.0)
    )
