"""Minimal reverse-mode building blocks: parameter buffers, small MLPs, Adam.

Everything here operates on flat float arrays. The computation graph is fixed
(linear layers with ReLU, plus a handful of output activations), so forward
passes return an explicit cache that the matching backward pass consumes.
Gradients always *accumulate* into ``ParamBuffer.grads`` so that several loss
branches can share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class ParamBuffer:
    """Flat parameter storage with gradient and Adam moment buffers."""

    values: np.ndarray
    grads: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0
    skipped_steps: int = 0  # non-finite gradient events

    @classmethod
    def zeros(cls, n: int, dtype=np.float32) -> "ParamBuffer":
        return cls(
            values=np.zeros(n, dtype=dtype),
            grads=np.zeros(n, dtype=dtype),
            adam_m=np.zeros(n, dtype=dtype),
            adam_v=np.zeros(n, dtype=dtype),
        )

    @classmethod
    def from_values(cls, values: np.ndarray) -> "ParamBuffer":
        v = np.ascontiguousarray(values).ravel()
        return cls(
            values=v,
            grads=np.zeros_like(v),
            adam_m=np.zeros_like(v),
            adam_v=np.zeros_like(v),
        )

    def __len__(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def zero_grads(self) -> None:
        self.grads[:] = 0

    def astype(self, dtype) -> "ParamBuffer":
        """Copy with a different dtype (used by the float64 shadow mode)."""
        return ParamBuffer(
            values=self.values.astype(dtype),
            grads=self.grads.astype(dtype),
            adam_m=self.adam_m.astype(dtype),
            adam_v=self.adam_v.astype(dtype),
            step_count=self.step_count,
            skipped_steps=self.skipped_steps,
        )


def adam_step(
    params: ParamBuffer,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-15,
) -> None:
    """Bias-corrected Adam update in place. Grads are left untouched.

    A buffer whose gradient contains a non-finite value is skipped for the
    step (the counter on the buffer signals divergence to the caller).
    """
    g = params.grads
    if not np.all(np.isfinite(g)):
        params.skipped_steps += 1
        params.step_count += 1
        return
    params.step_count += 1
    t = params.step_count
    params.adam_m[:] = beta1 * params.adam_m + (1.0 - beta1) * g
    params.adam_v[:] = beta2 * params.adam_v + (1.0 - beta2) * g * g
    m_hat = params.adam_m / (1.0 - beta1**t)
    v_hat = params.adam_v / (1.0 - beta2**t)
    params.values[:] = params.values - lr * m_hat / (np.sqrt(v_hat) + eps)


ACTIVATIONS = ("none", "sigmoid", "exp", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a fully connected ReLU network."""

    input_dim: int
    hidden_dim: int
    hidden_layers: int
    output_dim: int
    activation: str = "relu"
    output_activation: str = "none"

    def __post_init__(self):
        if min(self.input_dim, self.output_dim) < 1 or (
            self.hidden_layers > 0 and self.hidden_dim < 1
        ):
            raise ValueError(f"invalid MLP dims: {self}")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")
        if self.activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.activation!r}")
        if self.output_activation not in ACTIVATIONS:
            raise ValueError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(din * dout + dout for din, dout in self.layer_dims)


def mlp_param_views(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat buffer into per-layer (W, b) views, W shaped (din, dout)."""
    if flat.size != spec.n_params:
        raise ValueError(
            f"parameter buffer length {flat.size} != expected {spec.n_params} for {spec}"
        )
    out = []
    off = 0
    for din, dout in spec.layer_dims:
        w = flat[off : off + din * dout].reshape(din, dout)
        off += din * dout
        b = flat[off : off + dout]
        off += dout
        out.append((w, b))
    return out


def mlp_init(spec: MlpSpec, rng: np.random.Generator, dtype=np.float32) -> ParamBuffer:
    """Kaiming-uniform weights, zero biases."""
    buf = ParamBuffer.zeros(spec.n_params, dtype=dtype)
    for w, b in mlp_param_views(spec, buf.values):
        bound = np.sqrt(6.0 / w.shape[0])
        w[:] = rng.uniform(-bound, bound, size=w.shape).astype(dtype)
        b[:] = 0
    return buf


def _apply_output_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "none":
        return z
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "exp":
        return np.exp(z)
    if kind == "softplus":
        return softplus(z)
    raise ValueError(kind)


def _output_activation_grad(kind: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if kind == "none":
        return np.ones_like(z)
    if kind == "sigmoid":
        return y * (1.0 - y)
    if kind == "exp":
        return y
    if kind == "softplus":
        return sigmoid(z)
    raise ValueError(kind)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class MlpCache:
    spec: MlpSpec
    params: ParamBuffer
    inputs: list  # input to every linear layer
    pre_acts: list  # pre-activation of every linear layer
    output: np.ndarray


def mlp_forward(spec: MlpSpec, params: ParamBuffer, x: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Batched forward pass; ``x`` is (batch, input_dim)."""
    x = np.atleast_2d(x)
    if x.shape[1] != spec.input_dim:
        raise ValueError(
            f"MLP input width mismatch: expected {spec.input_dim}, got {x.shape[1]}"
        )
    views = mlp_param_views(spec, params.values)
    inputs, pre_acts = [], []
    h = x
    n_layers = len(views)
    for i, (w, b) in enumerate(views):
        inputs.append(h)
        z = h @ w + b
        pre_acts.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    y = _apply_output_activation(spec.output_activation, h)
    return y, MlpCache(spec, params, inputs, pre_acts, y)


def mlp_backward(cache: MlpCache, d_output: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients, return gradient w.r.t. the input batch."""
    spec = cache.spec
    d_output = np.atleast_2d(d_output)
    if d_output.shape != cache.output.shape:
        raise ValueError(
            f"stale cache: d_output shape {d_output.shape} != output {cache.output.shape}"
        )
    views = mlp_param_views(spec, cache.params.values)
    grad_views = mlp_param_views(spec, cache.params.grads)
    last_z = cache.pre_acts[-1]
    dz = d_output * _output_activation_grad(spec.output_activation, last_z, cache.output)
    for i in range(len(views) - 1, -1, -1):
        w, _ = views[i]
        gw, gb = grad_views[i]
        x_in = cache.inputs[i]
        gw += x_in.T @ dz
        gb += dz.sum(axis=0)
        dx = dz @ w.T
        if i > 0:
            dz = dx * (cache.pre_acts[i - 1] > 0)
        else:
            return dx
    return dx
