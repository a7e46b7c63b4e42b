"""Class-conditional residual MLP denoiser with manual backpropagation.

Architecture (tensor names in ParamSet order)::

    class_embed.weight                      [C, E]   learned class embedding
    input.x_proj.weight / .bias             [D, H]   \
    input.t_proj.weight / .bias             [E, H]    | one linear layer over the concat
    input.c_proj.weight / .bias             [E, H]   /  [x_t, sinusoidal(t), c_emb], split by part
    block{i}.lin1.weight / .bias            [H, H]   h + lin2(SiLU(lin1(h)))
    block{i}.lin2.weight / .bias            [H, H]
    head.weight / .bias                     [H, D]

SiLU is smooth everywhere, which keeps finite-difference checks clean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.special import expit

from src.diffusion.schedule import NoiseSchedule, forward_noise
from src.exceptions import DimensionError, IndexRangeError
from src.models import Batch, DenoiserSpec
from src.param_store import ParamSet
from src.seeding import make_rng

Array = NDArray[np.float64]

HEAD_INIT_SCALE = 0.1


def tensor_layout(spec: DenoiserSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Names and shapes of every parameter tensor, in order."""
    d, h, e, c = spec.data_dim, spec.hidden_dim, spec.embed_dim, spec.num_classes
    layout: list[tuple[str, tuple[int, ...]]] = [("class_embed.weight", (c, e))]
    for part, fan_in in (("x", d), ("t", e), ("c", e)):
        layout += [(f"input.{part}_proj.weight", (fan_in, h)), (f"input.{part}_proj.bias", (h,))]
    for i in range(spec.num_blocks):
        layout += [
            (f"block{i}.lin1.weight", (h, h)),
            (f"block{i}.lin1.bias", (h,)),
            (f"block{i}.lin2.weight", (h, h)),
            (f"block{i}.lin2.bias", (h,)),
        ]
    layout += [("head.weight", (h, d)), ("head.bias", (d,))]
    return layout


def init_params(spec: DenoiserSpec, seed: int) -> ParamSet:
    """Seeded initialization with zero biases.

    Weights are normal with variance ``1 / fan_in``; the input projection uses the fan-in of
    the whole concat. Class embedding rows have unit expected norm. Residual ``lin2`` weights are
    scaled by ``1 / sqrt(num_blocks)`` and the head by ``HEAD_INIT_SCALE``, which keeps the
    initial prediction near zero.
    """
    rng = make_rng(seed, "model/init")
    concat_dim = spec.data_dim + 2 * spec.embed_dim
    residual_scale = 1.0 / math.sqrt(spec.num_blocks)
    entries = []
    for name, shape in tensor_layout(spec):
        if name.endswith(".bias"):
            value = np.zeros(shape)
        elif name == "class_embed.weight":
            value = rng.standard_normal(shape) / math.sqrt(spec.embed_dim)
        elif name.startswith("input."):
            value = rng.standard_normal(shape) / math.sqrt(concat_dim)
        else:
            value = rng.standard_normal(shape) / math.sqrt(shape[0])
            if ".lin2." in name:
                value *= residual_scale
            elif name == "head.weight":
                value *= HEAD_INIT_SCALE
        entries.append((name, value))
    return ParamSet(entries)

def check_params(params: ParamSet, spec: DenoiserSpec) -> None:
    """Raise DimensionError unless ``params`` matches the architecture's tensor layout."""
    expected = tensor_layout(spec)
    actual = list(zip(params.names, params.shapes))
    if actual != expected:
        for i, (want, got) in enumerate(zip(expected, actual)):
            if want != got:
                raise DimensionError(f"Tensor {i}: expected {want}, got {got}")
        raise DimensionError(f"Expected {len(expected)} tensors, got {len(actual)}")


def silu(x: Array) -> Array:
    return x * expit(x)


def silu_grad(x: Array) -> Array:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def timestep_embedding(t: NDArray[np.int64], dim: int) -> Array:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class _Cache:
    x_t: Array
    labels: NDArray[np.int64]
    t_emb: Array
    c_emb: Array
    block_inputs: list[Array]
    block_pre: list[Array]
    block_act: list[Array]
    h_out: Array


def _check_inputs(x_t: Array, t: NDArray[np.int64], labels: NDArray[np.int64], spec: DenoiserSpec):
    if x_t.ndim != 2 or x_t.shape[1] != spec.data_dim:
        raise DimensionError(f"x_t must be [n, {spec.data_dim}], got {x_t.shape}")
    n = x_t.shape[0]
    if t.shape != (n,) or labels.shape != (n,):
        raise DimensionError(f"t {t.shape} and labels {labels.shape} must both be ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= spec.num_classes):
        raise IndexRangeError(
            f"Class label out of range [0, {spec.num_classes}): "
            f"min {labels.min()}, max {labels.max()}"
        )


def _forward(
    params: ParamSet,
    x_t: Array,
    t: NDArray[np.int64],
    labels: NDArray[np.int64],
    spec: DenoiserSpec,
) -> tuple[Array, _Cache]:
    x_t = np.asarray(x_t, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    _check_inputs(x_t, t, labels, spec)

    t_emb = timestep_embedding(t, spec.embed_dim)
    c_emb = params["class_embed.weight"][labels]

    h = (
        x_t @ params["input.x_proj.weight"]
        + t_emb @ params["input.t_proj.weight"]
        + c_emb @ params["input.c_proj.weight"]
        + params["input.x_proj.bias"]
        + params["input.t_proj.bias"]
        + params["input.c_proj.bias"]
    )
    block_inputs, block_pre, block_act = [], [], []
    for i in range(spec.num_blocks):
        u = h @ params[f"block{i}.lin1.weight"] + params[f"block{i}.lin1.bias"]
        a = silu(u)
        block_inputs.append(h)
        block_pre.append(u)
        block_act.append(a)
        h = h + a @ params[f"block{i}.lin2.weight"] + params[f"block{i}.lin2.bias"]

    out = h @ params["head.weight"] + params["head.bias"]
    cache = _Cache(x_t, labels, t_emb, c_emb, block_inputs, block_pre, block_act, h)
    return out, cache


def _backward(params: ParamSet, cache: _Cache, d_out: Array, spec: DenoiserSpec) -> ParamSet:
    grads: dict[str, Array] = {}
    grads["head.weight"] = cache.h_out.T @ d_out
    grads["head.bias"] = d_out.sum(axis=0)
    dh = d_out @ params["head.weight"].T

    for i in reversed(range(spec.num_blocks)):
        a, u, h_in = cache.block_act[i], cache.block_pre[i], cache.block_inputs[i]
        grads[f"block{i}.lin2.weight"] = a.T @ dh
        grads[f"block{i}.lin2.bias"] = dh.sum(axis=0)
        du = (dh @ params[f"block{i}.lin2.weight"].T) * silu_grad(u)
        grads[f"block{i}.lin1.weight"] = h_in.T @ du
        grads[f"block{i}.lin1.bias"] = du.sum(axis=0)
        dh = dh + du @ params[f"block{i}.lin1.weight"].T

    grads["input.x_proj.weight"] = cache.x_t.T @ dh
    grads["input.t_proj.weight"] = cache.t_emb.T @ dh
    grads["input.c_proj.weight"] = cache.c_emb.T @ dh
    d_bias = dh.sum(axis=0)
    for part in ("x", "t", "c"):
        grads[f"input.{part}_proj.bias"] = d_bias.copy()

    d_cemb = dh @ params["input.c_proj.weight"].T
    d_table = np.zeros_like(params["class_embed.weight"])
    np.add.at(d_table, cache.labels, d_cemb)
    grads["class_embed.weight"] = d_table

    return ParamSet((name, grads[name]) for name in params.names)


def denoiser_forward(
    params: ParamSet,
    x_t: Array,
    t: NDArray[np.int64],
    labels: NDArray[np.int64],
    spec: DenoiserSpec,
) -> Array:
    """Predict the noise ``eps_hat`` for noisy inputs ``x_t`` at steps ``t``."""
    out, _ = _forward(params, x_t, t, labels, spec)
    return out


def noise_prediction_loss(eps: Array, eps_hat: Array) -> float:
    """Mean over samples of the squared L2 residual ``||eps - eps_hat||^2``."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps.shape != eps_hat.shape:
        raise DimensionError(f"eps shape {eps.shape} does not match eps_hat {eps_hat.shape}")
    if eps.shape[0] == 0:
        return 0.0
    return float(np.sum((eps - eps_hat) ** 2) / eps.shape[0])


def diffusion_loss(
    params: ParamSet, batch: Batch, schedule: NoiseSchedule, spec: DenoiserSpec
) -> float:
    """Noise-prediction loss on one batch."""
    x_t = forward_noise(batch.x0, batch.eps, batch.t, schedule)
    eps_hat = denoiser_forward(params, x_t, batch.t, batch.labels, spec)
    return noise_prediction_loss(batch.eps, eps_hat)


def diffusion_loss_and_grad(
    params: ParamSet, batch: Batch, schedule: NoiseSchedule, spec: DenoiserSpec
) -> tuple[float, ParamSet]:
    """Loss and its gradient with respect to every parameter tensor."""
    x_t = forward_noise(batch.x0, batch.eps, batch.t, schedule)
    eps_hat, cache = _forward(params, x_t, batch.t, batch.labels, spec)
    n = len(batch)
    residual = eps_hat - batch.eps
    loss = float(np.sum(residual**2) / n) if n else 0.0
    d_out = (2.0 / n) * residual if n else residual
    return loss, _backward(params, cache, d_out, spec)


def diffusion_grad(
    params: ParamSet, batch: Batch, schedule: NoiseSchedule, spec: DenoiserSpec
) -> ParamSet:
    """Gradient of diffusion_loss, congruent with ``params``."""
    return diffusion_loss_and_grad(params, batch, schedule, spec)[1]
