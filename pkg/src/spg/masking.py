"""Gradient soft-masks, the hard-mask ablation, and blocked-capacity analysis."""

from __future__ import annotations

import numpy as np

from .importance import ImportanceState
from .nn import GradientSet, LayerParams, ShapeError


def _split_mask(mask_flat: np.ndarray, grad: LayerParams) -> tuple[np.ndarray, np.ndarray]:
    if mask_flat.shape != (grad.size,):
        raise ShapeError(f"mask length {mask_flat.shape} != layer size {grad.size}")
    w = mask_flat[: grad.weights.size].reshape(grad.weights.shape)
    return w, mask_flat[grad.weights.size :]


def soft_mask_extractor(grads: GradientSet, state: ImportanceState) -> GradientSet:
    """g' = (1 - gamma) * g per parameter; attenuates, never flips sign."""
    if len(grads.layers) != len(state.per_layer):
        raise ShapeError(f"{len(grads.layers)} gradient layers vs "
                         f"{len(state.per_layer)} importance layers")
    out = []
    for g, gamma in zip(grads.layers, state.per_layer):
        mw, mb = _split_mask(1.0 - gamma, g)
        out.append(LayerParams(mw * g.weights, mb * g.bias))
    return GradientSet(out)


def soft_mask_head(head_grad: LayerParams, mean_importance: float) -> LayerParams:
    """Uniform scaling of the head's gradients by (1 - mean importance)."""
    if not 0.0 <= mean_importance < 1.0:
        raise ValueError(f"mean importance must be in [0, 1), got {mean_importance}")
    scale = 1.0 - mean_importance
    return LayerParams(scale * head_grad.weights, scale * head_grad.bias)


def harden(state: ImportanceState, threshold: float) -> list[np.ndarray]:
    """Binary masks: 1 (block) where gamma > threshold, else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return [(gamma > threshold).astype(np.float64) for gamma in state.per_layer]


def hard_mask_extractor(grads: GradientSet, masks: list[np.ndarray]) -> GradientSet:
    """g' = (1 - mask) * g: fully blocks parameters the masks mark."""
    if len(grads.layers) != len(masks):
        raise ShapeError(f"{len(grads.layers)} gradient layers vs {len(masks)} masks")
    out = []
    for g, mask in zip(grads.layers, masks):
        mw, mb = _split_mask(1.0 - mask, g)
        out.append(LayerParams(mw * g.weights, mb * g.bias))
    return GradientSet(out)


def blocked_fraction(state: ImportanceState, eps: float = 1e-6
                     ) -> tuple[list[float], float]:
    """Fractions of parameters with saturated importance (gamma >= 1 - eps).

    Returns per-layer fractions and the fraction over all extractor
    parameters. Saturation at exactly 1 is a float artifact of tanh, hence
    the eps margin.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    cut = 1.0 - eps
    per_layer = [float((gamma >= cut).mean()) for gamma in state.per_layer]
    sizes = np.array([gamma.size for gamma in state.per_layer], dtype=np.float64)
    total = float(np.dot(per_layer, sizes) / sizes.sum())
    return per_layer, total
