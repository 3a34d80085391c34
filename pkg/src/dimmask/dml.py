"""Trainable soft dimension mask over embedding columns.

A single trainable scalar per embedding table (`scaled_dim`, the effective
dimension divided by the table width) positions a short linear ramp across
the column indices.  Columns left of the ramp pass through, columns right of
it are shut off, and the ramp itself is soft so the scalar receives
gradients.  During training the mask is pushed through a sharp stochastic
gate so that partially-masked columns are sometimes on and sometimes off;
at eval time the gate is replaced by its closed-form expectation.

All gradients here are hand-derived reverse mode; there is no autodiff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import RngStream, sigmoid, softplus


@dataclass
class MaskState:
    """Per-table mask parameters plus the trainable scalar and its Adam moments."""

    original_dim: int
    scaled_dim: float  # trainable; effective dimension / original_dim
    slope: float = 2.0
    alpha: float = 5.0
    reg_kind: str = "l1"  # "l1" | "l2"
    reg_weight: float = 0.001
    layer_id: int = 0
    adam_m: float = 0.0
    adam_v: float = 0.0
    grad: float = 0.0

    def __post_init__(self):
        if self.original_dim < 1:
            raise ValueError(f"original_dim must be >= 1, got {self.original_dim}")
        if self.slope <= 0:
            raise ValueError(f"slope must be > 0, got {self.slope}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.reg_kind not in ("l1", "l2"):
            raise ValueError(f"regularizer must be 'l1' or 'l2', got {self.reg_kind!r}")
        if self.reg_weight < 0:
            raise ValueError(f"regularizer weight must be >= 0, got {self.reg_weight}")


@dataclass
class GateCache:
    """Everything backward() needs from the matching forward() call."""

    mask: np.ndarray
    premask: np.ndarray
    effective_dim: float
    gate: np.ndarray  # per-element z in train mode, per-column expectation in eval
    inputs: np.ndarray
    draws: Optional[np.ndarray] = None  # None in eval mode; eval is not differentiated


def compute_mask(state: MaskState):
    """Mask over column indices 0..d-1 for the current scalar.

    effective_dim = max(0, scaled_dim * d); column i sits at
    premask_i = (effective_dim - i) / slope, clipped to [0, 1].  The result is
    a non-increasing ramp: ones up to effective_dim - slope, zeros from
    effective_dim on.
    """
    d = state.original_dim
    effective_dim = max(0.0, state.scaled_dim * d)
    premask = (effective_dim - np.arange(d, dtype=np.float64)) / state.slope
    return np.clip(premask, 0.0, 1.0), premask, effective_dim


def sample_gate(mask: np.ndarray, rows: int, alpha: float, stream: RngStream):
    """Stochastic gate z = sigmoid(alpha * (2*mask - y - 0.5)), y ~ U[0,1).

    Fresh draws per call, one per element: a column with mask 0.5 is open
    about half the time, mask 1 is almost always open, mask 0 almost always
    shut but never exactly (the sigmoid never saturates at these arguments).
    """
    draws = stream.uniform((rows, mask.shape[0]))
    gate = sigmoid(alpha * (2.0 * mask[None, :] - draws - 0.5))
    return gate, draws


def expected_gate(mask, alpha):
    """Closed form of E_y[sigmoid(alpha*(2m - y - 0.5))] over y ~ U[0,1].

    Integrating the logistic over the unit interval gives
    (softplus(alpha*(2m - 0.5)) - softplus(alpha*(2m - 1.5))) / alpha.
    """
    m = np.asarray(mask, dtype=np.float64)
    scalar = m.ndim == 0
    m = np.atleast_1d(m)
    out = (softplus(alpha * (2.0 * m - 0.5)) - softplus(alpha * (2.0 * m - 1.5))) / alpha
    return float(out[0]) if scalar else out


def forward(state: MaskState, inputs: np.ndarray, mode: str, stream: Optional[RngStream] = None):
    """Apply the mask to a (rows, original_dim) block.

    Train mode multiplies by a fresh stochastic gate (advances `stream`);
    eval mode multiplies by the deterministic expected gate and draws nothing.
    """
    if inputs.ndim != 2 or inputs.shape[1] != state.original_dim:
        raise ValueError(
            f"expected inputs with {state.original_dim} columns, got shape {inputs.shape}"
        )
    mask, premask, effective_dim = compute_mask(state)
    if mode == "train":
        if stream is None:
            raise ValueError("train-mode forward needs an RngStream")
        gate, draws = sample_gate(mask, inputs.shape[0], state.alpha, stream)
        out = inputs * gate
        return out, GateCache(mask, premask, effective_dim, gate, inputs, draws)
    if mode == "eval":
        gate = expected_gate(mask, state.alpha)
        out = inputs * gate[None, :]
        return out, GateCache(mask, premask, effective_dim, gate, inputs, None)
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def backward(state: MaskState, cache: GateCache, grad_output: np.ndarray):
    """Reverse-mode gradients of the train forward.

    grad_inputs = grad_output * z.
    For the scalar, z depends on the mask only on the open ramp:
      dz/dmask = 2*alpha*z*(1-z),
      dmask/dscalar = d/slope where premask is strictly inside (0,1), else 0,
    and the max(0, .) on effective_dim contributes factor 0 whenever
    scaled_dim * d <= 0 (subgradient 0 at the kink).
    """
    if cache.draws is None:
        raise ValueError("backward requires a train-mode cache")
    z = cache.gate
    grad_inputs = grad_output * z
    ramp = (cache.premask > 0.0) & (cache.premask < 1.0)
    if state.scaled_dim * state.original_dim > 0.0:
        dmask_dscalar = (state.original_dim / state.slope) * ramp.astype(np.float64)
    else:
        dmask_dscalar = np.zeros(state.original_dim)
    dz_dmask = (2.0 * state.alpha) * z * (1.0 - z)
    grad_scalar = float(np.sum(grad_output * cache.inputs * dz_dmask * dmask_dscalar[None, :]))
    return grad_inputs, grad_scalar


def regularization(state: MaskState):
    """(loss, d loss / d scaled_dim) for this mask's size penalty.

    l1: w*|s| with subgradient w*sign(s) (sign(0) = 0); l2: w*s^2, grad 2*w*s.
    """
    w, s = state.reg_weight, state.scaled_dim
    if w == 0.0:
        return 0.0, 0.0
    if state.reg_kind == "l1":
        return w * abs(s), w * float(np.sign(s))
    return w * s * s, 2.0 * w * s


def finalize_dim(state: MaskState) -> int:
    """Discovered width: ceil of the effective dimension, capped at the table width."""
    effective_dim = max(0.0, state.scaled_dim * state.original_dim)
    return int(math.ceil(min(effective_dim, float(state.original_dim))))
