"""Shrink, zero-pad and perturb: initialize a wide model from a narrow one.

For every matrix-like tensor

    target = shrink * pad_zero(base, p, q) + N(0, std^2)

where ``std`` is the target's own fresh-init standard deviation. The noise
comes from the same named stream a fresh ``build`` would use, so
``shrink = 0`` reproduces a fresh init bit for bit.

Vector-like tensors (norm gains, biases) have deterministic defaults and
are anchored instead: new entries get the default, inherited entries move
toward it, ``default + shrink * (base - default)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, param_specs
from .parameterization import RoleKind, abc_for, width_multiplier
from .tensor import Rng, ShapeError, gaussian_array

VECTOR_POLICIES = ("default_anchored",)


class PlanError(ValueError):
    """Base and target models cannot be paired tensor by tensor."""


@dataclass(frozen=True)
class WarmstartConfig:
    lambda_shrink: float = 0.4
    perturb: bool = True
    vector_policy: str = "default_anchored"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lambda_shrink <= 1.0:
            raise ValueError(f"lambda_shrink must lie in [0, 1], got {self.lambda_shrink}")
        if self.vector_policy not in VECTOR_POLICIES:
            raise ValueError(f"unknown vector policy {self.vector_policy!r}")

    def to_dict(self):
        return {
            "lambda_shrink": self.lambda_shrink,
            "perturb": self.perturb,
            "vector_policy": self.vector_policy,
            "seed": self.seed,
        }


def pad_zero(w, p, q=None):
    """Place ``w`` in the top-left corner of a zero array of shape (p, q).

    1-D inputs take only ``p``.
    """
    w = np.asarray(w)
    if w.ndim == 1:
        if p < w.shape[0]:
            raise ShapeError(f"cannot pad length {w.shape[0]} down to {p}")
        out = np.zeros(p, dtype=w.dtype)
        out[: w.shape[0]] = w
        return out
    m, n = w.shape
    if p < m or q < n:
        raise ShapeError(f"cannot pad {m}x{n} to {p}x{q}")
    out = np.zeros((p, q), dtype=w.dtype)
    out[:m, :n] = w
    return out


def build_pad_plan(base_cfg, target_cfg):
    """{name: (base_shape, target_shape, role)} after checking the pair is a width-only growth."""
    for f in ("n_layers", "head_size", "vocab_size", "block_size"):
        if getattr(base_cfg, f) != getattr(target_cfg, f):
            raise PlanError(
                f"{f} differs: base {getattr(base_cfg, f)} vs target {getattr(target_cfg, f)}"
            )
    if target_cfg.d_model < base_cfg.d_model:
        raise PlanError("target must be at least as wide as the base")
    base = param_specs(base_cfg)
    target = param_specs(target_cfg)
    if base.keys() != target.keys():
        raise PlanError("tensor names differ between base and target")
    plan = {}
    for name, (tshape, trole) in target.items():
        bshape, brole = base[name]
        if brole.kind is not trole.kind or brole.fill != trole.fill:
            raise PlanError(f"{name}: role {brole.kind} vs {trole.kind}")
        if len(bshape) != len(tshape) or any(b > t for b, t in zip(bshape, tshape)):
            raise PlanError(f"{name}: base shape {bshape} does not fit in {tshape}")
        if trole.kind is RoleKind.INPUT and bshape[0] != tshape[0]:
            # vocab / positions are not a scaled axis
            raise PlanError(f"{name}: row extent must match ({bshape[0]} vs {tshape[0]})")
        if trole.kind is RoleKind.OUTPUT and bshape[1] != tshape[1]:
            raise PlanError(f"{name}: vocab extent must match ({bshape[1]} vs {tshape[1]})")
        plan[name] = (bshape, tshape, trole)
    return plan


def head_slots(base_cfg, target_cfg):
    """Column range each base head occupies in the target (one whole head each)."""
    hs = target_cfg.head_size
    return [(h * hs, (h + 1) * hs) for h in range(base_cfg.n_heads)]


def warmstart_layer(w_base, target_shape, role, scheme, m, ws, name):
    """Warmstart one tensor. ``m`` is the target's width multiplier."""
    w_base = np.asarray(w_base)
    dtype = w_base.dtype
    target_shape = tuple(target_shape)
    lam = ws.lambda_shrink
    if role.kind is RoleKind.VECTOR:
        if w_base.ndim != 1 or len(target_shape) != 1:
            raise PlanError(f"{name}: vector-like tensors must be 1-D")
        fill = dtype.type(role.fill)
        out = np.full(target_shape, fill, dtype=dtype)
        out[: w_base.shape[0]] = fill + dtype.type(lam) * (w_base - fill)
        return out
    if w_base.ndim != 2 or len(target_shape) != 2:
        raise PlanError(f"{name}: matrix-like tensors must be 2-D")
    out = dtype.type(lam) * pad_zero(w_base, *target_shape)
    if ws.perturb:
        std = abc_for(role, scheme, m).b_std
        out = out + gaussian_array(Rng.for_name(ws.seed, name), target_shape, std, dtype)
    return out


def warmstart_params(base_params, base_cfg, target_cfg, scheme, ws):
    plan = build_pad_plan(base_cfg, target_cfg)
    missing = set(plan) - set(base_params)
    if missing:
        raise PlanError(f"base checkpoint lacks tensors: {sorted(missing)}")
    m = width_multiplier(target_cfg, scheme)
    return {
        name: warmstart_layer(base_params[name], tshape, role, scheme, m, ws, name)
        for name, (_, tshape, role) in plan.items()
    }


def warmstart_model(base_ckpt, target_cfg, scheme, ws):
    """Target model grown from a base checkpoint, and the base run's data cursor.

    Only weights are inherited; the optimizer starts fresh.
    """
    if base_ckpt.scheme != scheme:
        raise PlanError(f"scheme mismatch: base {base_ckpt.scheme} vs target {scheme}")
    params = warmstart_params(base_ckpt.tensors, base_ckpt.model_cfg, target_cfg, scheme, ws)
    return Model(target_cfg, scheme, params), base_ckpt.cursor
