"""abc-parameterization tables for SP and muP (Adam variant).

Every trainable tensor has a role. For a width multiplier ``m = d_model / d0``
the role fixes three scalars:

* ``a_mult`` - forward multiplier applied to the stored weight,
* ``b_std``  - standard deviation of the Gaussian init,
* ``c_lr``   - factor applied to the base learning rate.

muP with Adam, base std ``sigma0``:

    ============  =======  ===============  =====
    role          a_mult   b_std            c_lr
    ============  =======  ===============  =====
    input-like    1        sigma0           1
    hidden        1        sigma0/sqrt(m)   1/m
    output-like   1/m      sigma0/sqrt(m)   1
    vector-like   1        0 (fill value)   1
    ============  =======  ===============  =====

SP keeps ``a_mult = c_lr = 1`` and uses fan-in init (``sigma0`` scaled by
``1/sqrt(fan_in / fan_in0)``). Both coincide at ``m = 1``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Rng, gaussian_array


class ConfigError(ValueError):
    """Invalid model, scheme, or parameterization configuration."""


class RoleKind(str, enum.Enum):
    INPUT = "input"
    HIDDEN = "hidden"
    OUTPUT = "output"
    VECTOR = "vector"


@dataclass(frozen=True)
class LayerRole:
    kind: RoleKind
    fan_in: int
    fan_out: int
    # deterministic init value for vector-like tensors (1 for gains, 0 for biases)
    fill: float = 0.0

    def __post_init__(self):
        if self.fan_in <= 0 or self.fan_out <= 0:
            raise ConfigError(f"fan dimensions must be positive: {self}")


@dataclass(frozen=True)
class AbcScales:
    a_mult: float
    b_std: float
    c_lr: float


SCHEMES = ("SP", "muP")
ATTN_SCALINGS = ("one_over_sqrt_d", "one_over_d")


@dataclass(frozen=True)
class Scheme:
    name: str = "muP"
    base_width: int = 32
    sigma0: float = 0.02
    attn_scaling: str | None = None
    zero_readout: bool = False

    def __post_init__(self):
        if self.name not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.name!r}; expected one of {SCHEMES}")
        if self.base_width <= 0:
            raise ConfigError(f"base width must be positive, got {self.base_width}")
        if self.sigma0 < 0:
            raise ConfigError(f"sigma0 must be non-negative, got {self.sigma0}")
        expected = "one_over_d" if self.name == "muP" else "one_over_sqrt_d"
        if self.attn_scaling is None:
            object.__setattr__(self, "attn_scaling", expected)
        elif self.attn_scaling != expected:
            raise ConfigError(f"{self.name} requires attn_scaling={expected!r}")

    @property
    def is_mup(self):
        return self.name == "muP"

    def to_dict(self):
        return {
            "name": self.name,
            "base_width": self.base_width,
            "sigma0": self.sigma0,
            "attn_scaling": self.attn_scaling,
            "zero_readout": self.zero_readout,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def width_multiplier(cfg, scheme):
    """``d_model / d0`` for the scheme's base width."""
    if scheme.base_width <= 0:
        raise ConfigError("base width must be positive")
    return cfg.d_model / scheme.base_width


def abc_for(role, scheme, m):
    if m <= 0:
        raise ConfigError(f"width multiplier must be positive, got {m}")
    kind = RoleKind(role.kind)
    s0 = scheme.sigma0
    if kind is RoleKind.VECTOR:
        return AbcScales(1.0, 0.0, 1.0)
    if kind is RoleKind.INPUT:
        return AbcScales(1.0, s0, 1.0)
    if kind is RoleKind.HIDDEN:
        std = s0 / math.sqrt(m)
        return AbcScales(1.0, std, 1.0 / m if scheme.is_mup else 1.0)
    if kind is RoleKind.OUTPUT:
        std = 0.0 if scheme.zero_readout else s0 / math.sqrt(m)
        return AbcScales(1.0 / m if scheme.is_mup else 1.0, std, 1.0)
    raise ConfigError(f"unknown role {role.kind!r}")


def attn_logit_scale(scheme, head_size):
    if head_size <= 0:
        raise ConfigError(f"head size must be positive, got {head_size}")
    if scheme.attn_scaling == "one_over_d":
        return 1.0 / head_size
    return 1.0 / math.sqrt(head_size)


def init_tensor(name, shape, role, scheme, m, seed, dtype=np.float32):
    """Fresh init for one tensor from its own (seed, name) stream."""
    if role.kind is RoleKind.VECTOR:
        return np.full(shape, role.fill, dtype=dtype)
    std = abc_for(role, scheme, m).b_std
    return gaussian_array(Rng.for_name(seed, name), shape, std, dtype)


def init_params(cfg, scheme, seed, dtype=np.float32):
    """Sample every tensor of ``cfg`` under ``scheme``. Returns {name: array}."""
    from .model import param_specs

    m = width_multiplier(cfg, scheme)
    return {
        name: init_tensor(name, shape, role, scheme, m, seed, dtype)
        for name, (shape, role) in param_specs(cfg).items()
    }


def audit_roles(param_names, roles):
    """Raise unless every tensor has exactly one role and vice versa."""
    names = set(param_names)
    missing = sorted(names - set(roles))
    extra = sorted(set(roles) - names)
    if missing or extra:
        raise ConfigError(f"role map incomplete: unassigned={missing} unknown={extra}")
