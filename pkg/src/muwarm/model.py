"""Decoder-only GPT with pre-norm blocks and parameterization-aware forward.

Attention projections are stored as separate (d, d) matrices with heads laid
out contiguously along the output axis, so growing the width at fixed head
size appends whole heads. All weights are stored as (fan_in, fan_out) and
applied as ``x @ W``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .parameterization import (
    ConfigError,
    LayerRole,
    RoleKind,
    Scheme,
    abc_for,
    attn_logit_scale,
    audit_roles,
    init_params,
    width_multiplier,
)


class InputError(ValueError):
    """Token batch incompatible with the model (too long, bad ids)."""


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    head_size: int = 8
    vocab_size: int = 256
    block_size: int = 128

    def __post_init__(self):
        for f in ("n_layers", "d_model", "n_heads", "head_size", "vocab_size", "block_size"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.d_model != self.n_heads * self.head_size:
            raise ConfigError(
                f"d_model={self.d_model} must equal n_heads*head_size="
                f"{self.n_heads}*{self.head_size}"
            )

    @classmethod
    def with_width(cls, d_model, head_size=8, **kw):
        if d_model % head_size:
            raise ConfigError(f"d_model={d_model} not divisible by head_size={head_size}")
        return cls(d_model=d_model, n_heads=d_model // head_size, head_size=head_size, **kw)

    def widen(self, d_model):
        """Same config at another width (more heads, same head size)."""
        return ModelConfig.with_width(
            d_model,
            head_size=self.head_size,
            n_layers=self.n_layers,
            vocab_size=self.vocab_size,
            block_size=self.block_size,
        )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ScaleLadder:
    """Configs that differ only in width (number of heads)."""

    def __init__(self, configs):
        configs = list(configs)
        if not configs:
            raise ConfigError("empty ladder")
        ref = configs[0]
        for c in configs[1:]:
            if (c.n_layers, c.head_size, c.vocab_size, c.block_size) != (
                ref.n_layers,
                ref.head_size,
                ref.vocab_size,
                ref.block_size,
            ):
                raise ConfigError(f"ladder rung {c} differs from {ref} beyond width")
        widths = [c.d_model for c in configs]
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigError(f"ladder widths must strictly increase: {widths}")
        self.configs = configs

    @classmethod
    def from_widths(cls, base, widths):
        return cls([base.widen(w) for w in widths])

    @property
    def widths(self):
        return [c.d_model for c in self.configs]

    def __iter__(self):
        return iter(self.configs)

    def __len__(self):
        return len(self.configs)


def param_specs(cfg):
    """Ordered {name: (shape, LayerRole)} for every trainable tensor."""
    d, v, f = cfg.d_model, cfg.vocab_size, 4 * cfg.d_model
    hid = RoleKind.HIDDEN
    vec = RoleKind.VECTOR

    specs = {
        "wte": ((v, d), LayerRole(RoleKind.INPUT, v, d)),
        "wpe": ((cfg.block_size, d), LayerRole(RoleKind.INPUT, cfg.block_size, d)),
    }
    for i in range(cfg.n_layers):
        p = f"h.{i}."
        specs[p + "ln1.g"] = ((d,), LayerRole(vec, 1, d, fill=1.0))
        specs[p + "ln1.b"] = ((d,), LayerRole(vec, 1, d))
        for w in ("q", "k", "v", "o"):
            specs[p + f"attn.w{w}"] = ((d, d), LayerRole(hid, d, d))
            specs[p + f"attn.b{w}"] = ((d,), LayerRole(vec, 1, d))
        specs[p + "ln2.g"] = ((d,), LayerRole(vec, 1, d, fill=1.0))
        specs[p + "ln2.b"] = ((d,), LayerRole(vec, 1, d))
        specs[p + "mlp.w1"] = ((d, f), LayerRole(hid, d, f))
        specs[p + "mlp.b1"] = ((f,), LayerRole(vec, 1, f))
        specs[p + "mlp.w2"] = ((f, d), LayerRole(hid, f, d))
        specs[p + "mlp.b2"] = ((d,), LayerRole(vec, 1, d))
    specs["lnf.g"] = ((d,), LayerRole(vec, 1, d, fill=1.0))
    specs["lnf.b"] = ((d,), LayerRole(vec, 1, d))
    specs["wout"] = ((d, v), LayerRole(RoleKind.OUTPUT, d, v))
    return specs


def param_count(cfg):
    return sum(int(np.prod(shape)) for shape, _ in param_specs(cfg).values())


def tap_names(cfg):
    return ["embed"] + [f"block{i}" for i in range(cfg.n_layers)] + ["logits"]


class Model:
    """Parameter store plus forward pass for one (config, scheme)."""

    def __init__(self, cfg, scheme, params, dtype=np.float32):
        self.cfg = cfg
        self.scheme = scheme
        specs = param_specs(cfg)
        audit_roles(params.keys(), specs)
        self.roles = {name: role for name, (_, role) in specs.items()}
        self.m = width_multiplier(cfg, scheme)
        self.abc = {name: abc_for(role, scheme, self.m) for name, role in self.roles.items()}
        self.attn_scale = attn_logit_scale(scheme, cfg.head_size)
        self.params = {}
        for name, (shape, _) in specs.items():
            arr = np.ascontiguousarray(params[name], dtype=dtype)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            self.params[name] = T.Tensor(arr, requires_grad=True, name=name)

    @property
    def dtype(self):
        return self.params["wte"].dtype

    def named_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def lr_scales(self):
        return {name: s.c_lr for name, s in self.abc.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def _w(self, name):
        t = self.params[name]
        a = self.abc[name].a_mult
        return t if a == 1.0 else T.scale(t, a)

    def forward(self, tokens, taps=None):
        """Logits (B, T, V). If ``taps`` is a dict it is filled with activations."""
        cfg = self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be (B, T), got shape {tokens.shape}")
        b, t = tokens.shape
        if t > cfg.block_size:
            raise InputError(f"sequence length {t} exceeds block size {cfg.block_size}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise InputError(f"token ids must be in [0, {cfg.vocab_size})")
        h, hs = cfg.n_heads, cfg.head_size
        d = cfg.d_model
        w = self._w

        x = T.add(T.embedding(w("wte"), tokens), T.embedding(w("wpe"), np.arange(t)))
        if taps is not None:
            taps["embed"] = x.data
        for i in range(cfg.n_layers):
            p = f"h.{i}."
            a = T.layer_norm(x, w(p + "ln1.g"), w(p + "ln1.b"))

            def heads(z):
                return T.transpose(T.reshape(z, (b, t, h, hs)), (0, 2, 1, 3))

            q = heads(T.add(T.matmul(a, w(p + "attn.wq")), w(p + "attn.bq")))
            k = heads(T.add(T.matmul(a, w(p + "attn.wk")), w(p + "attn.bk")))
            v = heads(T.add(T.matmul(a, w(p + "attn.wv")), w(p + "attn.bv")))
            att = T.causal_softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.attn_scale)
            y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
            x = T.add(x, T.add(T.matmul(y, w(p + "attn.wo")), w(p + "attn.bo")))

            a = T.layer_norm(x, w(p + "ln2.g"), w(p + "ln2.b"))
            u = T.gelu(T.add(T.matmul(a, w(p + "mlp.w1")), w(p + "mlp.b1")))
            x = T.add(x, T.add(T.matmul(u, w(p + "mlp.w2")), w(p + "mlp.b2")))
            if taps is not None:
                taps[f"block{i}"] = x.data

        x = T.layer_norm(x, w("lnf.g"), w("lnf.b"))
        logits = T.matmul(x, w("wout"))
        if taps is not None:
            taps["logits"] = logits.data
        return logits

    def loss(self, tokens, targets, taps=None):
        logits = self.forward(tokens, taps)
        v = self.cfg.vocab_size
        return T.softmax_cross_entropy(T.reshape(logits, (-1, v)), np.asarray(targets).reshape(-1))


def build(cfg, scheme, seed, dtype=np.float32):
    """Fresh model with every tensor drawn from its own named stream."""
    if not isinstance(scheme, Scheme):
        raise ConfigError("scheme must be a Scheme")
    return Model(cfg, scheme, init_params(cfg, scheme, seed, dtype), dtype=dtype)
