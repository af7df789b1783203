"""Constant-LR Adam training with token and FLOP ledgers.

Protocol: Adam with weight decay 0, no warmup, no gradient clipping, a
constant learning rate scaled per tensor by its ``c_lr``, data served once,
validation on a fixed held-out prefix.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .checkpoint import Checkpoint
from .data import DataExhausted, TokenStream, eval_batches
from .metrics import activation_l1, weight_norms
from .model import param_count
from .tensor import no_grad


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite. Carries the last good checkpoint."""

    def __init__(self, message, checkpoint=None, records=None, diagnostic=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.records = records or []
        self.diagnostic = diagnostic or {}


@dataclass
class TrainConfig:
    learning_rate: float = 2.0**-5
    batch_size: int = 16
    tokens_per_param: float = 20.0
    seed: int = 0
    eval_interval: int | None = None  # steps; default budget/50
    eval_tokens: int | None = None  # default 64 batches
    max_tokens: int | None = None  # explicit token budget, overrides tokens_per_param
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.tokens_per_param > 0:
            raise ValueError("tokens_per_param must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def flops(n_params, n_tokens):
    """Training compute by the 6ND rule."""
    if n_params < 0 or n_tokens < 0:
        raise ValueError("N and D must be non-negative")
    return 6 * n_params * n_tokens


def token_budget(cfg_or_n, ratio, tokens_per_batch=1):
    """``ratio * N`` tokens, rounded down to whole batches."""
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    n = cfg_or_n if isinstance(cfg_or_n, (int, np.integer)) else param_count(cfg_or_n)
    raw = int(math.floor(ratio * n))
    return (raw // tokens_per_batch) * tokens_per_batch


@dataclass
class RunLedger:
    n_params: int
    step: int = 0
    tokens_consumed: int = 0
    cursor: int = 0
    wall_time: float = 0.0
    served: list = field(default_factory=list)

    @property
    def flops(self):
        return flops(self.n_params, self.tokens_consumed)

    def to_dict(self):
        d = asdict(self)
        d["flops"] = self.flops
        return d


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of ``params`` (name -> array); no weight decay.

    ``lrs`` maps each name to its effective learning rate (base lr x c_lr).
    Raises FloatingPointError on a non-finite gradient, naming the tensor.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(np.sum(g, dtype=np.float64)):
            raise FloatingPointError(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        kernels.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
            state.m[name].reshape(-1),
            state.v[name].reshape(-1),
            float(lrs[name]),
            beta1,
            beta2,
            eps,
            bc1,
            bc2,
        )


# ---------------------------------------------------------------- evaluation


def evaluate(model, batches, taps=None):
    """Mean cross-entropy over fixed batches. Fills ``taps`` from the first batch."""
    total = 0.0
    with no_grad():
        for i, (x, y) in enumerate(batches):
            total += model.loss(x, y, taps=taps if i == 0 else None).item()
    return total / len(batches)


def make_eval_set(held_out, block_size, batch_size, eval_tokens=None):
    if eval_tokens is None:
        eval_tokens = 64 * block_size * batch_size
    return eval_batches(held_out, block_size, batch_size, eval_tokens)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list


def _dumps(rec):
    return json.dumps(rec, separators=(",", ":"), allow_nan=False)


def _finite_or_none(x):
    return None if x is None or not math.isfinite(x) else float(x)


def train(model, stream, tc, eval_set, run_id="run", metrics_path=None, meta=None):
    """Train ``model`` on exactly the token budget and return the final checkpoint.

    ``meta`` is copied into every metrics record (e.g. lambda_shrink) and the
    checkpoint. Metrics are written as JSON lines to ``metrics_path`` if given.
    """
    meta = dict(meta or {})
    cfg = model.cfg
    n_params = param_count(cfg)
    tpb = stream.tokens_per_batch
    budget = tc.max_tokens if tc.max_tokens is not None else token_budget(cfg, tc.tokens_per_param, tpb)
    n_steps = budget // tpb
    if stream.remaining() < n_steps * tpb + 1:
        raise DataExhausted(
            f"run needs {n_steps * tpb} unseen tokens; {stream.remaining()} left after offset {stream.cursor}"
        )
    interval = tc.eval_interval or max(1, n_steps // 50)

    ledger = RunLedger(n_params=n_params, cursor=stream.cursor)
    served_before = len(stream.served)
    lrs = {name: tc.learning_rate * c for name, c in model.lr_scales().items()}
    state = AdamState()
    records = []
    start = time.perf_counter()
    out = open(metrics_path, "w") if metrics_path else None

    def snapshot():
        return {k: v.copy() for k, v in model.named_arrays().items()}

    def make_ckpt(tensors):
        ledger.wall_time = time.perf_counter() - start
        ledger.served = [list(iv) for iv in stream.served[served_before:]]
        return Checkpoint(
            model_cfg=cfg,
            scheme=model.scheme,
            tensors=tensors,
            ledger=ledger.to_dict(),
            seeds={"init": tc.seed},
            train_config=tc.to_dict(),
            meta={"run_id": run_id, **meta},
        )

    def record(train_loss):
        taps = {}
        val = evaluate(model, eval_set, taps)
        norms = weight_norms(model.named_arrays())
        rec = {
            "run_id": run_id,
            "step": ledger.step,
            "tokens": ledger.tokens_consumed,
            "flops": ledger.flops,
            "train_loss": _finite_or_none(train_loss),
            "val_loss": _finite_or_none(val),
            "per_layer_act_l1": {k: float(v) for k, v in activation_l1(taps).items()},
            "weight_l1": {k: float(v[0]) for k, v in norms.items()},
            "weight_l2": {k: float(v[1]) for k, v in norms.items()},
            "lr": tc.learning_rate,
            "lambda_shrink": meta.get("lambda_shrink"),
            "scheme": model.scheme.name,
            "width": cfg.d_model,
        }
        records.append(rec)
        if out:
            out.write(_dumps(rec) + "\n")
            out.flush()
        return val

    try:
        if not math.isfinite(record(None)):
            raise TrainingDiverged("non-finite validation loss at init", make_ckpt(snapshot()), records)
        good = snapshot()
        losses = []
        for _ in range(n_steps):
            x, y = stream.next_batch()
            model.zero_grad()
            loss = model.loss(x, y)
            lv = loss.item()
            if not math.isfinite(lv):
                raise TrainingDiverged(
                    f"non-finite training loss at step {ledger.step + 1}",
                    make_ckpt(good),
                    records,
                    {"step": ledger.step + 1, "loss": repr(lv)},
                )
            loss.backward()
            grads = {k: t.grad for k, t in model.params.items()}
            try:
                adam_step(
                    model.named_arrays(), grads, state, lrs, tc.beta1, tc.beta2, tc.adam_eps
                )
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    str(exc), make_ckpt(good), records, {"step": ledger.step + 1}
                ) from exc
            ledger.step += 1
            ledger.tokens_consumed += tpb
            ledger.cursor = stream.cursor
            losses.append(lv)
            if ledger.step % interval == 0 or ledger.step == n_steps:
                val = record(float(np.mean(losses)))
                losses = []
                if not math.isfinite(val):
                    raise TrainingDiverged(
                        f"non-finite validation loss at step {ledger.step}", make_ckpt(good), records
                    )
                good = snapshot()
    finally:
        if out:
            out.close()
    return TrainResult(make_ckpt(snapshot()), records)


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def stream_for(corpus_train, block_size, batch_size, cursor=0, served=None):
    return TokenStream(corpus_train, block_size, batch_size, cursor=cursor, served=list(served or []))
