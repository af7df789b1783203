"""Experiment recipes: grid search, muTransfer, warmstarted transfer, shrink
ablation, coordinate checks and successive warmstarting.

Every training run is described by a :class:`RunSpec` whose canonical JSON
hashes to a ``run_id``; a run directory holding ``result.json`` is treated
as complete and reloaded instead of retrained.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .data import Corpus, TokenStream, intervals_disjoint
from .metrics import (
    SLOPE_BLOWUP,
    SLOPE_PASS,
    CoordCheckResult,
    coord_check,
    default_sigma,
    gaussian_smooth,
    weight_norms,
)
from .model import ModelConfig, ScaleLadder, build, param_count
from .parameterization import ConfigError, Scheme
from .train import TrainConfig, TrainingDiverged, flops, make_eval_set, read_metrics, train
from .warmstart import WarmstartConfig, warmstart_model

log = logging.getLogger(__name__)


def _canon(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class RunSpec:
    model_cfg: ModelConfig
    scheme: Scheme
    train: TrainConfig
    start_cursor: int = 0
    warmstart: WarmstartConfig | None = None
    base_run: str | None = None
    label: str = ""

    def to_dict(self):
        return {
            "model_cfg": self.model_cfg.to_dict(),
            "scheme": self.scheme.to_dict(),
            "train": self.train.to_dict(),
            "start_cursor": self.start_cursor,
            "warmstart": None if self.warmstart is None else self.warmstart.to_dict(),
            "base_run": self.base_run,
        }

    @property
    def run_id(self):
        return hashlib.sha256(_canon(self.to_dict()).encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    run_id: str
    path: str
    spec: dict
    status: str
    summary: dict
    label: str = ""
    _records: list | None = field(default=None, repr=False)

    @property
    def records(self):
        if self._records is None:
            self._records = read_metrics(os.path.join(self.path, "metrics.jsonl"))
        return self._records

    @property
    def checkpoint_path(self):
        return os.path.join(self.path, "final.ckpt")

    def checkpoint(self):
        return Checkpoint.load(self.checkpoint_path)

    @property
    def initial_val(self):
        return self.summary["initial_val"]

    @property
    def final_val(self):
        return self.summary["final_val"]

    @property
    def final_smoothed_val(self):
        return self.summary["final_smoothed_val"]


def summarize(records, status, start_cursor, end_cursor, served):
    vals = [r["val_loss"] for r in records]
    if status != "ok" or not vals or any(v is None for v in vals):
        final = math.inf
        smoothed = math.inf
    else:
        final = vals[-1]
        smoothed = gaussian_smooth(vals, default_sigma(len(vals))).smoothed[-1]
    last = records[-1] if records else {"tokens": 0, "flops": 0, "step": 0}
    first_val = records[0]["val_loss"] if records and records[0]["val_loss"] is not None else math.inf
    return {
        "initial_val": first_val,
        "final_val": final,
        "final_smoothed_val": smoothed,
        "tokens": last["tokens"],
        "flops": last["flops"],
        "steps": last["step"],
        "cursor_start": start_cursor,
        "cursor_end": end_cursor,
        "served": served,
    }


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_safe(v) for v in obj]
    return obj


def _json_restore(obj):
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    if isinstance(obj, dict):
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    return obj


class Lab:
    """Owns the corpus, the evaluation set and the run directory tree."""

    def __init__(self, out_dir, corpus=None, block_size=64, eval_batch=16, eval_tokens=None,
                 eval_interval=None, workers=1):
        self.out_dir = os.fspath(out_dir)
        self.workers = max(1, int(workers))
        self._eval_tokens = eval_tokens
        os.makedirs(os.path.join(self.out_dir, "runs"), exist_ok=True)
        self.corpus = corpus if corpus is not None else Corpus.default()
        self.block_size = block_size
        self.eval_batch = eval_batch
        self.eval_set = make_eval_set(self.corpus.held_out, block_size, eval_batch, eval_tokens)
        self.eval_interval = eval_interval

    def config(self, d_model, n_layers=2, head_size=8):
        return ModelConfig.with_width(
            d_model,
            head_size=head_size,
            n_layers=n_layers,
            vocab_size=self.corpus.vocab,
            block_size=self.block_size,
        )

    def run_dir(self, run_id):
        return os.path.join(self.out_dir, "runs", run_id)

    def load(self, run_id):
        path = self.run_dir(run_id)
        with open(os.path.join(path, "result.json")) as f:
            res = _json_restore(json.load(f))
        return RunRecord(run_id, path, res["spec"], res["status"], res["summary"], res.get("label", ""))

    def run(self, spec):
        """Train ``spec`` unless its directory already holds a finished result."""
        rid = spec.run_id
        path = self.run_dir(rid)
        if os.path.exists(os.path.join(path, "result.json")):
            return self.load(rid)
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "spec.json"), "w") as f:
            f.write(_canon(spec.to_dict()))
        tc = spec.train
        if tc.eval_interval is None and self.eval_interval is not None:
            tc = TrainConfig(**{**tc.to_dict(), "eval_interval": self.eval_interval})
        meta = {"lambda_shrink": None, "label": spec.label}
        if spec.warmstart is None:
            model = build(spec.model_cfg, spec.scheme, tc.seed)
            cursor = spec.start_cursor
        else:
            base = Checkpoint.load(os.path.join(self.run_dir(spec.base_run), "final.ckpt"))
            model, cursor = warmstart_model(base, spec.model_cfg, spec.scheme, spec.warmstart)
            meta["lambda_shrink"] = spec.warmstart.lambda_shrink
            meta["base_run"] = spec.base_run
            np.savez(
                os.path.join(path, "init_weight_norms.npz"),
                **{k: np.array(v) for k, v in weight_norms(model.named_arrays()).items()},
            )
        stream = TokenStream(self.corpus.train, model.cfg.block_size, tc.batch_size, cursor=cursor)
        status = "ok"
        metrics_path = os.path.join(path, "metrics.jsonl")
        try:
            res = train(model, stream, tc, self.eval_set, run_id=rid, metrics_path=metrics_path, meta=meta)
            ckpt, records = res.checkpoint, res.records
        except TrainingDiverged as exc:
            log.warning("run %s diverged: %s", rid, exc)
            status = "diverged"
            ckpt, records = exc.checkpoint, exc.records
        ckpt.save(os.path.join(path, "final.ckpt"))
        served = [list(iv) for iv in stream.served]
        summary = summarize(records, status, cursor, stream.cursor, served)
        result = {"spec": spec.to_dict(), "status": status, "summary": summary, "label": spec.label}
        with open(os.path.join(path, "result.json"), "w") as f:
            f.write(_canon(_json_safe(result)))
        return RunRecord(rid, path, result["spec"], status, summary, spec.label, records)

    def run_many(self, specs):
        """Run independent specs, in worker processes when ``workers > 1``.

        Results come back in input order. Each run is deterministic given its
        spec, so the pool size never changes what lands on disk.
        """
        todo = [s for s in specs if not os.path.exists(os.path.join(self.run_dir(s.run_id), "result.json"))]
        if self.workers > 1 and len(todo) > 1:
            from concurrent.futures import ProcessPoolExecutor

            init = (self.out_dir, self.corpus, self.block_size, self.eval_batch, self._eval_tokens,
                    self.eval_interval)
            with ProcessPoolExecutor(min(self.workers, len(todo)), initializer=_worker_init,
                                     initargs=init) as pool:
                list(pool.map(_worker_run, todo))
        return [self.run(s) for s in specs]


_WORKER_LAB = None


def _worker_init(*args):
    global _WORKER_LAB
    _WORKER_LAB = Lab(*args)


def _worker_run(spec):
    return _WORKER_LAB.run(spec).run_id


# ---------------------------------------------------------------- grid search


@dataclass
class GridResult:
    lrs: list
    batches: list
    seeds: list
    # losses[(lr, batch)] -> per-seed final smoothed val loss (inf when diverged)
    losses: dict
    runs: dict
    scheme: str = "muP"
    width: int = 0

    def mean(self, lr, batch):
        return float(np.mean(self.losses[(lr, batch)]))

    @property
    def argmin(self):
        """Best (lr, batch) by seed-mean loss; ties go to the smaller lr."""
        cells = sorted(self.losses, key=lambda c: (self.mean(*c), c[0], c[1]))
        return cells[0]

    @property
    def best_lr(self):
        return self.argmin[0]

    @property
    def best_batch(self):
        return self.argmin[1]

    def best_runs(self):
        return self.runs[self.argmin]

    def boundary_warning(self):
        lr = self.best_lr
        return len(self.lrs) > 1 and lr in (min(self.lrs), max(self.lrs))

    def to_dict(self):
        return {
            "scheme": self.scheme,
            "width": self.width,
            "lrs": self.lrs,
            "batches": self.batches,
            "seeds": self.seeds,
            "cells": [
                {"lr": lr, "batch": b, "losses": self.losses[(lr, b)], "mean": self.mean(lr, b),
                 "runs": [r.run_id for r in self.runs[(lr, b)]]}
                for lr, b in sorted(self.losses)
            ],
            "argmin": {"lr": self.best_lr, "batch": self.best_batch},
            "boundary_warning": self.boundary_warning(),
        }


def grid_search(lab, base_cfg, scheme, lr_grid, batch_grid, seeds, train_defaults=None):
    """Train every (lr, batch, seed) cell at ``base_cfg``; diverged cells score +inf."""
    if not lr_grid or not batch_grid or not seeds:
        raise ConfigError("grid search needs non-empty lr, batch and seed lists")
    td = dict(train_defaults or {})
    cells = [(lr, b) for lr in lr_grid for b in batch_grid]
    specs = [
        RunSpec(base_cfg, scheme, TrainConfig(**{**td, "learning_rate": lr, "batch_size": b, "seed": s}),
                label=f"grid {scheme.name} d={base_cfg.d_model} lr={lr:.4g} b={b} s={s}")
        for lr, b in cells
        for s in seeds
    ]
    done = iter(lab.run_many(specs))
    losses, runs = {}, {}
    for cell in cells:
        runs[cell] = [next(done) for _ in seeds]
        losses[cell] = [r.final_smoothed_val for r in runs[cell]]
    return GridResult(list(lr_grid), list(batch_grid), list(seeds), losses, runs, scheme.name,
                      base_cfg.d_model)


def argmin_step_distance(grid_a, grid_b):
    """Number of grid steps between two grids' argmin learning rates (same lr list)."""
    lrs = sorted(grid_a.lrs)
    return abs(lrs.index(grid_a.best_lr) - lrs.index(grid_b.best_lr))


# ---------------------------------------------------------------- transfer recipes


def mutransfer(lab, grid, target_cfg, scheme, train_defaults=None):
    """Fresh runs at the target width with the base winner's lr and batch (one per seed)."""
    if target_cfg.n_layers != grid.runs[grid.argmin][0].spec["model_cfg"]["n_layers"]:
        raise ConfigError("target is not on the base model's ladder")
    td = dict(train_defaults or {})
    specs = []
    for s in grid.seeds:
        tc = TrainConfig(**{**td, "learning_rate": grid.best_lr, "batch_size": grid.best_batch, "seed": s})
        specs.append(RunSpec(target_cfg, scheme, tc, label=f"mup d={target_cfg.d_model} s={s}"))
    return lab.run_many(specs)


def warmstart_transfer(lab, base_runs, target_cfg, scheme, ws, learning_rate, batch_size,
                       train_defaults=None):
    """One warmstarted run per base run; data resumes after the base run's last token."""
    td = dict(train_defaults or {})
    specs = []
    for base in base_runs:
        if base.status != "ok":
            raise ConfigError(f"base run {base.run_id} did not finish")
        seed = base.spec["train"]["seed"]
        tc = TrainConfig(**{**td, "learning_rate": learning_rate, "batch_size": batch_size, "seed": seed})
        w = WarmstartConfig(ws.lambda_shrink, ws.perturb, ws.vector_policy, seed)
        spec = RunSpec(
            target_cfg,
            scheme,
            tc,
            start_cursor=base.summary["cursor_end"],
            warmstart=w,
            base_run=base.run_id,
            label=f"ws lam={ws.lambda_shrink:g} d={target_cfg.d_model} s={seed}",
        )
        specs.append(spec)
    return lab.run_many(specs)


def paired_vanilla(lab, base_runs, target_cfg, scheme, learning_rate, batch_size, train_defaults=None):
    """Fresh runs paired with ``warmstart_transfer``: same seeds, same target tokens.

    Each run starts where its seed's base run stopped, so the two arms see
    identical training data and a lambda=0 warmstart reproduces it exactly.
    """
    td = dict(train_defaults or {})
    specs = []
    for base in base_runs:
        seed = base.spec["train"]["seed"]
        tc = TrainConfig(**{**td, "learning_rate": learning_rate, "batch_size": batch_size, "seed": seed})
        specs.append(RunSpec(target_cfg, scheme, tc, start_cursor=base.summary["cursor_end"],
                             label=f"vanilla d={target_cfg.d_model} s={seed}"))
    return lab.run_many(specs)


def mean_of(runs, attr):
    return float(np.mean([getattr(r, attr) for r in runs]))


# ---------------------------------------------------------------- coordinate checks


def coord_batches(lab, batch_size, steps, cursor=0):
    """``steps`` training batches plus one probe batch, shared by every width."""
    stream = TokenStream(lab.corpus.train, lab.block_size, batch_size, cursor=cursor)
    batches = [stream.next_batch() for _ in range(steps)]
    probe = lab.eval_set[0]
    return batches, probe


def coordcheck_fresh(lab, widths, scheme, learning_rate, batch_size=16, steps=4, seeds=(0, 1, 2),
                     n_layers=2, cursor=0):
    ladder = ScaleLadder([lab.config(w, n_layers) for w in widths])
    batches, probe = coord_batches(lab, batch_size, steps, cursor)
    return coord_check(ladder, scheme, learning_rate, batches, probe, steps, seeds,
                       label=f"{scheme.name} fresh")


def coordcheck_warmstart(lab, widths, scheme, learning_rate, base_runs, ws, batch_size=16, steps=4,
                         n_layers=2):
    """Coordinate check where every width is warmstarted from the seed's base checkpoint."""
    ladder = ScaleLadder([lab.config(w, n_layers) for w in widths])
    by_seed = {r.spec["train"]["seed"]: r for r in base_runs}
    ckpts = {s: r.checkpoint() for s, r in by_seed.items()}
    cursor = max(r.summary["cursor_end"] for r in base_runs)
    batches, probe = coord_batches(lab, batch_size, steps, cursor)

    def make_model(cfg, seed):
        w = WarmstartConfig(ws.lambda_shrink, ws.perturb, ws.vector_policy, seed)
        model, _ = warmstart_model(ckpts[seed], cfg, scheme, w)
        return model

    return coord_check(ladder, scheme, learning_rate, batches, probe, steps, sorted(by_seed),
                       make_model=make_model, label=f"WS lambda={ws.lambda_shrink:g}")


# ---------------------------------------------------------------- shrink ablation


def shrink_ablation(lab, base_runs, target_cfg, scheme, learning_rate, batch_size, lambdas,
                    coord_widths, train_defaults=None, coord_steps=4):
    rows = []
    for lam in lambdas:
        ws = WarmstartConfig(lambda_shrink=lam)
        runs = warmstart_transfer(lab, base_runs, target_cfg, scheme, ws, learning_rate, batch_size,
                                  train_defaults)
        cc = coordcheck_warmstart(lab, coord_widths, scheme, learning_rate, base_runs, ws,
                                  batch_size=batch_size, steps=coord_steps)
        norms = []
        for base, run in zip(base_runs, runs):
            norms.append({
                "base": _mean_norms(weight_norms(base.checkpoint().tensors)),
                "warmstart_init": _mean_norms(_load_init_norms(run)),
                "trained": _mean_norms(weight_norms(run.checkpoint().tensors)),
            })
        rows.append({
            "lambda_shrink": lam,
            "final_smoothed_val": mean_of(runs, "final_smoothed_val"),
            "initial_val": mean_of(runs, "initial_val"),
            "coord_pass": cc.passes(SLOPE_PASS),
            "coord_max_abs_slope": cc.max_abs_slope([s for s in cc.steps if s >= 1]),
            "weight_norms": norms,
            "runs": [r.run_id for r in runs],
            "coord": cc.to_dict(),
        })
    ranking = sorted(rows, key=lambda r: (r["final_smoothed_val"], r["lambda_shrink"]))
    return {"rows": rows, "ranking": [r["lambda_shrink"] for r in ranking]}


def _load_init_norms(run):
    with np.load(os.path.join(run.path, "init_weight_norms.npz")) as z:
        return {k: tuple(z[k].tolist()) for k in z.files}


def _mean_norms(norms):
    l1 = float(np.mean([v[0] for v in norms.values()]))
    l2 = float(np.mean([v[1] for v in norms.values()]))
    return {"l1": l1, "l2": l2}


# ---------------------------------------------------------------- successive warmstarting


@dataclass
class ChainResult:
    stages: list  # one RunRecord per stage (index 0 is the base)
    total_flops: int
    total_tokens: int
    spikes: list  # per boundary: (initial val of new stage, smoothed final val of previous)
    served: list

    @property
    def final(self):
        return self.stages[-1]


def tokens_for_flops(cfg, flop_budget, tokens_per_batch):
    """Whole batches of training that fit in ``flop_budget`` at this config."""
    n = param_count(cfg)
    per_batch = flops(n, tokens_per_batch)
    return (flop_budget // per_batch) * tokens_per_batch


def successive_warmstart(lab, stage_cfgs, base_run, scheme, ws, learning_rate, batch_size,
                         total_flops, tokens_per_param=20.0, train_defaults=None):
    """Grow through ``stage_cfgs[1:]`` starting from ``base_run`` (trained at stage_cfgs[0]).

    Intermediate stages train ``tokens_per_param`` tokens per parameter; the
    last stage spends whatever of ``total_flops`` is left. Base compute counts
    toward the total.
    """
    widths = [c.d_model for c in stage_cfgs]
    if any(b <= a for a, b in zip(widths, widths[1:])):
        raise ConfigError(f"stage widths must strictly increase: {widths}")
    td = dict(train_defaults or {})
    tpb = lab.block_size * batch_size
    seed = base_run.spec["train"]["seed"]
    stages = [base_run]
    spent = base_run.summary["flops"]
    for i, cfg in enumerate(stage_cfgs[1:], start=1):
        last = i == len(stage_cfgs) - 1
        if last:
            budget = tokens_for_flops(cfg, total_flops - spent, tpb)
        else:
            budget = (int(tokens_per_param * param_count(cfg)) // tpb) * tpb
        if budget <= 0:
            raise ConfigError(f"no compute left for stage {i} (d_model={cfg.d_model})")
        tc = TrainConfig(**{**td, "learning_rate": learning_rate, "batch_size": batch_size,
                            "seed": seed, "max_tokens": budget})
        prev = stages[-1]
        w = WarmstartConfig(ws.lambda_shrink, ws.perturb, ws.vector_policy, seed)
        spec = RunSpec(cfg, scheme, tc, start_cursor=prev.summary["cursor_end"], warmstart=w,
                       base_run=prev.run_id, label=f"succ stage{i} d={cfg.d_model} s={seed}")
        rec = lab.run(spec)
        if rec.status != "ok":
            raise TrainingDiverged(f"stage {i} diverged; completed stages kept", records=rec.records)
        stages.append(rec)
        spent += rec.summary["flops"]
    spikes = [(b.initial_val, a.final_smoothed_val) for a, b in zip(stages, stages[1:])]
    served = [iv for r in stages for iv in r.summary["served"]]
    return ChainResult(stages, spent, sum(r.summary["tokens"] for r in stages), spikes, served)


def chain_is_sub_epoch(served):
    return intervals_disjoint(served)
