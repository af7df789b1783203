"""Named desk recipes.

Each recipe takes a :class:`DeskConfig` and a :class:`~muwarm.experiments.Lab`,
runs (or reloads) its DAG of training runs, writes ``<out>/<recipe>.json`` and
returns an :class:`Outcome` holding the recipe's acceptance assertions. The
CLI exits 0 iff every assertion holds.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

from .data import Corpus, intervals_disjoint
from .experiments import (
    Lab,
    RunSpec,
    argmin_step_distance,
    coordcheck_fresh,
    coordcheck_warmstart,
    grid_search,
    mean_of,
    mutransfer,
    paired_vanilla,
    shrink_ablation,
    successive_warmstart,
    tokens_for_flops,
    warmstart_transfer,
)
from .metrics import SLOPE_BLOWUP, SLOPE_PASS
from .model import param_count
from .parameterization import ConfigError, Scheme
from .train import TrainConfig, flops, read_metrics
from .warmstart import WarmstartConfig

RECIPES = ("train", "grid", "transfer", "warmstart", "ablate", "succ", "coordcheck", "report")

# final-loss slack for warmstart against vanilla muP at equal target budget
WARMSTART_SLACK = 0.05
# vanilla muP with a zero readout starts at the uniform loss ln V
UNIFORM_TOL = 1e-3


@dataclass
class DeskConfig:
    """Everything a recipe needs; JSON config files override these defaults."""

    # corpus: a file path, or the bundled synthetic generator
    corpus: str | None = None
    corpus_tokens: int = 20_000_000
    corpus_seed: int = 0
    block_size: int = 64
    eval_batch: int = 16
    eval_tokens: int = 8 * 1024
    eval_points: int = 25
    workers: int = 1
    # model ladder
    n_layers: int = 2
    head_size: int = 8
    base_width: int = 32
    target_width: int = 128
    sigma0: float = 0.2
    zero_readout: bool = True
    scheme: str = "muP"
    # optimisation
    lr_log2: list = field(default_factory=lambda: [-4, -5, -6, -7, -8, -9])
    batch_grid: list = field(default_factory=lambda: [16])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    grid_batches: int = 200
    tokens_per_param: float = 20.0
    target_batches: int = 600
    # warmstart
    lambda_shrink: float = 0.4
    perturb: bool = True
    ablate_lambdas: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    # coordinate checks
    coord_widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    coord_steps: int = 4
    coord_lambdas: list = field(default_factory=lambda: [0.2, 0.4, 0.6])
    coord_violate_lambda: float = 1.0
    # successive warmstarting; the FLOP budget is that of a vanilla target run
    succ_widths: list = field(default_factory=lambda: [32, 64, 128])
    succ_budget_batches: int = 1200
    # single training run (``train`` recipe)
    width: int = 32
    learning_rate: float = 2.0**-6
    batch_size: int = 16
    train_batches: int = 200
    # report
    concat_base: bool = False
    runs: list | None = None

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return asdict(self)

    @property
    def lrs(self):
        return [2.0**k for k in self.lr_log2]

    def make_scheme(self, name=None):
        return Scheme(name or self.scheme, base_width=self.base_width, sigma0=self.sigma0,
                      zero_readout=self.zero_readout)

    def tokens_per_batch(self, batch_size=None):
        return self.block_size * (batch_size or self.batch_grid[0])

    def train_defaults(self, n_batches):
        return {"max_tokens": n_batches * self.tokens_per_batch(),
                "eval_interval": max(1, n_batches // self.eval_points)}

    def make_lab(self, out_dir, corpus=None):
        if corpus is None:
            if self.corpus:
                corpus = Corpus.from_file(self.corpus)
            else:
                corpus = Corpus.default(self.corpus_tokens, self.corpus_seed)
        return Lab(out_dir, corpus, block_size=self.block_size, eval_batch=self.eval_batch,
                   eval_tokens=self.eval_tokens, workers=self.workers)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self):
        tail = f": {self.detail}" if self.detail else ""
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}{tail}"


@dataclass
class Outcome:
    recipe: str
    checks: list
    data: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def to_dict(self):
        return {"recipe": self.recipe, "passed": self.passed,
                "checks": [asdict(c) for c in self.checks], "data": self.data}


def _f(x, nd=4):
    return "inf" if not math.isfinite(x) else f"{x:.{nd}f}"


def _save(lab, name, payload):
    path = os.path.join(lab.out_dir, f"{name}.json")
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True, default=str)
        f.write("\n")
    return path


def _finish(lab, outcome):
    _save(lab, outcome.recipe, outcome.to_dict())
    return outcome


# ---------------------------------------------------------------- building blocks


def base_grid(cfg, lab, width=None, scheme_name="muP", n_batches=None):
    sch = cfg.make_scheme(scheme_name)
    return grid_search(lab, lab.config(width or cfg.base_width, cfg.n_layers, cfg.head_size), sch,
                       cfg.lrs, cfg.batch_grid, cfg.seeds, cfg.train_defaults(n_batches or cfg.grid_batches))


def base_runs(cfg, lab, grid=None):
    """Width-``base_width`` muP runs at the grid's winning lr, trained to ``tokens_per_param``.

    These checkpoints are the warmstart bases. The grid itself is ranked at a
    short fixed budget, so the winner is retrained to its full budget here.
    """
    grid = grid or base_grid(cfg, lab)
    base_cfg = lab.config(cfg.base_width, cfg.n_layers, cfg.head_size)
    tpb = cfg.tokens_per_batch(grid.best_batch)
    budget = (int(cfg.tokens_per_param * param_count(base_cfg)) // tpb) * tpb
    n_batches = budget // tpb
    specs = [
        RunSpec(base_cfg, cfg.make_scheme("muP"),
                TrainConfig(grid.best_lr, grid.best_batch, seed=s, max_tokens=budget,
                            eval_interval=max(1, n_batches // cfg.eval_points)),
                label=f"base d={cfg.base_width} s={s}")
        for s in cfg.seeds
    ]
    return grid, lab.run_many(specs)


def ws_config(cfg):
    return WarmstartConfig(cfg.lambda_shrink, cfg.perturb)


# ---------------------------------------------------------------- recipes


def recipe_train(cfg, lab):
    sch = cfg.make_scheme()
    mcfg = lab.config(cfg.width, cfg.n_layers, cfg.head_size)
    td = {"max_tokens": cfg.train_batches * cfg.block_size * cfg.batch_size,
          "eval_interval": max(1, cfg.train_batches // cfg.eval_points)}
    seed = cfg.seeds[0]
    rec = lab.run(RunSpec(mcfg, sch, TrainConfig(cfg.learning_rate, cfg.batch_size, seed=seed, **td),
                          label=f"train d={cfg.width} s={seed}"))
    n = param_count(mcfg)
    exact = all(r["flops"] == flops(n, r["tokens"]) for r in read_metrics(os.path.join(rec.path, "metrics.jsonl")))
    checks = [
        Check("run finished", rec.status == "ok", rec.status),
        Check("flops = 6ND at every record", exact, f"N={n}"),
        Check("final loss finite", math.isfinite(rec.final_val), _f(rec.final_val)),
    ]
    return _finish(lab, Outcome("train", checks, {"run": rec.run_id, "summary": rec.summary}))


def recipe_grid(cfg, lab):
    g = base_grid(cfg, lab, scheme_name=cfg.scheme)
    checks = [
        Check("argmin finite", math.isfinite(g.mean(*g.argmin)),
              f"lr=2^{math.log2(g.best_lr):g} batch={g.best_batch} loss={_f(g.mean(*g.argmin))}"
              + (" (boundary warning)" if g.boundary_warning() else "")),
    ]
    return _finish(lab, Outcome("grid", checks, {"grid": g.to_dict()}))


def recipe_transfer(cfg, lab):
    """muTransfer: argmin lr at the base width vs a direct grid at the target width."""
    grids = {}
    for name in ("muP", "SP"):
        for w in (cfg.base_width, cfg.target_width):
            grids[(name, w)] = base_grid(cfg, lab, width=w, scheme_name=name)
    mu = argmin_step_distance(grids[("muP", cfg.base_width)], grids[("muP", cfg.target_width)])
    sp = argmin_step_distance(grids[("SP", cfg.base_width)], grids[("SP", cfg.target_width)])

    def where(g):
        return f"2^{math.log2(g.best_lr):g}"

    b, t = cfg.base_width, cfg.target_width
    checks = [
        Check("muP argmin transfers within one grid step", mu <= 1,
              f"d={b} {where(grids[('muP', b)])}, d={t} {where(grids[('muP', t)])}, distance {mu}"),
        Check("SP argmin shifts by at least one step", sp >= 1,
              f"d={b} {where(grids[('SP', b)])}, d={t} {where(grids[('SP', t)])}, distance {sp}"),
    ]
    transferred = mutransfer(lab, grids[("muP", b)], lab.config(t, cfg.n_layers, cfg.head_size),
                             cfg.make_scheme("muP"), cfg.train_defaults(cfg.grid_batches))
    data = {f"{k[0]}_{k[1]}": g.to_dict() for k, g in grids.items()}
    data["transferred_runs"] = [r.run_id for r in transferred]
    return _finish(lab, Outcome("transfer", checks, data))


def warmstart_pair(cfg, lab, ws=None):
    """Base runs, then vanilla muP and warmstarted target runs at equal target budget."""
    grid, bases = base_runs(cfg, lab)
    target = lab.config(cfg.target_width, cfg.n_layers, cfg.head_size)
    sch = cfg.make_scheme("muP")
    td = cfg.train_defaults(cfg.target_batches)
    vanilla = paired_vanilla(lab, bases, target, sch, grid.best_lr, grid.best_batch, td)
    warm = warmstart_transfer(lab, bases, target, sch, ws or ws_config(cfg), grid.best_lr, grid.best_batch, td)
    return grid, bases, vanilla, warm


def recipe_warmstart(cfg, lab):
    grid, bases, vanilla, warm = warmstart_pair(cfg, lab)
    ln_v = math.log(lab.corpus.vocab)
    v0, w0 = mean_of(vanilla, "initial_val"), mean_of(warm, "initial_val")
    vf, wf = mean_of(vanilla, "final_smoothed_val"), mean_of(warm, "final_smoothed_val")
    sub_epoch = all(intervals_disjoint(b.summary["served"] + w.summary["served"]) for b, w in zip(bases, warm))
    checks = [
        Check("vanilla initial loss is ln V", all(abs(r.initial_val - ln_v) <= UNIFORM_TOL for r in vanilla),
              f"mean {_f(v0)} vs {_f(ln_v)}"),
        Check("warmstart initial loss below vanilla", w0 < v0, f"{_f(w0)} < {_f(v0)}"),
        Check(f"warmstart final within {WARMSTART_SLACK} nats of vanilla", wf <= vf + WARMSTART_SLACK,
              f"{_f(wf)} vs {_f(vf)}"),
        Check("warmstart never repeats base tokens", sub_epoch, ""),
    ]
    data = {
        "base_lr": grid.best_lr, "batch": grid.best_batch,
        "bases": [r.run_id for r in bases], "vanilla": [r.run_id for r in vanilla],
        "warmstart": [r.run_id for r in warm],
        "initial": {"vanilla": v0, "warmstart": w0}, "final": {"vanilla": vf, "warmstart": wf},
    }
    return _finish(lab, Outcome("warmstart", checks, data))


def recipe_ablate(cfg, lab):
    grid, bases = base_runs(cfg, lab)
    target = lab.config(cfg.target_width, cfg.n_layers, cfg.head_size)
    sch = cfg.make_scheme("muP")
    td = cfg.train_defaults(cfg.target_batches)
    res = shrink_ablation(lab, bases, target, sch, grid.best_lr, grid.best_batch, cfg.ablate_lambdas,
                          cfg.coord_widths, td, cfg.coord_steps)
    rows = {r["lambda_shrink"]: r for r in res["rows"]}
    checks = []
    if 0.4 in rows:
        checks.append(Check("lambda 0.4 passes the coordinate check", rows[0.4]["coord_pass"],
                            f"max |slope| {_f(rows[0.4]['coord_max_abs_slope'], 3)}"))
    if 1.0 in rows:
        checks.append(Check("lambda 1.0 fails the coordinate check", not rows[1.0]["coord_pass"],
                            f"max |slope| {_f(rows[1.0]['coord_max_abs_slope'], 3)}"))
    if 0.0 in rows:
        vanilla = paired_vanilla(lab, bases, target, sch, grid.best_lr, grid.best_batch, td)
        same = [
            read_metrics(os.path.join(lab.run_dir(w), "metrics.jsonl"))
            for w in rows[0.0]["runs"]
        ]
        ref = [read_metrics(os.path.join(v.path, "metrics.jsonl")) for v in vanilla]
        dup = all(
            [r["val_loss"] for r in a] == [r["val_loss"] for r in b] for a, b in zip(same, ref)
        )
        checks.append(Check("lambda 0 reproduces vanilla muP", dup, ""))
    return _finish(lab, Outcome("ablate", checks, res))


def recipe_coordcheck(cfg, lab):
    """Fresh muP, fresh SP and warmstarted ladders at the muP grid winner's lr."""
    grid, bases = base_runs(cfg, lab)
    lr, batch = grid.best_lr, grid.best_batch
    kw = dict(batch_size=batch, steps=cfg.coord_steps, n_layers=cfg.n_layers)
    results = {"muP": coordcheck_fresh(lab, cfg.coord_widths, cfg.make_scheme("muP"), lr, seeds=cfg.seeds, **kw),
               "SP": coordcheck_fresh(lab, cfg.coord_widths, cfg.make_scheme("SP"), lr, seeds=cfg.seeds, **kw)}
    for lam in [*cfg.coord_lambdas, cfg.coord_violate_lambda]:
        results[f"ws{lam:g}"] = coordcheck_warmstart(lab, cfg.coord_widths, cfg.make_scheme("muP"), lr, bases,
                                                     WarmstartConfig(lam, cfg.perturb), **kw)
    os.makedirs(os.path.join(lab.out_dir, "coordcheck"), exist_ok=True)
    for key, cc in results.items():
        with open(os.path.join(lab.out_dir, "coordcheck", f"{key}.json"), "w") as f:
            f.write(cc.to_json())

    def steps(cc):
        return [s for s in cc.steps if s >= 1]

    def worst(cc):
        v = cc.violations(SLOPE_PASS)
        return f"max |slope| {_f(cc.max_abs_slope(steps(cc)), 3)}" + (
            "; violations " + ", ".join(f"{l}@{s}={x:+.2f}" for l, s, x in v) if v else "")

    mu = results["muP"]
    sp = results["SP"]
    sp_logits = max(sp.slopes["logits"][s] for s in steps(sp))
    checks = [Check(f"muP |slope| <= {SLOPE_PASS}", mu.passes(SLOPE_PASS), worst(mu)),
              Check(f"SP logits slope >= {SLOPE_BLOWUP} at some step", sp_logits >= SLOPE_BLOWUP,
                    f"max logits slope {_f(sp_logits, 3)}")]
    for lam in cfg.coord_lambdas:
        cc = results[f"ws{lam:g}"]
        checks.append(Check(f"warmstart lambda {lam:g} |slope| <= {SLOPE_PASS}", cc.passes(SLOPE_PASS), worst(cc)))
    viol = results[f"ws{cfg.coord_violate_lambda:g}"]
    checks.append(Check(f"warmstart lambda {cfg.coord_violate_lambda:g} violates the bound",
                        not viol.passes(SLOPE_PASS), worst(viol)))
    data = {"learning_rate": lr, "batch": batch, "results": {k: v.to_dict() for k, v in results.items()}}
    return _finish(lab, Outcome("coordcheck", checks, data))


def successive_trio(cfg, lab):
    """Successive chain, single warmstart and vanilla muP at one shared FLOP budget (first seed)."""
    grid, bases = base_runs(cfg, lab)
    base = bases[0]
    sch = cfg.make_scheme("muP")
    stage_cfgs = [lab.config(w, cfg.n_layers, cfg.head_size) for w in cfg.succ_widths]
    target = stage_cfgs[-1]
    tpb = cfg.tokens_per_batch(grid.best_batch)
    total = flops(param_count(target), cfg.succ_budget_batches * tpb)
    eval_pts = cfg.eval_points
    ws = ws_config(cfg)

    def td(tokens):
        return {"eval_interval": max(1, tokens // tpb // eval_pts)}

    # intermediate stage budgets follow tokens_per_param; the eval schedule is per stage
    chain = successive_warmstart(lab, stage_cfgs, base, sch, ws, grid.best_lr, grid.best_batch, total,
                                 cfg.tokens_per_param, {"eval_interval": max(1, cfg.target_batches // eval_pts)})
    single_tokens = tokens_for_flops(target, total - base.summary["flops"], tpb)
    single = warmstart_transfer(lab, [base], target, sch, ws, grid.best_lr, grid.best_batch,
                                {"max_tokens": single_tokens, **td(single_tokens)})[0]
    van_tokens = cfg.succ_budget_batches * tpb
    vanilla = paired_vanilla(lab, [base], target, sch, grid.best_lr, grid.best_batch,
                             {"max_tokens": van_tokens, **td(van_tokens)})[0]
    return chain, base, single, vanilla, total


def recipe_succ(cfg, lab):
    chain, base, single, vanilla, total = successive_trio(cfg, lab)
    t_succ = chain.total_tokens
    t_single = base.summary["tokens"] + single.summary["tokens"]
    t_van = vanilla.summary["tokens"]
    f_single = base.summary["flops"] + single.summary["flops"]
    spikes_ok = all(a > b for a, b in chain.spikes)
    checks = [
        Check("chain completes", len(chain.stages) == len(cfg.succ_widths), f"{len(chain.stages)} stages"),
        Check("tokens: successive > single warmstart > vanilla", t_succ > t_single > t_van,
              f"{t_succ} > {t_single} > {t_van}"),
        Check("equal total FLOPs", max(chain.total_flops, f_single, vanilla.summary["flops"]) <= total,
              f"budget {total:.4g}; successive {chain.total_flops:.4g}, single {f_single:.4g}, "
              f"vanilla {vanilla.summary['flops']:.4g}"),
        Check("loss spike at each stage boundary", spikes_ok,
              "; ".join(f"{a:.3f} > {b:.3f}" for a, b in chain.spikes)),
        Check("token offsets never repeat", intervals_disjoint(chain.served), ""),
    ]
    data = {"stages": [r.run_id for r in chain.stages], "single": single.run_id, "vanilla": vanilla.run_id,
            "flop_budget": total, "tokens": {"successive": t_succ, "single": t_single, "vanilla": t_van},
            "spikes": chain.spikes}
    return _finish(lab, Outcome("succ", checks, data))


def recipe_report(cfg, lab):
    from .report import write_report

    rep = write_report(lab.out_dir, run_ids=cfg.runs, concat_base=cfg.concat_base)
    checks = [Check("report written", os.path.exists(rep.index), f"{len(rep.present)} runs, "
                    f"{len(rep.absent)} absent")]
    return _finish(lab, Outcome("report", checks, {"index": rep.index, "absent": rep.absent}))


def run_recipe(name, cfg, lab):
    fn = {
        "train": recipe_train, "grid": recipe_grid, "transfer": recipe_transfer,
        "warmstart": recipe_warmstart, "ablate": recipe_ablate, "succ": recipe_succ,
        "coordcheck": recipe_coordcheck, "report": recipe_report,
    }.get(name)
    if fn is None:
        raise ConfigError(f"unknown recipe {name!r}; expected one of {RECIPES}")
    return fn(cfg, lab)
