"""Compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

Times each hot kernel on desk-scale shapes (batch 16, block 64, width 128,
vocab 256), then one full training step (forward, backward, Adam) and the
corpus generator under each backend. The training step runs in a fresh
interpreter per backend because dispatch is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from muwarm import _kernels_py as py

try:
    from muwarm import _kernels as cy
except ImportError:
    cy = None

B, T, D, V = 16, 64, 128, 256
N = B * T


def cases(dtype=np.float32):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((N, D)).astype(dtype)
    gain = np.ones(D, dtype)
    bias = np.zeros(D, dtype)
    _, mean, rstd = py.layernorm_fwd(x, gain, bias, 1e-5)
    h = rng.standard_normal((N, 4 * D)).astype(dtype)
    _, t = py.gelu_fwd(h)
    scores = rng.standard_normal((B * D // 8, T, T)).astype(dtype)
    p = py.causal_softmax_fwd(scores.copy(), 0.125)
    logits = rng.standard_normal((N, V)).astype(dtype)
    targets = rng.integers(0, V, N)
    _, probs = py.xent_fwd(logits, targets)
    flat = rng.standard_normal(D * D).astype(dtype)
    a, k = 64, 8
    walk = dict(
        out=np.zeros(200_000, np.int64), uniforms=rng.random(200_000),
        bucket_of=rng.integers(0, a * 8, a**3), cand=rng.integers(0, a, (a * 8, k)),
        cand_cdf=np.cumsum(rng.dirichlet(np.ones(k), a * 8), axis=1), uni_cdf=np.cumsum(rng.dirichlet(np.ones(a))),
    )
    return {
        "layernorm_fwd": (x, gain, bias, 1e-5),
        "layernorm_bwd": (x, x, mean, rstd, gain),
        "gelu_fwd": (h,),
        "gelu_bwd": (h, h, t),
        # the fallback masks in place, so each call gets its own copy
        "causal_softmax_fwd": lambda: (scores.copy(), 0.125),
        "causal_softmax_bwd": (p, p, 0.125),
        "xent_fwd": (logits, targets),
        "xent_bwd": (probs, targets, 1.0),
        "embedding_bwd": (x, targets % V, V),
        "adam_update": lambda: (flat.copy(), flat, np.zeros_like(flat), np.zeros_like(flat),
                                1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
        "markov_walk": lambda: (walk["out"].copy(), walk["uniforms"], walk["bucket_of"], walk["cand"],
                                walk["cand_cdf"], walk["uni_cdf"], 0.9, a),
    }


def best_of(fn, args, repeat):
    make = args if callable(args) else (lambda: args)
    times = []
    for _ in range(repeat):
        a = make()
        times.append(timeit.timeit(lambda: fn(*a), number=1))
    return min(times)


STEP_SNIPPET = """
import json, time, numpy as np
from muwarm import kernels
from muwarm.data import TokenStream, synthetic_corpus
from muwarm.model import ModelConfig, build
from muwarm.parameterization import Scheme
from muwarm.train import AdamState, adam_step
t0 = time.perf_counter(); ids = synthetic_corpus(500_000); gen = time.perf_counter() - t0
cfg = ModelConfig.with_width({d}, block_size={t})
scheme = Scheme("muP", base_width=32, sigma0=0.2)
model = build(cfg, scheme, 0)
stream = TokenStream(ids, {t}, {b})
lrs = {{k: 2**-6 * c for k, c in model.lr_scales().items()}}
state = AdamState()
times = []
for i in range({steps}):
    x, y = stream.next_batch()
    t0 = time.perf_counter()
    model.zero_grad()
    model.loss(x, y).backward()
    adam_step(model.named_arrays(), {{k: p.grad for k, p in model.params.items()}}, state, lrs)
    times.append(time.perf_counter() - t0)
print(json.dumps({{"backend": kernels.BACKEND, "step": min(times[1:]), "corpus_500k": gen}}))
"""


def train_step(backend, steps):
    env = dict(os.environ)
    if backend == "python":
        env["MUWARM_PURE_PYTHON"] = "1"
    else:
        env.pop("MUWARM_PURE_PYTHON", None)
    code = STEP_SNIPPET.format(d=D, t=T, b=B, steps=steps)
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    rows = []
    print(f"{'kernel':<20}{'numpy ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, a in cases().items():
        t_py = best_of(getattr(py, name), a, args.repeat)
        fn = getattr(cy, name, None) if cy is not None else None
        t_cy = best_of(fn, a, args.repeat) if fn is not None else None
        rows.append({"kernel": name, "numpy_s": t_py, "cython_s": t_cy})
        cy_txt = "-" if t_cy is None else f"{1e3 * t_cy:.3f}"
        sp = "-" if t_cy is None else f"{t_py / t_cy:.2f}x"
        print(f"{name:<20}{1e3 * t_py:>12.3f}{cy_txt:>12}{sp:>10}")
    steps = {b: train_step(b, args.steps) for b in ("python", "cython")}
    for key, label in (("step", f"train step d={D}"), ("corpus_500k", "corpus 500k tokens")):
        t_py, t_cy = steps["python"][key], steps["cython"][key]
        print(f"{label:<20}{1e3 * t_py:>12.1f}{1e3 * t_cy:>12.1f}{t_py / t_cy:>9.2f}x")
        rows.append({"kernel": label, "numpy_s": t_py, "cython_s": t_cy})
    if steps["cython"]["backend"] != "cython":
        print("note: compiled extension not importable; both columns ran the fallback")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
