"""Training-dynamics diagnostics: activation and weight norms, smoothing, coord checks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

# Acceptance constants for coordinate checks: |slope| of log mean-|activation|
# against log width. Below PASS is "width-stable"; SP must reach BLOWUP on the logits.
SLOPE_PASS = 0.25
SLOPE_BLOWUP = 0.5


def activation_l1(taps):
    """Mean absolute value of every tapped activation."""
    return {name: float(np.mean(np.abs(a), dtype=np.float64)) for name, a in taps.items()}


def weight_norms(arrays):
    """{name: (mean |w|, sqrt(mean w^2))} for each tensor."""
    out = {}
    for name, w in arrays.items():
        w = np.asarray(w, dtype=np.float64)
        out[name] = (float(np.mean(np.abs(w))), float(np.sqrt(np.mean(w * w))))
    return out


@dataclass
class SmoothedSeries:
    steps: list
    raw: list
    sigma: float
    smoothed: list


def gaussian_kernel(sigma):
    """Discrete Gaussian truncated at +-3 sigma and normalized to sum 1."""
    if sigma <= 0:
        return np.ones(1)
    r = int(math.ceil(3 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(values, sigma, steps=None):
    """Smooth a series with a Gaussian kernel; boundaries are mirror-reflected.

    ``sigma`` is in samples. ``sigma == 0`` returns the series unchanged.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    v = np.asarray(values, dtype=np.float64)
    steps = list(range(len(v))) if steps is None else list(steps)
    if sigma == 0 or len(v) == 0:
        return SmoothedSeries(steps, v.tolist(), float(sigma), v.tolist())
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    # symmetric reflection (edge sample repeated); np.pad "symmetric" handles r > n too
    padded = np.pad(v, r, mode="symmetric")
    sm = np.convolve(padded, k, mode="valid")
    return SmoothedSeries(steps, v.tolist(), float(sigma), sm.tolist())


def default_sigma(n):
    """Default smoothing width: 2% of the series length."""
    return 0.02 * n


def fit_slope(widths, values):
    """Least-squares slope of log(value) against log(width)."""
    x = np.log(np.asarray(widths, dtype=np.float64))
    y = np.log(np.asarray(values, dtype=np.float64))
    xc = x - x.mean()
    return float(np.dot(xc, y - y.mean()) / np.dot(xc, xc))


# ---------------------------------------------------------------- coordinate checks


@dataclass
class CoordCheckResult:
    widths: list
    steps: list
    layers: list
    # norms[layer][step] -> list over widths (mean over seeds)
    norms: dict
    # slopes[layer][step]
    slopes: dict
    failures: list = field(default_factory=list)
    label: str = ""

    def max_abs_slope(self, steps=None, layers=None):
        steps = self.steps if steps is None else steps
        layers = self.layers if layers is None else layers
        return max(abs(self.slopes[l][s]) for l in layers for s in steps)

    def passes(self, bound=SLOPE_PASS, steps=None):
        """True iff every (layer, step) slope is within ``bound`` and nothing failed."""
        steps = [s for s in self.steps if s >= 1] if steps is None else steps
        return not self.failures and self.max_abs_slope(steps) <= bound

    def violations(self, bound=SLOPE_PASS, steps=None):
        steps = [s for s in self.steps if s >= 1] if steps is None else steps
        return [
            (l, s, self.slopes[l][s])
            for l in self.layers
            for s in steps
            if not abs(self.slopes[l][s]) <= bound
        ]

    def to_dict(self):
        return {
            "label": self.label,
            "widths": self.widths,
            "steps": self.steps,
            "layers": self.layers,
            "norms": {l: {str(s): v for s, v in d.items()} for l, d in self.norms.items()},
            "slopes": {l: {str(s): v for s, v in d.items()} for l, d in self.slopes.items()},
            "failures": self.failures,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        return cls(
            widths=d["widths"],
            steps=d["steps"],
            layers=d["layers"],
            norms={l: {int(s): v for s, v in x.items()} for l, x in d["norms"].items()},
            slopes={l: {int(s): v for s, v in x.items()} for l, x in d["slopes"].items()},
            failures=d.get("failures", []),
            label=d.get("label", ""),
        )


def coord_check(ladder, scheme, learning_rate, batches, probe, steps=4, seeds=(0, 1, 2),
                make_model=None, label=""):
    """Short trainings across a width ladder, recording per-layer activation L1.

    Every width sees the same ``batches`` (one per optimizer step) and is
    probed on the same ``probe`` batch after 0..``steps`` updates.
    ``make_model(cfg, seed)`` builds the starting model; it defaults to a
    fresh init under ``scheme``. Slopes are fitted to the seed-averaged norms.
    """
    from .model import build, tap_names
    from .tensor import no_grad
    from .train import AdamState, adam_step

    if len(ladder) < 3:
        raise ValueError("coordinate checks need at least three widths")
    if len(batches) < steps:
        raise ValueError(f"need {steps} batches, got {len(batches)}")
    if make_model is None:
        def make_model(cfg, seed):
            return build(cfg, scheme, seed)

    widths = ladder.widths
    layers = tap_names(ladder.configs[0])
    step_ids = list(range(steps + 1))
    acc = {l: {s: np.zeros(len(widths)) for s in step_ids} for l in layers}
    failures = []
    px, _ = probe
    for seed in seeds:
        for wi, cfg in enumerate(ladder):
            model = make_model(cfg, seed)
            lrs = {n: learning_rate * c for n, c in model.lr_scales().items()}
            state = AdamState()
            for s in step_ids:
                if s > 0:
                    x, y = batches[s - 1]
                    model.zero_grad()
                    loss = model.loss(x, y)
                    loss.backward()
                    try:
                        adam_step(model.named_arrays(), {k: t.grad for k, t in model.params.items()},
                                  state, lrs)
                    except FloatingPointError:
                        pass  # surfaces as non-finite activations below
                taps = {}
                with no_grad():
                    model.forward(px, taps)
                for l, v in activation_l1(taps).items():
                    if not math.isfinite(v):
                        failures.append({"seed": seed, "width": cfg.d_model, "layer": l, "step": s})
                    acc[l][s][wi] += v
    norms = {l: {s: (acc[l][s] / len(seeds)).tolist() for s in step_ids} for l in layers}
    slopes = {}
    for l in layers:
        slopes[l] = {}
        for s in step_ids:
            vals = norms[l][s]
            if all(math.isfinite(v) and v > 0 for v in vals):
                slopes[l][s] = fit_slope(widths, vals)
            elif all(v == 0 for v in vals):
                slopes[l][s] = 0.0
            else:
                slopes[l][s] = math.inf
    return CoordCheckResult(widths, step_ids, layers, norms, slopes, failures, label)
