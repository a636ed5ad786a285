"""Experiment models and dataset generation.

Four model families:

* ``two-branch``: a continuous branch on the sign of the first draw; two
  paths with 2 and 3 Gaussian draws and one Gaussian observation.  Small
  enough that its per-path normalisers have closed forms, so it serves as
  the end-to-end correctness fixture.
* ``gmm-open``: a 1-D Gaussian mixture with an unknown number of clusters,
  K ~ Poisson(rate)+1 (split-marked), means uniform on an equal partition
  of [0, 20], assignments marginalised out of the likelihood.
* ``gmm-misspec``: the same with rate 90, so the prior on K is far from
  the data-supported K.
* ``pcfg-fn``: function induction with a probabilistic grammar
  e -> x | x^2 | sin(a*e) | a*e + b*e, depth at most 3, no consecutive
  plus; coefficients are standard normal and every rule choice is
  split-marked.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Optional

import numpy as np

from .dists import Categorical, GmmObsLik, Normal, Poisson, UniformContinuous, normal_log_pdf
from .interp import Program

__all__ = [
    "ModelSpec",
    "MODEL_NAMES",
    "two_branch",
    "two_branch_exact_log_z",
    "gmm_open",
    "pcfg_fn",
    "eval_expr",
    "expr_text",
    "pcfg_target",
    "gen_data",
    "build_model",
    "write_dataset",
    "load_dataset",
]

MODEL_NAMES = ("two-branch", "gmm-open", "gmm-misspec", "pcfg-fn")


# --------------------------------------------------------------------------
# two-branch


def two_branch(y1: float = 0.0) -> Program:
    def fn(ctx):
        x1 = ctx.sample("x1", Normal(0.0, 2.0))
        if x1 < 0.0:
            x2 = ctx.sample("x2neg", Normal(-5.0, 2.0))
            ctx.observe(Normal(x2, 2.0), y1, site="y1")
            return (x1, x2)
        x2 = ctx.sample("x2pos", Normal(5.0, 2.0))
        x3 = ctx.sample("x3", Normal(x2, 2.0))
        ctx.observe(Normal(x3, 2.0), y1, site="y1")
        return (x1, x2, x3)

    return Program("two-branch", fn)


def two_branch_exact_log_z(y1: float = 0.0):
    """Closed-form (log Z_neg, log Z_pos): the Gaussian chains collapse to a
    single convolution and the sign constraint contributes a factor 1/2."""
    log_half = -math.log(2.0)
    log_z_neg = log_half + normal_log_pdf(y1, -5.0, math.sqrt(8.0))
    log_z_pos = log_half + normal_log_pdf(y1, 5.0, math.sqrt(12.0))
    return log_z_neg, log_z_pos


# --------------------------------------------------------------------------
# open-ended Gaussian mixture


def gmm_open(data, rate: float = 9.0, obs_std: float = 0.1,
             lo: float = 0.0, hi: float = 20.0) -> Program:
    data = tuple(float(y) for y in data)
    span = hi - lo

    def fn(ctx):
        k = ctx.sample("K", Poisson(rate), split=True) + 1
        mus = [
            ctx.sample("mu", UniformContinuous(lo + span * i / k, lo + span * (i + 1) / k))
            for i in range(k)
        ]
        lik = GmmObsLik(mus, obs_std)
        for y in data:
            ctx.observe(lik, y)
        return (k, tuple(mus))

    return Program(f"gmm(rate={rate:g})", fn)


# --------------------------------------------------------------------------
# grammar-based function induction

RULE_X, RULE_SQ, RULE_SIN, RULE_PLUS = 0, 1, 2, 3
_P_OPEN = (0.3, 0.3, 0.2, 0.2)        # x | x^2 | sin | plus
_P_AFTER_PLUS = (0.35, 0.35, 0.3)     # plus may not follow plus
_P_TERMINAL = (0.5, 0.5)              # at max depth: x | x^2


def _gen_expr(ctx, depth: int, max_depth: int, prev: Optional[int]):
    if depth < max_depth:
        probs = _P_AFTER_PLUS if prev == RULE_PLUS else _P_OPEN
    else:
        probs = _P_TERMINAL
    rule = ctx.sample("rule", Categorical(probs), split=True)
    if rule == RULE_X:
        if prev is None:
            # the generative code draws (and discards) a coefficient when
            # the bare terminal is the whole function
            ctx.sample("coef", Normal(0.0, 1.0))
        return ("x",)
    if rule == RULE_SQ:
        ctx.sample("coef", Normal(0.0, 1.0))
        return ("sq",)
    if rule == RULE_SIN:
        a = ctx.sample("coef", Normal(0.0, 1.0))
        return ("sin", a, _gen_expr(ctx, depth + 1, max_depth, RULE_SIN))
    a = ctx.sample("coef", Normal(0.0, 1.0))
    b = ctx.sample("coef", Normal(0.0, 1.0))
    return (
        "add",
        a,
        _gen_expr(ctx, depth + 1, max_depth, RULE_PLUS),
        b,
        _gen_expr(ctx, depth + 1, max_depth, RULE_PLUS),
    )


def eval_expr(expr, x):
    """Evaluate an expression tree at x (scalar or numpy array)."""
    op = expr[0]
    if op == "x":
        return x
    if op == "sq":
        return x * x
    if op == "sin":
        return np.sin(expr[1] * eval_expr(expr[2], x))
    return expr[1] * eval_expr(expr[2], x) + expr[3] * eval_expr(expr[4], x)


def expr_text(expr) -> str:
    op = expr[0]
    if op == "x":
        return "x"
    if op == "sq":
        return "x^2"
    if op == "sin":
        return f"sin({expr[1]:.3g}*{expr_text(expr[2])})"
    return f"({expr[1]:.3g}*{expr_text(expr[2])} + {expr[3]:.3g}*{expr_text(expr[4])})"


def pcfg_fn(train_xs, train_ys, obs_std: float = 0.5, max_depth: int = 3) -> Program:
    xs = np.asarray(train_xs, dtype=float)
    ys = tuple(float(y) for y in train_ys)

    def fn(ctx):
        expr = _gen_expr(ctx, 1, max_depth, None)
        preds = np.asarray(eval_expr(expr, xs), dtype=float)
        for p, y in zip(preds, ys):
            ctx.observe(Normal(float(p), obs_std), y)
        return expr

    return Program("pcfg-fn", fn)


def pcfg_target(x):
    return -x + 2.0 * np.sin(5.0 * x * x)


# --------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class ModelSpec:
    """Which model to build, and where its data comes from."""

    name: str
    data_seed: int = 0
    data_dir: Optional[str] = None  # load persisted CSVs instead of regenerating
    y1: float = 0.0                 # two-branch observation

    def __post_init__(self):
        if self.name not in MODEL_NAMES:
            raise ValueError(f"unknown model {self.name!r}; expected one of {MODEL_NAMES}")


def gen_data(spec: ModelSpec) -> dict:
    """Dataset for the spec, regenerated deterministically from its seed
    (or loaded from `data_dir` when set)."""
    if spec.data_dir is not None:
        return load_dataset(spec)
    rng = np.random.default_rng(np.random.SeedSequence(spec.data_seed))
    if spec.name == "two-branch":
        return {"y1": spec.y1}
    if spec.name in ("gmm-open", "gmm-misspec"):
        k_true, lo, hi, obs_std, n = 5, 0.0, 20.0, 0.1, 150
        span = hi - lo
        mus = [rng.uniform(lo + span * i / k_true, lo + span * (i + 1) / k_true) for i in range(k_true)]
        z = rng.integers(k_true, size=n)
        ys = [float(rng.normal(mus[zi], obs_std)) for zi in z]
        return {"y": ys, "true_mus": [float(m) for m in mus], "k_true": k_true}
    # pcfg-fn: noisy draws of the target on (-1.5, 1.5); test points held out
    n_train, n_test, obs_std = 30, 30, 0.5
    xs = rng.uniform(-1.5, 1.5, size=n_train + n_test)
    ys = pcfg_target(xs) + rng.normal(0.0, obs_std, size=n_train + n_test)
    rows = [(float(x), float(y)) for x, y in zip(xs, ys)]
    return {"train": rows[:n_train], "test": rows[n_train:]}


def build_model(spec: ModelSpec, dataset: Optional[dict] = None) -> Program:
    data = dataset if dataset is not None else gen_data(spec)
    if spec.name == "two-branch":
        return two_branch(data["y1"])
    if spec.name == "gmm-open":
        return gmm_open(data["y"], rate=9.0)
    if spec.name == "gmm-misspec":
        return gmm_open(data["y"], rate=90.0)
    return pcfg_fn([x for x, _ in data["train"]], [y for _, y in data["train"]])


def write_dataset(spec: ModelSpec, dataset: dict, out_dir) -> list:
    """Persist the dataset as CSV (header row, one observation per line)."""
    out_dir = FsPath(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if spec.name == "two-branch":
        path = out_dir / f"two-branch_seed{spec.data_seed}.csv"
        _write_rows(path, ["y1"], [[repr(dataset["y1"])]])
        written.append(path)
    elif spec.name in ("gmm-open", "gmm-misspec"):
        path = out_dir / f"{spec.name}_seed{spec.data_seed}.csv"
        _write_rows(path, ["y"], [[repr(y)] for y in dataset["y"]])
        written.append(path)
    else:
        for part in ("train", "test"):
            path = out_dir / f"pcfg-fn_{part}_seed{spec.data_seed}.csv"
            _write_rows(path, ["x", "y"], [[repr(x), repr(y)] for x, y in dataset[part]])
            written.append(path)
    return written


def load_dataset(spec: ModelSpec) -> dict:
    d = FsPath(spec.data_dir)
    if spec.name == "two-branch":
        rows = _read_rows(d / f"two-branch_seed{spec.data_seed}.csv")
        return {"y1": float(rows[0][0])}
    if spec.name in ("gmm-open", "gmm-misspec"):
        rows = _read_rows(d / f"{spec.name}_seed{spec.data_seed}.csv")
        return {"y": [float(r[0]) for r in rows]}
    out = {}
    for part in ("train", "test"):
        rows = _read_rows(d / f"pcfg-fn_{part}_seed{spec.data_seed}.csv")
        out[part] = [(float(x), float(y)) for x, y in rows]
    return out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _read_rows(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)  # header
        return [row for row in r]
