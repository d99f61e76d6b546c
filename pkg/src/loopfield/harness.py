"""Config parsing, reproducible RNG streams, statistics, reports, worker pool."""
from __future__ import annotations

import json
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats as scipy_stats

_MAX_SEED = 2**63 - 1


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream id).

    Same key gives a bit-identical draw sequence on every platform and under
    any worker schedule; distinct stream ids are independent streams.
    """
    if not (0 <= int(seed) <= _MAX_SEED and 0 <= int(stream) <= _MAX_SEED):
        raise ValueError("seed and stream id must fit in 63 bits")
    key = np.array([int(seed), int(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ---------------------------------------------------------------- verdicts


@dataclass
class StatVerdict:
    """One named statistic with its gate decision.

    kind: 'z' (batch-mean z-test), 'KS' (two-sample), 'rel' (deterministic
    relative tolerance), 'exact' (counter that must satisfy a comparison).
    """

    name: str
    kind: str
    estimate: float
    target: float
    passed: bool
    stderr: float | None = None
    score: float | None = None
    p_value: float | None = None
    threshold: float | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "estimate": _num(self.estimate),
            "target": _num(self.target),
            "stderr": _num(self.stderr),
            "score": _num(self.score),
            "p_value": _num(self.p_value),
            "threshold": _num(self.threshold),
            "passed": bool(self.passed),
        }


def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def ks_two_sample(a, b, level: float = 0.01, name: str = "ks") -> StatVerdict:
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    if len(a) < 50 or len(b) < 50:
        raise ValueError("two-sample KS needs at least 50 points per sample")
    res = scipy_stats.ks_2samp(a, b, method="asymp")
    return StatVerdict(
        name=name,
        kind="KS",
        estimate=float(np.mean(a)),
        target=float(np.mean(b)),
        passed=bool(res.pvalue >= level),
        score=float(res.statistic),
        p_value=float(res.pvalue),
        threshold=level,
    )


def batch_mean_stderr(sample: np.ndarray, n_batches: int = 100):
    sample = np.asarray(sample, float).ravel()
    n = len(sample)
    if n < 2 * n_batches:
        n_batches = max(2, n // 2)
    cut = (n // n_batches) * n_batches
    means = sample[:cut].reshape(n_batches, -1).mean(axis=1)
    return float(sample.mean()), float(np.std(means, ddof=1) / np.sqrt(n_batches))


def moment_ztest(sample, target: float, n_stderr: float = 4.0,
                 name: str = "mean", n_batches: int = 100) -> StatVerdict:
    est, se = batch_mean_stderr(sample, n_batches)
    if se == 0.0:
        z = 0.0 if est == target else math.inf
    else:
        z = (est - target) / se
    return StatVerdict(name, "z", est, float(target), bool(abs(z) <= n_stderr),
                       stderr=se, score=float(z), threshold=n_stderr)


def zscore_verdict(name, est, se, target, n_stderr: float = 4.0) -> StatVerdict:
    if se == 0.0:
        z = 0.0 if est == target else math.inf
    else:
        z = (est - target) / se
    return StatVerdict(name, "z", float(est), float(target),
                       bool(abs(z) <= n_stderr), stderr=float(se),
                       score=float(z), threshold=n_stderr)


def rel_verdict(name, est, target, tol: float, stderr=None) -> StatVerdict:
    denom = abs(target)
    score = abs(est - target) / denom if denom > 0 else math.inf
    return StatVerdict(name, "rel", float(est), float(target),
                       bool(score <= tol), stderr=stderr, score=float(score),
                       threshold=tol)


def exact_verdict(name, score, passed, estimate=0.0, target=0.0) -> StatVerdict:
    return StatVerdict(name, "exact", float(estimate), float(target),
                       bool(passed), score=float(score))


# ---------------------------------------------------------------- config

_COMMON_DEFAULTS = {
    "seed": 20260813,
    "workers": 1,
    "out": "out",
    "c": 1.0,
    "block": 250,
    "tolerances": {},
}

_EXPERIMENT_DEFAULTS = {
    "theorem1": {"sizes": [32, 64, 128], "n_replicas": 20000},
    "lejan": {"grid": 7, "n_replicas": 200000, "block": 2000},
    "lupu": {"grid": 7, "n_replicas": 200000, "block": 2000},
    "folding": {"grid": 19, "n_replicas": 100000, "block": 2000},
    "shift": {"sizes": [128], "n_replicas": 20000,
              "offsets": [0.0, 0.3, 0.5]},
    "mass_scaling": {"box_sizes": [200, 400], "eps": [0.05, 0.10],
                     "stability_mult": 2, "n_replicas": 1},
    "arcs_count": {"size": 64, "n_replicas": 5000, "depth": 6},
    "dynkin_optional": {"grid": 7, "n_replicas": 20000, "block": 2000},
}

_FIELD_CHECKS = {
    "seed": lambda v: isinstance(v, int) and 0 <= v <= _MAX_SEED,
    "workers": lambda v: isinstance(v, int) and 1 <= v <= 256,
    "out": lambda v: isinstance(v, str) and len(v) > 0,
    "c": lambda v: isinstance(v, (int, float)) and 0 < v <= 4,
    "block": lambda v: isinstance(v, int) and 1 <= v <= 100000,
    "n_replicas": lambda v: isinstance(v, int) and v >= 1,
    "sizes": lambda v: isinstance(v, list) and len(v) >= 1
    and all(isinstance(s, int) and 8 <= s <= 512 for s in v),
    "grid": lambda v: isinstance(v, int) and 4 <= v <= 512,
    "size": lambda v: isinstance(v, int) and 8 <= v <= 512,
    "offsets": lambda v: isinstance(v, list) and len(v) >= 2
    and all(isinstance(o, (int, float)) and 0 <= o < 1 for o in v),
    "box_sizes": lambda v: isinstance(v, list) and len(v) >= 2
    and all(isinstance(s, int) and 100 <= s <= 2000 and s % 20 == 0 for s in v),
    "eps": lambda v: isinstance(v, list) and len(v) >= 1
    and all(isinstance(e, (int, float)) and 0 < e <= 0.5 for e in v),
    "stability_mult": lambda v: isinstance(v, int) and 2 <= v <= 8,
    "depth": lambda v: isinstance(v, int) and 1 <= v <= 12,
    "tolerances": lambda v: isinstance(v, dict)
    and all(isinstance(k, str) and isinstance(x, (int, float)) and x > 0
            for k, x in v.items()),
    "experiment": lambda v: v in _EXPERIMENT_DEFAULTS,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    params: dict

    def __getitem__(self, key):
        return self.params[key]

    def get(self, key, default=None):
        return self.params.get(key, default)

    def tolerance(self, name: str, default: float) -> float:
        return float(self.params.get("tolerances", {}).get(name, default))

    def echo(self) -> dict:
        out = dict(self.params)
        out["experiment"] = self.experiment
        return out

    def with_overrides(self, **kw) -> "ExperimentConfig":
        clean = {k: v for k, v in kw.items() if v is not None}
        return make_config(self.experiment, {**self.params, **clean})


class ConfigError(ValueError):
    pass


def _no_duplicates(pairs):
    seen = set()
    for k, _ in pairs:
        if k in seen:
            raise ConfigError(f"duplicate key {k!r} in config")
        seen.add(k)
    return dict(pairs)


def make_config(experiment: str, overrides: dict | None = None) -> ExperimentConfig:
    if experiment not in _EXPERIMENT_DEFAULTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    params = dict(_COMMON_DEFAULTS)
    params.update(_EXPERIMENT_DEFAULTS[experiment])
    for key, val in (overrides or {}).items():
        if key == "experiment":
            if val != experiment:
                raise ConfigError(
                    f"config experiment {val!r} does not match {experiment!r}")
            continue
        if key not in params and key not in _FIELD_CHECKS:
            raise ConfigError(f"unknown config key {key!r}")
        if key not in params:
            raise ConfigError(
                f"key {key!r} is not accepted by experiment {experiment!r}")
        params[key] = val
    for key, val in params.items():
        check = _FIELD_CHECKS.get(key)
        if check is not None and not check(val):
            raise ConfigError(f"config field {key!r} out of range: {val!r}")
    return ExperimentConfig(experiment, params)


def parse_config(text: str) -> ExperimentConfig:
    """Strict JSON config: duplicate keys, unknown keys and ranges all error."""
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    if "experiment" not in raw:
        raise ConfigError("config is missing the 'experiment' field")
    return make_config(raw["experiment"], raw)


# ---------------------------------------------------------------- worker pool


def block_ranges(n_total: int, block: int):
    """Fixed partition of replica indices into contiguous blocks."""
    out = []
    bid = 0
    lo = 0
    while lo < n_total:
        hi = min(lo + block, n_total)
        out.append((bid, lo, hi))
        bid += 1
        lo = hi
    return out


def map_blocks(fn, n_total, block, seed, workers, payload, base=0):
    """Run fn(bid, lo, hi, seed, base, payload) per block; reduce in block order.

    Results are collected into a list ordered by block id regardless of the
    worker count or completion order, so downstream reductions are
    byte-identical for any schedule.
    """
    blocks = block_ranges(n_total, block)
    if workers <= 1 or len(blocks) <= 1:
        return [fn(bid, lo, hi, seed, base, payload) for bid, lo, hi in blocks]
    ctx = multiprocessing.get_context("fork")
    results = {}
    with ProcessPoolExecutor(max_workers=min(workers, len(blocks)),
                             mp_context=ctx) as pool:
        futures = {
            pool.submit(fn, bid, lo, hi, seed, base, payload): bid
            for bid, lo, hi in blocks
        }
        for fut in futures:
            results[futures[fut]] = fut.result()
    return [results[bid] for bid, _, _ in blocks]


# ---------------------------------------------------------------- rendering


def _figure_files(report) -> list:
    return [f"{name}.svg" for name in sorted(report.figures)]


def render_report(report, outdir) -> list:
    """Write report.json + CSV tables + SVG figures; returns the file paths.

    Wall-clock time is deliberately not serialized: artifacts are
    byte-identical across reruns with the same seed and any worker count.
    """
    os.makedirs(outdir, exist_ok=True)
    files = ["report.json"]
    files += [f"{name}.csv" for name in sorted(report.tables)]
    files += _figure_files(report)

    # workers/out place the computation but cannot influence the numbers, so
    # they stay out of the artifact: same seed => same bytes, any schedule
    cfg = {k: v for k, v in report.config.items() if k not in ("workers", "out")}
    doc = {
        "experiment": report.experiment,
        "domain": report.domain,
        "replicas": report.replicas,
        "seed": report.seed,
        "config": cfg,
        "verdicts": [v.to_dict() for v in report.verdicts],
        "tables": {k: report.tables[k] for k in sorted(report.tables)},
        "passed": bool(report.passed),
        "manifest": sorted(files),
    }
    paths = []
    jpath = os.path.join(outdir, "report.json")
    with open(jpath, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths.append(jpath)

    for name in sorted(report.tables):
        rows = report.tables[name]
        cpath = os.path.join(outdir, f"{name}.csv")
        with open(cpath, "w") as fh:
            if rows:
                cols = sorted(rows[0])
                fh.write(",".join(cols) + "\n")
                for row in rows:
                    fh.write(",".join(_csv_cell(row.get(c)) for c in cols) + "\n")
        paths.append(cpath)

    for name in sorted(report.figures):
        paths.append(_render_figure(name, report.figures[name], outdir))
    return paths


def _csv_cell(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _render_figure(name, payload, outdir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "loopfield"
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    kind = payload["kind"]
    if kind == "heatmap":
        grid = np.asarray(payload["grid"])
        im = ax.imshow(grid, origin="lower", cmap="coolwarm")
        fig.colorbar(im, ax=ax)
        ax.set_title(payload.get("title", name))
    elif kind == "cells":
        pos = np.asarray(payload["positions"])
        val = np.asarray(payload["values"])
        sc = ax.scatter(pos[:, 0], pos[:, 1], c=val, s=6, cmap="tab20")
        fig.colorbar(sc, ax=ax)
        ax.set_aspect("equal")
        ax.set_title(payload.get("title", name))
    elif kind == "loglog":
        x = np.asarray(payload["x"], float)
        for label, y in sorted(payload["series"].items()):
            ax.loglog(x, np.asarray(y, float), marker="o", label=label)
        if "reference" in payload:
            ref = payload["reference"]
            ax.loglog(x, ref["scale"] * x ** ref["power"], "k--",
                      label=ref["label"])
        ax.legend()
        ax.set_title(payload.get("title", name))
        ax.set_xlabel(payload.get("xlabel", "x"))
        ax.set_ylabel(payload.get("ylabel", "y"))
    else:
        raise ValueError(f"unknown figure kind {kind!r}")
    path = os.path.join(outdir, f"{name}.svg")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
