"""Monte Carlo orchestration and the named experiments.

Replicate ``i`` of a run always draws from ``stream(seed, i)`` and replicates
are processed in fixed chunks of ``batch_size`` (a function of the config
only), so results are bit-identical for any number of worker threads.
"""
from __future__ import annotations

import json
import logging
import math
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .biharmonic import GAMMA, ConvergenceError, assemble_precision, make_solver
from .extremes import extract_extremal_process, laplace_functional
from .field import centering_constant, sample_membrane_batch
from .hierarchical import DyadicDepth, sample_brw_batch, sample_mbrw_batch
from .lattice import Lattice4
from .rng import stream

log = logging.getLogger(__name__)

FIELD_KINDS = ("membrane", "brw", "mbrw")
INTENSITY_RATE = math.pi
# experiments that only persist samples; a single replicate is meaningful
DATA_ONLY = ("sample", "extremes")

CONSTANTS = {
    "gamma": GAMMA,
    "intensity_rate_target": INTENSITY_RATE,
    "centering": "m_N = (8/pi) ln N - (3/(2 pi)) ln ln N",
    "laplacian": "(1/8) * sum_{u~v} (h_u - h_v)",
    "geometry_c_default": 0.25,
    "intensity_threshold_offset_default": 1.5,
}


class ReplicateError(RuntimeError):
    def __init__(self, message, replicate):
        super().__init__(f"replicate {replicate}: {message}")
        self.replicate = replicate


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "custom"
    field: str = "membrane"
    N: int | None = None
    n: int | None = None
    r: int = 2
    t: float = 0.5
    lam: float = 2.0
    ell: int = 1
    c: float = 0.25
    threshold_offset: float = 1.5
    replicates: int = 1000
    seed: int = 0
    solver: str | None = None
    batch_size: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.field not in FIELD_KINDS:
            raise ValueError(f"field must be one of {FIELD_KINDS}")
        floor = 1 if self.experiment in DATA_ONLY else 2
        if self.replicates < floor:
            raise ValueError(f"need at least {floor} replicates")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.field == "membrane":
            if self.N is None or self.N < 2:
                raise ValueError("membrane runs need N >= 2")
        else:
            n = self.n
            if n is None and self.N is not None:
                n = int(self.N).bit_length() - 1
                if 2**n != self.N:
                    raise ValueError("hierarchical fields need N to be a power of two")
            if n is None or n < 1:
                raise ValueError("hierarchical runs need depth n >= 1")
            object.__setattr__(self, "n", n)
            object.__setattr__(self, "N", 2**n)

    @property
    def lattice(self) -> Lattice4:
        return Lattice4(self.N)

    @property
    def chunk(self) -> int:
        if self.batch_size:
            return int(self.batch_size)
        return int(min(256, max(1, 2**20 // self.lattice.vertex_count)))

    def to_dict(self) -> dict:
        # thread count is an execution detail; leaving it out keeps outputs
        # byte-identical across pool sizes
        d = asdict(self)
        d.pop("threads")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class EstimatorResult:
    estimate: float
    std_error: float
    replicates: int
    seed: int
    wall_time: float = field(default=0.0, compare=False)


@lru_cache(maxsize=8)
def membrane_solver(N: int, mode: str | None = None, tol: float = 1e-8):
    """Solver handle for V_N, assembled once and cached."""
    return make_solver(assemble_precision(Lattice4(N)), mode=mode, tol=tol)


def sampler(config: ExperimentConfig) -> Callable[[Sequence], np.ndarray]:
    """Batch sampler ``streams -> (B, N+1, N+1, N+1, N+1)`` for the config."""
    if config.field == "membrane":
        handle = membrane_solver(config.N, config.solver)
        return lambda st: sample_membrane_batch(handle, st)
    depth = DyadicDepth(config.n)
    if config.field == "brw":
        return lambda st: sample_brw_batch(depth, st)
    return lambda st: sample_mbrw_batch(depth, st)


def map_replicates(config: ExperimentConfig, statistic: Callable[[np.ndarray], Any],
                   start: int = 0, count: int | None = None) -> list:
    """``statistic(field_values)`` for replicates ``start .. start+count-1``,
    returned in replicate order."""
    count = config.replicates if count is None else count
    draw = sampler(config)
    size = config.chunk
    chunks = [range(a, min(a + size, start + count)) for a in range(start, start + count, size)]

    def work(idx: range):
        try:
            batch = draw([stream(config.seed, i) for i in idx])
        except ConvergenceError as exc:
            raise ReplicateError(str(exc), idx[0]) from exc
        out = []
        for i, values in zip(idx, batch):
            try:
                out.append(statistic(values))
            except Exception as exc:
                raise ReplicateError(str(exc), i) from exc
        return out

    if config.threads == 1 or len(chunks) == 1:
        results = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(config.threads) as pool:
            results = list(pool.map(work, chunks))
    return [x for part in results for x in part]


def summarize(values, seed: int = 0, wall_time: float = 0.0) -> EstimatorResult:
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two values")
    se = float(np.std(x, ddof=1) / math.sqrt(x.size))
    return EstimatorResult(float(np.mean(x)), se, int(x.size), seed, wall_time)


def run_replicates(config: ExperimentConfig, statistic: Callable[[np.ndarray], float],
                   start: int = 0) -> EstimatorResult:
    t0 = time.perf_counter()
    values = map_replicates(config, statistic, start=start)
    return summarize(values, config.seed, time.perf_counter() - t0)


def combined_se(a: EstimatorResult, b: EstimatorResult) -> float:
    return math.hypot(a.std_error, b.std_error)


# --- covariance --------------------------------------------------------------

MIN_COV_REPLICATES = 1000


def jackknife_cov(x, y) -> tuple[float, float]:
    """Unbiased sample covariance and its leave-one-out jackknife SE."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    if n < 3:
        raise ValueError("jackknife needs at least 3 samples")
    xc = x - x.mean()
    yc = y - y.mean()
    sxy = np.dot(xc, yc)
    est = sxy / (n - 1)
    # leave-one-out: centred sums lose x_i y_i and pick up the mean shift
    loo = (sxy - xc * yc * n / (n - 1)) / (n - 2)
    se = math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(est), float(se)


def empirical_cov(samples, pairs) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair covariance estimates and jackknife SEs.

    ``samples`` is ``(R, V)`` (or ``(R, N+1, ...)``) and ``pairs`` holds
    flat vertex indices.
    """
    s = np.asarray(samples, dtype=np.float64)
    s = s.reshape(s.shape[0], -1)
    if s.shape[0] < MIN_COV_REPLICATES:
        raise ValueError(f"need at least {MIN_COV_REPLICATES} replicates, got {s.shape[0]}")
    out = np.array([jackknife_cov(s[:, u], s[:, v]) for u, v in pairs])
    return out[:, 0], out[:, 1]


def sample_sites(config: ExperimentConfig, sites, start: int = 0) -> np.ndarray:
    """Field values at flat ``sites`` for every replicate, shape ``(R, k)``."""
    sites = np.asarray(sites)
    rows = map_replicates(config, lambda h: h.reshape(-1)[sites].copy(), start=start)
    return np.array(rows)


# --- tail fit ----------------------------------------------------------------

@dataclass(frozen=True)
class TailFit:
    rate: float
    std_error: float
    exceedances: int
    threshold: float


def fit_exponential_tail(heights, threshold: float, min_exceedances: int = 50) -> TailFit:
    """MLE of the rate of exponential excesses over ``threshold``."""
    h = np.asarray(heights, dtype=np.float64)
    exc = h[h > threshold] - threshold
    k = exc.size
    if k < min_exceedances:
        raise ValueError(f"only {k} exceedances above {threshold:g} (need {min_exceedances})")
    rate = 1.0 / exc.mean()
    return TailFit(float(rate), float(rate / math.sqrt(k)), int(k), float(threshold))


# --- named experiments -------------------------------------------------------

def linf_pair_in_window(points: np.ndarray, lo: float, hi: float) -> bool:
    """Whether some pair of ``points`` has l∞ distance in ``[lo, hi]``."""
    if len(points) < 2:
        return False
    for i in range(len(points) - 1):
        d = np.abs(points[i + 1:] - points[i]).max(axis=1)
        if np.any((d >= lo) & (d <= hi)):
            return True
    return False


def violating_pair(h, r: float, c: float = 0.25, N: int | None = None) -> bool:
    """Is there a pair at l∞ distance in ``[r, N/r]`` with both heights at
    least ``m_N - c log log r``?"""
    h = np.asarray(h)
    N = h.shape[0] - 1 if N is None else N
    if r <= math.e:
        raise ValueError("r must exceed e so that log log r > 0")
    if r * r > N:
        return False
    bar = centering_constant(N) - c * math.log(math.log(r))
    pts = np.argwhere(h >= bar)
    return linf_pair_in_window(pts, r, N / r)


def geometry_experiment(config: ExperimentConfig, rs=(3, 4, 6),
                        start: int = 0) -> dict[int, EstimatorResult]:
    t0 = time.perf_counter()
    rows = map_replicates(
        config, lambda h: [float(violating_pair(h, r, config.c)) for r in rs], start=start)
    rows = np.array(rows)
    wall = time.perf_counter() - t0
    return {r: summarize(rows[:, j], config.seed, wall) for j, r in enumerate(rs)}


def laplace_estimates(config: ExperimentConfig, functions, start: int = 0) -> list[EstimatorResult]:
    """MC estimates of ``E exp(-<η_{N,r}, f>)`` for each ``f``, one field pool."""
    t0 = time.perf_counter()

    def stat(h):
        pp = extract_extremal_process(h, config.r)
        return [laplace_functional(pp, f)[1] for f in functions]

    rows = np.array(map_replicates(config, stat, start=start))
    wall = time.perf_counter() - t0
    return [summarize(rows[:, j], config.seed, wall) for j in range(len(functions))]


def dyson_experiment(config: ExperimentConfig, f) -> tuple[EstimatorResult, EstimatorResult]:
    """``(E e^{-<η,f>}, E e^{-<η,f_t>})`` from two independent field pools."""
    from .extremes import f_t_transform
    from .field import DysonParams

    DysonParams(config.t, config.N)
    (lhs,) = laplace_estimates(config, [f], start=0)
    (rhs,) = laplace_estimates(config, [f_t_transform(f, config.t)], start=config.replicates)
    return lhs, rhs


def local_max_heights(config: ExperimentConfig, start: int = 0) -> np.ndarray:
    rows = map_replicates(config, lambda h: extract_extremal_process(h, config.r).heights,
                          start=start)
    return np.concatenate(rows)


def intensity_experiment(config: ExperimentConfig) -> TailFit:
    heights = local_max_heights(config)
    return fit_exponential_tail(heights, -config.threshold_offset)


# --- results documents -------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, check=False)
    except (OSError, subprocess.SubprocessError):
        return f"membrane4d-{__version__}"
    return out.stdout.strip() or f"membrane4d-{__version__}"


def estimate_entry(name: str, value: float, std_error: float, replicates: int, **extra) -> dict:
    entry = {"name": name, "value": float(value), "std_error": float(std_error),
             "replicates": int(replicates)}
    entry.update(extra)
    return entry


def results_document(experiment: str, config: ExperimentConfig | dict, estimates: list[dict],
                     wall_time_s: float | None = None, **extra) -> dict:
    cfg = config.to_dict() if isinstance(config, ExperimentConfig) else dict(config)
    doc = {
        "experiment": experiment,
        "config": cfg,
        "estimates": estimates,
        "seed": int(cfg.get("seed", 0)),
        "wall_time_s": wall_time_s,
        "git_describe": git_describe(),
        "constants": CONSTANTS,
    }
    doc.update(extra)
    return doc


def results_schema() -> dict:
    text = resources.files("membrane4d").joinpath("schemas/results.schema.json").read_text()
    return json.loads(text)


def validate_results(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, results_schema())


def write_results(doc: dict, path) -> None:
    validate_results(doc)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
