"""Tree-structured Parzen estimator for decoder hyperparameters.

Completed trials are split at the ceil(gamma * n) best into a good and a
bad set; per dimension, each set gets a Parzen density (truncated normal
kernels at the observed points for continuous dimensions, add-one-smoothed
category counts for integer and choice dimensions). Candidates drawn from
the good density are ranked by the density ratio l(x)/g(x) and the best
one is evaluated next. Objectives are maximized.

Suggestions are a deterministic function of (seed, history).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

PARAM_KINDS = ("uniform", "log_uniform", "integer_uniform", "choice")

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str
    low: float | None = None
    high: float | None = None
    choices: tuple | None = None

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"unknown param kind {self.kind!r}")
        if self.kind == "choice":
            if not self.choices:
                raise ValueError(f"param {self.name!r}: choices must be non-empty")
        else:
            if self.low is None or self.high is None:
                raise ValueError(f"param {self.name!r}: low and high required")
            if not (math.isfinite(self.low) and math.isfinite(self.high)):
                raise ValueError(f"param {self.name!r}: bounds must be finite")
            if self.low >= self.high:
                raise ValueError(f"param {self.name!r}: low must be < high")
            if self.kind == "log_uniform" and self.low <= 0:
                raise ValueError(f"param {self.name!r}: log_uniform needs low > 0")
            if self.kind == "integer_uniform" and (
                int(self.low) != self.low or int(self.high) != self.high
            ):
                raise ValueError(f"param {self.name!r}: integer bounds required")


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[ParamSpec, ...]

    def __post_init__(self):
        if not self.params:
            raise ValueError("search space must have at least one parameter")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in search space")

    @classmethod
    def from_file(cls, path) -> "SearchSpace":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        specs = []
        for entry in doc:
            specs.append(ParamSpec(
                name=entry["name"],
                kind=entry["kind"],
                low=entry.get("low"),
                high=entry.get("high"),
                choices=tuple(entry["choices"]) if "choices" in entry else None,
            ))
        return cls(tuple(specs))


@dataclass(frozen=True)
class TpeConfig:
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must be in (0, 1)")
        if self.n_startup < 1 or self.n_candidates < 1:
            raise ValueError("n_startup and n_candidates must be >= 1")


@dataclass(frozen=True)
class Trial:
    params: dict
    objective: float
    status: str  # "complete" | "failed"

    def to_dict(self) -> dict:
        return {"params": self.params, "objective": self.objective, "status": self.status}


@dataclass(frozen=True)
class SuggestTrace:
    """Internals of one suggestion, for inspection and testing."""
    mode: str  # "startup" | "tpe"
    candidates: tuple[dict, ...] = ()
    log_ratios: tuple[float, ...] = ()
    chosen: int = -1


# ---------------------------------------------------------------------------
# Parzen densities


def _norm_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def _norm_cdf(z):
    return 0.5 * (1.0 + special.erf(z / _SQRT2))


def _norm_ppf(u):
    return _SQRT2 * special.erfinv(2.0 * u - 1.0)


class _ContinuousParzen:
    """Mixture of truncated normal kernels at the observed points.

    Per-point bandwidth is the larger of the gaps to the sorted neighbors,
    floored at range / min(100, n).
    """

    def __init__(self, values: Sequence[float], low: float, high: float):
        obs = np.sort(np.clip(np.asarray(values, dtype=np.float64), low, high))
        n = obs.size
        span = high - low
        floor = span / min(100, n)
        bw = np.full(n, floor)
        if n > 1:
            left = np.diff(obs, prepend=obs[0])   # first left gap is 0
            right = np.diff(obs, append=obs[-1])  # last right gap is 0
            bw = np.maximum(np.maximum(left, right), floor)
        self.low = low
        self.high = high
        self.mu = obs
        self.sigma = bw
        # truncation mass per kernel
        self.mass = _norm_cdf((high - obs) / bw) - _norm_cdf((low - obs) / bw)

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        z = (x[:, None] - self.mu[None, :]) / self.sigma[None, :]
        dens = _norm_pdf(z) / self.sigma[None, :] / self.mass[None, :]
        inside = (x >= self.low) & (x <= self.high)
        return np.where(inside, dens.mean(axis=1), 0.0)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.integers(0, self.mu.size, size=n)
        mu = self.mu[comp]
        sigma = self.sigma[comp]
        lo_u = _norm_cdf((self.low - mu) / sigma)
        hi_u = _norm_cdf((self.high - mu) / sigma)
        u = rng.uniform(lo_u, hi_u)
        return np.clip(mu + sigma * _norm_ppf(u), self.low, self.high)


class _DiscreteParzen:
    """Add-one-smoothed category counts over a fixed universe."""

    def __init__(self, values: Sequence, universe: Sequence):
        self.universe = list(universe)
        index = {v: i for i, v in enumerate(self.universe)}
        counts = np.ones(len(self.universe), dtype=np.float64)
        for v in values:
            counts[index[v]] += 1.0
        self.probs = counts / counts.sum()
        self._index = index

    def pdf(self, values) -> np.ndarray:
        return np.asarray([self.probs[self._index[v]] for v in values])

    def sample(self, rng: np.random.Generator, n: int) -> list:
        idx = rng.choice(len(self.universe), size=n, p=self.probs)
        return [self.universe[i] for i in idx]


def _make_density(spec: ParamSpec, values: list):
    if spec.kind == "uniform":
        return _ContinuousParzen(values, spec.low, spec.high)
    if spec.kind == "log_uniform":
        return _ContinuousParzen(np.log(values), math.log(spec.low), math.log(spec.high))
    if spec.kind == "integer_uniform":
        universe = list(range(int(spec.low), int(spec.high) + 1))
        return _DiscreteParzen([int(v) for v in values], universe)
    return _DiscreteParzen(values, spec.choices)


def _density_pdf(spec: ParamSpec, density, values: list) -> np.ndarray:
    if spec.kind == "uniform":
        return density.pdf(values)
    if spec.kind == "log_uniform":
        return density.pdf(np.log(values))
    if spec.kind == "integer_uniform":
        return density.pdf([int(v) for v in values])
    return density.pdf(values)


def _density_sample(spec: ParamSpec, density, rng, n: int) -> list:
    if spec.kind == "uniform":
        return [float(v) for v in density.sample(rng, n)]
    if spec.kind == "log_uniform":
        return [float(np.exp(v)) for v in density.sample(rng, n)]
    return density.sample(rng, n)


def _sample_uniform(spec: ParamSpec, rng: np.random.Generator):
    if spec.kind == "uniform":
        return float(rng.uniform(spec.low, spec.high))
    if spec.kind == "log_uniform":
        return float(np.exp(rng.uniform(math.log(spec.low), math.log(spec.high))))
    if spec.kind == "integer_uniform":
        return int(rng.integers(int(spec.low), int(spec.high) + 1))
    return spec.choices[int(rng.integers(0, len(spec.choices)))]


# ---------------------------------------------------------------------------
# suggestion and optimization


def suggest_with_trace(history: Sequence[Trial], space: SearchSpace, cfg: TpeConfig):
    """Next parameter point plus the internals that produced it."""
    rng = np.random.default_rng([cfg.seed, len(history)])
    complete = [t for t in history if t.status == "complete"]

    if len(complete) < cfg.n_startup:
        params = {p.name: _sample_uniform(p, rng) for p in space.params}
        return params, SuggestTrace(mode="startup")

    ranked = sorted(range(len(complete)), key=lambda i: -complete[i].objective)
    n_good = math.ceil(cfg.gamma * len(complete))
    if n_good >= len(complete):  # degenerate split: too few trials to model "bad"
        params = {p.name: _sample_uniform(p, rng) for p in space.params}
        return params, SuggestTrace(mode="startup")
    good = [complete[i] for i in ranked[:n_good]]
    bad = [complete[i] for i in ranked[n_good:]]

    candidate_values: dict[str, list] = {}
    log_ratios = np.zeros(cfg.n_candidates)
    for spec in space.params:
        good_vals = [t.params[spec.name] for t in good]
        bad_vals = [t.params[spec.name] for t in bad]
        l_density = _make_density(spec, good_vals)
        g_density = _make_density(spec, bad_vals)
        cands = _density_sample(spec, l_density, rng, cfg.n_candidates)
        candidate_values[spec.name] = cands
        l_pdf = _density_pdf(spec, l_density, cands)
        g_pdf = _density_pdf(spec, g_density, cands)
        log_ratios += np.log(l_pdf) - np.log(g_pdf)

    chosen = int(np.argmax(log_ratios))
    candidates = tuple(
        {name: vals[j] for name, vals in candidate_values.items()}
        for j in range(cfg.n_candidates)
    )
    return candidates[chosen], SuggestTrace(
        mode="tpe",
        candidates=candidates,
        log_ratios=tuple(float(v) for v in log_ratios),
        chosen=chosen,
    )


def suggest(history: Sequence[Trial], space: SearchSpace, cfg: TpeConfig) -> dict:
    params, _ = suggest_with_trace(history, space, cfg)
    return params


def optimize(
    objective: Callable[[dict], float],
    space: SearchSpace,
    budget: int,
    cfg: TpeConfig | None = None,
    initial_params: Sequence[dict] | None = None,
) -> tuple[Trial, list[Trial]]:
    """Sequential suggest/evaluate loop; returns (best trial, history).

    Evaluations that raise or return a non-finite value are recorded as
    failed and excluded from the density fits. ``initial_params`` are
    evaluated first and count against the budget.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    cfg = cfg or TpeConfig()
    history: list[Trial] = []

    def evaluate(params: dict) -> Trial:
        try:
            value = float(objective(params))
        except Exception as e:  # objective failures are data, not crashes
            logger.warning("trial %d failed: %s", len(history), e)
            return Trial(params=params, objective=float("nan"), status="failed")
        if not math.isfinite(value):
            return Trial(params=params, objective=value, status="failed")
        return Trial(params=params, objective=value, status="complete")

    for params in initial_params or ():
        if len(history) >= budget:
            break
        history.append(evaluate(dict(params)))
    while len(history) < budget:
        history.append(evaluate(suggest(history, space, cfg)))

    complete = [t for t in history if t.status == "complete"]
    if not complete:
        raise RuntimeError("all trials failed")
    best = max(complete, key=lambda t: t.objective)
    return best, history


def write_trials(path, history: Sequence[Trial]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump([t.to_dict() for t in history], f, indent=2)


def default_decoder_space() -> SearchSpace:
    return SearchSpace((
        ParamSpec("d", "integer_uniform", 1, 8),
        ParamSpec("tau", "uniform", 0.05, 0.9),
        ParamSpec("alpha", "uniform", 0.2, 0.95),
    ))


def tune_decoder(
    maps,
    gts_net416: dict[str, list],
    space: SearchSpace | None = None,
    budget: int = 40,
    cfg: TpeConfig | None = None,
    iou_threshold: float = 0.1,
    mode: str = "top1",
    backend: str | None = None,
):
    """Tune decode parameters against detection accuracy on held-out maps.

    ``maps`` are LoadedMap records; ``gts_net416`` maps image ids to
    ground-truth boxes in net416 space. The decoder defaults are evaluated
    as trial 0 so the returned best can never be worse than the baseline.
    Returns (best DecodeParams, best Trial, history).
    """
    from .eval_harness import match_image
    from .map_decoder import DecodeParams, decode, detection_to_net416

    if not maps:
        raise ValueError("no maps to tune on")
    if not any(gts_net416.get(m.meta.image_id) for m in maps):
        raise ValueError("no ground-truth boxes for the provided maps")
    space = space or default_decoder_space()
    defaults = DecodeParams()

    def to_params(raw: dict) -> DecodeParams:
        merged = {"d": defaults.d, "tau": defaults.tau, "alpha": defaults.alpha}
        merged.update(raw)
        return DecodeParams(d=int(merged["d"]), tau=float(merged["tau"]),
                            alpha=float(merged["alpha"]))

    def objective(raw: dict) -> float:
        params = to_params(raw)
        results = []
        for m in maps:
            dets = [detection_to_net416(det, m.meta)
                    for det in decode(m.logits, params, backend=backend)]
            gts = gts_net416.get(m.meta.image_id, [])
            results.append(match_image(dets, gts, iou_threshold, mode=mode,
                                       image_id=m.meta.image_id))
        included = [r for r in results if not r.excluded]
        hits = sum(1 for r in included if r.outcomes[float(iou_threshold)].hit)
        return hits / len(included)

    names = {p.name for p in space.params}
    trial0 = {k: v for k, v in
              {"d": defaults.d, "tau": defaults.tau, "alpha": defaults.alpha}.items()
              if k in names}
    best, history = optimize(objective, space, budget, cfg, initial_params=[trial0])
    return to_params(best.params), best, history
