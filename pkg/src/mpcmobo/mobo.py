"""Multi-objective Bayesian optimization over the MPC parameters.

Each objective gets its own GP on archive-standardized values. Proposals
maximize Monte-Carlo EHVI (or EI on ``f1`` alone) over a low-discrepancy
cloud around the incumbent plus a global uniform cloud, followed by a short
coordinate pattern search from the best candidate.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, qmc

from . import gp_regression as gp
from . import hypervolume as hvm

logger = logging.getLogger(__name__)

N_MC = 512
N_LOCAL = 1024
N_GLOBAL = 256
PATTERN_ITERS = 50
TRUST_FRACTION = 0.2
REF_INFLATION = 0.1


# ----------------------------------------------------------------------
# archive
# ----------------------------------------------------------------------


@dataclass
class ArchiveEntry:
    episode: int
    theta: np.ndarray
    f: np.ndarray
    accepted: bool = True
    hypervolume: float = np.nan
    wall_time: float = np.nan
    mode: str = ""


def reference_from(F: np.ndarray, inflation: float = REF_INFLATION) -> np.ndarray:
    """Componentwise max plus ``inflation`` times the range.

    A zero range (for instance an objective that is identically zero) uses
    ``max(|max|, 1)`` in place of the range so the box keeps positive width.
    """
    hi, lo = F.max(axis=0), F.min(axis=0)
    span = hi - lo
    span = np.where(span > 0, span, np.maximum(np.abs(hi), 1.0))
    return hi + inflation * span


@dataclass
class ParetoArchive:
    """Evaluated parameters with their objective vectors.

    The reference point only moves outward. With ``fixed_reference`` it
    never moves at all.
    """

    n_objectives: int = 4
    entries: list = field(default_factory=list)
    reference: Optional[np.ndarray] = None
    fixed_reference: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.fixed_reference is not None:
            self.fixed_reference = np.asarray(self.fixed_reference, float)
            self.reference = self.fixed_reference.copy()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def thetas(self) -> np.ndarray:
        return np.array([e.theta for e in self.entries])

    @property
    def objectives(self) -> np.ndarray:
        return np.array([e.f for e in self.entries]).reshape(-1, self.n_objectives)

    @property
    def episodes(self) -> set:
        return {e.episode for e in self.entries}

    def add(self, episode: int, theta, f, accepted: bool = True, wall_time: float = np.nan,
            mode: str = "") -> ArchiveEntry:
        f = np.asarray(f, float)
        if f.shape != (self.n_objectives,) or not np.all(np.isfinite(f)):
            raise ValueError(f"objective vector must be {self.n_objectives} finite values, got {f}")
        entry = ArchiveEntry(int(episode), np.asarray(theta, float).copy(), f, bool(accepted),
                             wall_time=wall_time, mode=mode)
        self.entries.append(entry)
        self._update_reference(f)
        entry.hypervolume = self.hypervolume()
        return entry

    def _update_reference(self, f) -> None:
        if self.fixed_reference is not None:
            return
        if self.reference is None or not np.all(f < self.reference):
            new = reference_from(self.objectives)
            self.reference = new if self.reference is None else np.maximum(self.reference, new)

    def front_indices(self) -> np.ndarray:
        return hvm.pareto_front(self.objectives) if self.entries else np.zeros(0, dtype=int)

    def front_mask(self) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        m[self.front_indices()] = True
        return m

    def hypervolume(self) -> float:
        if not self.entries:
            return 0.0
        F = self.objectives[self.front_indices()]
        return hvm.hypervolume(F, self.reference, warn=False)

    def incumbent(self) -> Optional[ArchiveEntry]:
        """Accepted entry with the lowest ``f1``."""
        ok = [e for e in self.entries if e.accepted]
        return min(ok, key=lambda e: e.f[0]) if ok else None

    def select_final(self) -> Optional[ArchiveEntry]:
        """Lowest ``f1`` among accepted entries with zero Lyapunov penalty, else lowest ``f1``."""
        ok = [e for e in self.entries if e.accepted]
        if not ok:
            return None
        if self.n_objectives >= 4:
            stable = [e for e in ok if e.f[3] == 0.0]
            if stable:
                return min(stable, key=lambda e: e.f[0])
        return min(ok, key=lambda e: e.f[0])

    # -- persistence ------------------------------------------------------

    def header(self, n_theta: int) -> list[str]:
        return (["episode", "mode"] + [f"theta{j}" for j in range(n_theta)]
                + [f"f{m + 1}" for m in range(self.n_objectives)]
                + ["front", "accepted", "hypervolume", "wall_time"])

    def to_csv(self, path) -> None:
        n_theta = self.entries[0].theta.size if self.entries else 0
        front = self.front_mask()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header(n_theta))
            for e, fr in zip(self.entries, front):
                w.writerow([e.episode, e.mode] + [repr(float(v)) for v in e.theta]
                           + [repr(float(v)) for v in e.f] + [int(fr), int(e.accepted),
                                                             repr(float(e.hypervolume)), repr(float(e.wall_time))])

    @classmethod
    def from_csv(cls, path, fixed_reference=None) -> "ParetoArchive":
        """Rebuild by replaying the rows in order; duplicate episode indices are skipped."""
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path} has no rows")
        n_obj = sum(1 for k in rows[0] if k.startswith("f") and k[1:].isdigit())
        n_theta = sum(1 for k in rows[0] if k.startswith("theta"))
        arch = cls(n_obj, fixed_reference=fixed_reference)
        for row in rows:
            ep = int(row["episode"])
            if ep in arch.episodes:
                continue
            arch.add(ep, [float(row[f"theta{j}"]) for j in range(n_theta)],
                     [float(row[f"f{m + 1}"]) for m in range(n_obj)], bool(int(row["accepted"])),
                     float(row["wall_time"]), row["mode"])
        return arch


# ----------------------------------------------------------------------
# surrogates and acquisitions
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ObjectiveScaler:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, F) -> "ObjectiveScaler":
        F = np.atleast_2d(np.asarray(F, float))
        sd = F.std(axis=0)
        return cls(F.mean(axis=0), np.where(sd > 0, sd, 1.0))

    def __call__(self, F):
        return (np.asarray(F, float) - self.mean) / self.scale


@dataclass
class Surrogate:
    models: list
    scaler: ObjectiveScaler


def fit_surrogate(archive: ParetoArchive, objectives: Optional[Sequence[int]] = None) -> Surrogate:
    """One GP per objective on standardized values (grid-selected hyperparameters)."""
    idx = list(range(archive.n_objectives)) if objectives is None else list(objectives)
    F = archive.objectives[:, idx]
    scaler = ObjectiveScaler.fit(F)
    Z = scaler(F)
    X = archive.thetas
    models = [gp.fit_auto(X, Z[:, m]) for m in range(len(idx))]
    return Surrogate(models, scaler)


def ei_value(mu, sigma, best):
    """Expected improvement ``E[max(best - Y, 0)]`` for ``Y ~ N(mu, sigma^2)``."""
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    imp = best - mu
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, imp / sigma, 0.0)
        out = np.where(sigma > 0, imp * norm.cdf(z) + sigma * norm.pdf(z), np.maximum(imp, 0.0))
    return out if out.ndim else float(out)


def ei(model: gp.GpModel, theta, best: float):
    mu, var = gp.predict(model, theta)
    return ei_value(mu, np.sqrt(var), best)


def alpha_ei(model: gp.GpModel, theta, best: float):
    """The minimization form of EI: its negation."""
    return -ei(model, theta, best)


def _standard_draws(n_mc: int, M: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n_mc, M))


def _predict_all(models, X):
    X = np.atleast_2d(X)
    mus, sds = [], []
    for m in models:
        mu, var = gp.predict(m, X)
        mus.append(mu)
        sds.append(np.sqrt(var))
    return np.column_stack(mus), np.column_stack(sds)


def ehvi(models, theta, front, ref, n_mc: int = N_MC, seed=0) -> float:
    """Monte-Carlo expected hypervolume improvement with independent objectives."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    mu, sd = _predict_all(models, np.asarray(theta, float))
    L, U = hvm.nondominated_boxes(np.asarray(front, float).reshape(-1, len(models)), ref)
    eps = _standard_draws(n_mc, len(models), seed)
    return float(hvm.ehvi_boxes(mu, sd, eps, L, U)[0])


def ehvi_from_moments(mu, sd, front, ref, n_mc: int = N_MC, seed=0) -> np.ndarray:
    mu, sd = np.atleast_2d(np.asarray(mu, float)), np.atleast_2d(np.asarray(sd, float))
    L, U = hvm.nondominated_boxes(np.asarray(front, float).reshape(-1, mu.shape[1]), ref)
    return hvm.ehvi_boxes(mu, sd, _standard_draws(n_mc, mu.shape[1], seed), L, U)


# ----------------------------------------------------------------------
# proposal
# ----------------------------------------------------------------------


@dataclass
class Proposal:
    theta: np.ndarray
    value: float
    fallback: bool
    n_candidates: int
    notes: dict = field(default_factory=dict)


class _Acquisition:
    """Batch acquisition with fixed draws so every evaluation is deterministic."""

    def __init__(self, surrogate: Surrogate, archive: ParetoArchive, kind: str, n_mc: int, seed):
        self.models = surrogate.models
        self.kind = kind
        Z = surrogate.scaler(archive.objectives[:, :len(self.models)])
        if kind == "ehvi":
            ref = surrogate.scaler(archive.reference[:len(self.models)])
            front = Z[hvm.pareto_front(Z)]
            self.L, self.U = hvm.nondominated_boxes(front, ref)
            self.eps = _standard_draws(n_mc, len(self.models), seed)
        elif kind == "ei":
            self.best = float(Z[:, 0].min())
        else:
            raise ValueError(f"unknown acquisition {kind!r}")

    def __call__(self, X):
        mu, sd = _predict_all(self.models, X)
        if self.kind == "ehvi":
            vals = hvm.ehvi_boxes(mu, sd, self.eps, self.L, self.U)
        else:
            vals = np.atleast_1d(ei_value(mu[:, 0], sd[:, 0], self.best))
        return vals, np.sum(sd**2, axis=1)


def candidate_cloud(center, lower, upper, rng_seed, n_local: int = N_LOCAL, n_global: int = N_GLOBAL,
                    trust: float = TRUST_FRACTION) -> np.ndarray:
    """Scrambled Sobol points in the trust box around ``center`` plus uniform global points."""
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    span = hi - lo
    c = np.clip(np.asarray(center, float), lo, hi)
    t_lo, t_hi = np.maximum(lo, c - trust * span), np.minimum(hi, c + trust * span)
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    s_sobol, s_unif = ss.spawn(2)
    sob = qmc.Sobol(d=lo.size, scramble=True, seed=np.random.default_rng(s_sobol))
    local = qmc.scale(sob.random(n_local), t_lo, t_hi) if n_local else np.zeros((0, lo.size))
    glob = lo + span * np.random.default_rng(s_unif).random((n_global, lo.size))
    return np.vstack([local, glob])


def pattern_search(f, x0, f0, lower, upper, iters: int = PATTERN_ITERS, step_fraction: float = 0.05):
    """Coordinate-wise compass search maximizing ``f``; steps halve after a full unsuccessful sweep."""
    lo, hi = np.asarray(lower, float), np.asarray(upper, float)
    x, fx = np.asarray(x0, float).copy(), f0
    step = step_fraction * (hi - lo)
    d = x.size
    improved_in_sweep = False
    for it in range(iters):
        j = it % d
        trials = []
        for sgn in (1.0, -1.0):
            y = x.copy()
            y[j] = np.clip(y[j] + sgn * step[j], lo[j], hi[j])
            if y[j] != x[j]:
                trials.append(y)
        if trials:
            vals = f(np.array(trials))
            k = int(np.argmax(vals))
            if vals[k] > fx:
                x, fx = trials[k], float(vals[k])
                improved_in_sweep = True
        if j == d - 1:
            if not improved_in_sweep:
                step = step * 0.5
            improved_in_sweep = False
    return x, fx


def propose_next(archive: ParetoArchive, surrogate: Surrogate, bounds, seed, acquisition: str = "ehvi",
                 n_mc: int = N_MC, n_local: int = N_LOCAL, n_global: int = N_GLOBAL,
                 pattern_iters: int = PATTERN_ITERS) -> Proposal:
    """Next parameter vector to evaluate.

    When every candidate has zero acquisition value the candidate with the
    largest summed posterior variance is returned and flagged.
    """
    lower, upper = (np.asarray(b, float) for b in bounds)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_cand, s_mc = ss.spawn(2)
    inc = archive.incumbent()
    center = inc.theta if inc is not None else 0.5 * (lower + upper)
    X = candidate_cloud(center, lower, upper, s_cand, n_local, n_global)
    acq = _Acquisition(surrogate, archive, acquisition, n_mc, s_mc)
    vals, var = acq(X)
    if not np.any(vals > 0):
        k = int(np.argmax(var))
        return Proposal(np.clip(X[k], lower, upper), 0.0, True, X.shape[0], {"variance": float(var[k])})
    k = int(np.argmax(vals))
    x, fx = pattern_search(lambda Y: acq(Y)[0], X[k], float(vals[k]), lower, upper, pattern_iters)
    return Proposal(np.clip(x, lower, upper), fx, False, X.shape[0], {"screen_value": float(vals[k])})
