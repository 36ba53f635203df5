"""Episode loop for the three learning modes and the artifacts each run leaves behind.

Output directory layout::

    archive.csv        one row per evaluated episode (see ParetoArchive.header)
    pareto_trace.csv   episode, hypervolume, front_size, r1..rM
    failures.csv       episode, step, message for episodes that broke down
    episodes/ep_<k>.csv  EpisodeLog of episode k (CSTR problem only)
    manifest.json      config echo, seeds, input hash, final parameters

A run resumes from these files: evaluated episodes are never repeated and
learner state is rebuilt from the archive and the stored logs.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import integrate
from scipy.stats import qmc

from . import cdpg, mobo, nlp_mpc, objectives, ode_sim

log = logging.getLogger(__name__)

MODES = ("mpc-rl", "bo", "mobo")
PROBLEMS = ("cstr", "synthetic")
MODEL_CHOICES = ("misspecified", "perfect")

# stream identifiers of the counter-based seeding scheme
STREAM_INITIAL_STATE = 0
STREAM_NOISE = 1
STREAM_PROPOSAL = 2
STREAM_DESIGN = 3

# narrower than the full constraint box: from farther out the misspecified
# loop with the initial parameters often settles on the cold steady state
DEFAULT_BOX_LOWER = (103.0, 0.11, 431.0)
DEFAULT_BOX_UPPER = (107.0, 0.13, 435.0)

SYNTHETIC_A = np.array([0.2, 0.3])
SYNTHETIC_B = np.array([0.8, 0.7])


class ConfigError(ValueError):
    pass


class EpisodeFailed(RuntimeError):
    def __init__(self, episode: int, step: int, message: str):
        super().__init__(f"episode {episode} failed at step {step}: {message}")
        self.episode, self.step, self.message = episode, step, message


class InitializationError(RuntimeError):
    pass


def _default_theta_bounds():
    q2 = 2.0 * ode_sim.STAGE_STATE_WEIGHTS
    r2 = 2.0 * ode_sim.STAGE_CONTROL_WEIGHTS
    lo = np.r_[-50.0, np.full(3, nlp_mpc.PD_FLOOR), np.full(2, nlp_mpc.PD_FLOOR),
               np.full(3, nlp_mpc.PD_FLOOR), np.full(5, -100.0)]
    hi = np.r_[50.0, q2, r2, q2, np.full(5, 100.0)]
    return lo, hi


@dataclass
class ExperimentConfig:
    """All knobs of a run. Loaded from a JSON object whose keys are these field names."""

    mode: str = "mobo"
    problem: str = "cstr"
    episodes: int = 600
    steps: int = 60
    dt: float = ode_sim.DT
    N: int = 10
    gamma: float = 0.99
    alpha: float = 1e-3
    exploration: float = cdpg.EXPLORATION_FRACTION
    beta: float = 1.0
    seed: int = 0
    n_init: int = 8
    safety_factor: float = 10.0
    n_mc: int = mobo.N_MC
    mpc_model: str = "misspecified"
    initial_box_lower: list = field(default_factory=lambda: list(DEFAULT_BOX_LOWER))
    initial_box_upper: list = field(default_factory=lambda: list(DEFAULT_BOX_UPPER))
    theta_lower: Optional[list] = None
    theta_upper: Optional[list] = None
    initial_theta: Optional[list] = None
    params: dict = field(default_factory=dict)
    model_biases: dict = field(default_factory=dict)
    kkt_tol: float = nlp_mpc.KKT_TOL
    max_iter: int = 200

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.problem not in PROBLEMS:
            raise ConfigError(f"problem must be one of {PROBLEMS}, got {self.problem!r}")
        if self.mpc_model not in MODEL_CHOICES:
            raise ConfigError(f"mpc_model must be one of {MODEL_CHOICES}")
        if self.problem == "synthetic" and self.mode == "mpc-rl":
            raise ConfigError("the synthetic problem has no policy gradient; use bo or mobo")
        for name in ("episodes", "steps", "N"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_init < 0:
            raise ConfigError("n_init must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if self.alpha < 0 or self.exploration < 0 or not self.safety_factor > 0:
            raise ConfigError("alpha and exploration must be nonnegative, safety_factor positive")
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        lo, hi = self.bounds()
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(lo < hi)):
            raise ConfigError("theta bounds must be finite with lower < upper")
        t0 = self.theta0()
        if np.any(t0 < lo) or np.any(t0 > hi):
            raise ConfigError("initial theta lies outside the search bounds")
        if self.problem == "cstr":
            blo, bhi = self.initial_box()
            if blo.shape != (3,) or np.any(blo > bhi):
                raise ConfigError("initial state box needs 3 entries with lower <= upper")
            self.cstr_params()
            self.mpc_variant()

    # -- derived objects --------------------------------------------------

    @property
    def n_theta(self) -> int:
        return 2 if self.problem == "synthetic" else nlp_mpc.theta_dim()

    @property
    def n_objectives(self) -> int:
        return 2 if self.problem == "synthetic" else 4

    def bounds(self):
        if self.problem == "synthetic":
            dlo, dhi = np.zeros(2), np.ones(2)
        else:
            dlo, dhi = _default_theta_bounds()
        lo = dlo if self.theta_lower is None else np.asarray(self.theta_lower, float)
        hi = dhi if self.theta_upper is None else np.asarray(self.theta_upper, float)
        if lo.shape != (self.n_theta,) or hi.shape != (self.n_theta,):
            raise ConfigError(f"theta bounds need {self.n_theta} entries")
        return lo, hi

    def theta0(self) -> np.ndarray:
        if self.initial_theta is not None:
            t = np.asarray(self.initial_theta, float)
            if t.shape != (self.n_theta,):
                raise ConfigError(f"initial_theta needs {self.n_theta} entries")
            return t
        if self.problem == "synthetic":
            return np.full(2, 0.5)
        return nlp_mpc.ThetaVector.initial().to_array()

    def initial_box(self):
        return np.asarray(self.initial_box_lower, float), np.asarray(self.initial_box_upper, float)

    def cstr_params(self) -> ode_sim.CstrParams:
        try:
            return ode_sim.CstrParams(**self.params)
        except TypeError as exc:
            raise ConfigError(f"bad params override: {exc}") from None

    def mpc_variant(self) -> ode_sim.ModelVariant:
        base = ode_sim.MISSPECIFIED if self.mpc_model == "misspecified" else ode_sim.TRUE_PLANT
        try:
            return dataclasses.replace(base, **self.model_biases) if self.model_biases else base
        except TypeError as exc:
            raise ConfigError(f"bad model_biases override: {exc}") from None

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must hold a JSON object")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def stream(root: int, kind: int, index: int = 0) -> np.random.SeedSequence:
    """Seed of stream ``kind`` for episode or proposal ``index``; independent of the mode."""
    return np.random.SeedSequence([int(root), int(kind), int(index)])


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


# ----------------------------------------------------------------------
# evaluators
# ----------------------------------------------------------------------


@dataclass
class Evaluation:
    f: np.ndarray
    log: Optional[cdpg.EpisodeLog] = None
    critic: Optional[cdpg.CriticParams] = None
    scores: Optional[objectives.EpisodeScores] = None
    wall_time: float = 0.0

    @property
    def gradient(self) -> Optional[np.ndarray]:
        if self.log is None:
            return None
        return cdpg.policy_gradient(self.log, self.critic.w)[0]


class CstrTask:
    """Closed-loop episodes of the MPC on the true reactor."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        cfg = config
        params = cfg.cstr_params()
        self.params = params
        self.problem = nlp_mpc.MpcProblem(
            N=cfg.N, gamma=cfg.gamma, variant=cfg.mpc_variant(), dt=cfg.dt,
            model=nlp_mpc.cstr_model(cfg.mpc_variant(), params), kkt_tol=cfg.kkt_tol, max_iter=cfg.max_iter)
        self.sigma = cdpg.exploration_scale(self.problem.control_lb, self.problem.control_ub, cfg.exploration)

    def plant_step(self, x, u):
        return ode_sim.rk4_step(x, u, self.config.dt, ode_sim.TRUE_PLANT, self.params)

    def initial_state(self, episode: int) -> np.ndarray:
        rng = np.random.default_rng(stream(self.config.seed, STREAM_INITIAL_STATE, episode))
        return ode_sim.sample_initial_state(rng, self.config.initial_box())

    def run_episode(self, theta, episode: int) -> Evaluation:
        """Roll out one episode and fit the critic on it.

        Raises:
            EpisodeFailed: on an MPC or sensitivity breakdown, a plant state
                outside the model domain, or a singular critic system.
        """
        cfg = self.config
        t0 = time.perf_counter()
        rng = np.random.default_rng(stream(cfg.seed, STREAM_NOISE, episode))
        try:
            ep_log = cdpg.rollout(self.problem, theta, self.initial_state(episode), self.plant_step,
                                  ode_sim.rl_stage_cost, cfg.steps, rng, self.sigma)
        except cdpg.RolloutError as exc:
            raise EpisodeFailed(episode, exc.step, str(exc)) from exc
        except ode_sim.DomainError as exc:
            raise EpisodeFailed(episode, -1, f"plant left its domain: {exc}") from exc
        try:
            critic = cdpg.fit_critic(ep_log, cfg.gamma)
        except cdpg.SingularSystemError as exc:
            raise EpisodeFailed(episode, cfg.steps, str(exc)) from exc
        scores = objectives.score_episode(ep_log, critic, cfg.gamma, cfg.beta)
        return Evaluation(np.full(4, np.nan), ep_log, critic, scores, time.perf_counter() - t0)


def synthetic_objectives(theta) -> np.ndarray:
    """Squared distances to two anchors; the Pareto set is the segment between them."""
    th = np.asarray(theta, float)
    return np.array([np.sum((th - SYNTHETIC_A) ** 2), np.sum((th - SYNTHETIC_B) ** 2)])


def synthetic_reference() -> np.ndarray:
    d2 = float(np.sum((SYNTHETIC_A - SYNTHETIC_B) ** 2))
    return np.full(2, 1.1 * d2)


def synthetic_max_hypervolume(ref=None) -> float:
    """Exact hypervolume of the analytic Pareto front against ``ref``.

    On the segment, ``sqrt(f1) + sqrt(f2) = |a - b|``, so the front is
    ``f2 = (D - sqrt(f1))^2`` for ``f1 <= D^2``.
    """
    ref = synthetic_reference() if ref is None else np.asarray(ref, float)
    D = float(np.linalg.norm(SYNTHETIC_A - SYNTHETIC_B))

    def front(f1):
        return (D - np.sqrt(f1)) ** 2 if f1 < D * D else 0.0

    val, _ = integrate.quad(lambda f1: max(ref[1] - front(f1), 0.0), 0.0, ref[0],
                            points=[min(D * D, ref[0])], epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


class SyntheticTask:
    def __init__(self, config: ExperimentConfig):
        self.config = config

    def run_episode(self, theta, episode: int) -> Evaluation:
        t0 = time.perf_counter()
        return Evaluation(synthetic_objectives(theta), wall_time=time.perf_counter() - t0)


def make_task(config: ExperimentConfig):
    return CstrTask(config) if config.problem == "cstr" else SyntheticTask(config)


def run_episode(config: ExperimentConfig, theta, episode: int = 0) -> Evaluation:
    """One evaluation of ``theta``; ``f3`` is zero because no previous episode is known."""
    ev = make_task(config).run_episode(theta, episode)
    if ev.scores is not None:
        ev.f = ev.scores.with_previous(None).to_array()
    return ev


def initial_design(config: ExperimentConfig) -> np.ndarray:
    """The configured initial parameters followed by ``n_init`` scrambled Sobol points."""
    lo, hi = config.bounds()
    pts = [config.theta0()]
    if config.n_init:
        sob = qmc.Sobol(d=lo.size, scramble=True, seed=np.random.default_rng(stream(config.seed, STREAM_DESIGN)))
        pts.extend(qmc.scale(sob.random(config.n_init), lo, hi))
    return np.array(pts)


# ----------------------------------------------------------------------
# run state and persistence
# ----------------------------------------------------------------------


TRACE_HEADER_PREFIX = ["episode", "hypervolume", "front_size"]
FAILURE_HEADER = ["episode", "step", "message"]


@dataclass
class Failure:
    episode: int
    step: int
    message: str


@dataclass
class RunState:
    """Everything the loop needs to continue; rebuilt from disk on resume."""

    archive: mobo.ParetoArchive
    failures: list = field(default_factory=list)
    previous_vc: Optional[float] = None
    # mpc-rl learner state
    theta: Optional[np.ndarray] = None
    gradient: Optional[np.ndarray] = None
    f1: Optional[float] = None
    alpha: float = 0.0

    @property
    def next_episode(self) -> int:
        done = [e.episode for e in self.archive.entries] + [f.episode for f in self.failures]
        return max(done) + 1 if done else 0


@dataclass
class ExperimentResult:
    archive: mobo.ParetoArchive
    failures: list
    final: Optional[mobo.ArchiveEntry]
    out_dir: Optional[Path]
    status: str = "complete"


class Artifacts:
    def __init__(self, out_dir, n_objectives: int):
        self.root = Path(out_dir)
        self.episodes = self.root / "episodes"
        self.n_objectives = n_objectives

    @property
    def archive_csv(self) -> Path:
        return self.root / "archive.csv"

    @property
    def trace_csv(self) -> Path:
        return self.root / "pareto_trace.csv"

    @property
    def failures_csv(self) -> Path:
        return self.root / "failures.csv"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def episode_csv(self, k: int) -> Path:
        return self.episodes / f"ep_{k}.csv"

    def prepare(self) -> None:
        self.episodes.mkdir(parents=True, exist_ok=True)

    def trace_header(self) -> list[str]:
        return TRACE_HEADER_PREFIX + [f"r{m + 1}" for m in range(self.n_objectives)]

    def write_trace(self, archive: mobo.ParetoArchive) -> None:
        # the trace is rebuilt by replaying the archive so it stays consistent after a resume
        replay = mobo.ParetoArchive(archive.n_objectives, fixed_reference=archive.fixed_reference)
        with open(self.trace_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.trace_header())
            for e in archive.entries:
                replay.add(e.episode, e.theta, e.f, e.accepted, e.wall_time, e.mode)
                w.writerow([e.episode, repr(float(replay.hypervolume())), len(replay.front_indices())]
                           + [repr(float(v)) for v in replay.reference])

    def write_failures(self, failures) -> None:
        with open(self.failures_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(FAILURE_HEADER)
            for f in failures:
                w.writerow([f.episode, f.step, f.message])

    def read_failures(self) -> list:
        if not self.failures_csv.exists():
            return []
        with open(self.failures_csv, newline="") as fh:
            return [Failure(int(r["episode"]), int(r["step"]), r["message"]) for r in csv.DictReader(fh)]


def manifest_schema() -> dict:
    return json.loads(resources.files(__package__).joinpath("manifest_schema.json").read_text())


def _package_version() -> str:
    from . import __version__
    return __version__


def build_manifest(config: ExperimentConfig, state: RunState, final: Optional[mobo.ArchiveEntry],
                   status: str) -> dict:
    cfg_json = config.canonical_json()
    return {
        "schema_version": 1,
        "package_version": _package_version(),
        "status": status,
        "config": config.to_dict(),
        "input_hash": git_blob_hash(cfg_json.encode()),
        "seeds": {
            "root": int(config.seed),
            "scheme": "SeedSequence([root, stream, index])",
            "streams": {"initial_state": STREAM_INITIAL_STATE, "noise": STREAM_NOISE,
                        "proposal": STREAM_PROPOSAL, "design": STREAM_DESIGN},
        },
        "episodes_evaluated": len(state.archive),
        "episodes_failed": [f.episode for f in state.failures],
        "reference": [float(v) for v in state.archive.reference] if state.archive.reference is not None else None,
        "hypervolume": float(state.archive.hypervolume()),
        "final": None if final is None else {
            "episode": final.episode, "theta": [float(v) for v in final.theta], "f": [float(v) for v in final.f]},
    }


# ----------------------------------------------------------------------
# the loop
# ----------------------------------------------------------------------


class Experiment:
    """Sequential episode loop; one instance per output directory."""

    def __init__(self, config: ExperimentConfig, out_dir=None):
        self.config = config
        self.task = make_task(config)
        self.art = Artifacts(out_dir, config.n_objectives) if out_dir is not None else None
        fixed = synthetic_reference() if config.problem == "synthetic" else None
        self.state = RunState(mobo.ParetoArchive(config.n_objectives, fixed_reference=fixed), alpha=config.alpha)
        self._evals: dict[int, Evaluation] = {}

    # -- resume -----------------------------------------------------------

    def load(self) -> None:
        """Rebuild the run state from existing artifacts, if any."""
        if self.art is None or not self.art.archive_csv.exists():
            return
        st = self.state
        arch = mobo.ParetoArchive.from_csv(self.art.archive_csv, fixed_reference=st.archive.fixed_reference)
        if arch.n_objectives != self.config.n_objectives:
            raise ConfigError("existing archive has a different number of objectives")
        st.archive = arch
        st.failures = self.art.read_failures()
        if self.config.problem != "cstr" or not arch.entries:
            return
        st.previous_vc = self._replayed(arch.entries[-1]).scores.critic_sum
        if self.config.mode == "mpc-rl":
            # each rejected trial or failure halved the step size once
            accepted = [e for e in arch.entries if e.accepted]
            n_halvings = sum(not e.accepted for e in arch.entries) + len(st.failures)
            st.alpha = self.config.alpha * 0.5 ** n_halvings
            if accepted:
                cur = accepted[-1]
                ev = self._replayed(cur)
                st.theta, st.gradient, st.f1 = cur.theta.copy(), ev.gradient, float(cur.f[0])
        log.info("resumed with %d archived episodes, next episode %d", len(arch), st.next_episode)

    def _replayed(self, entry: mobo.ArchiveEntry) -> Evaluation:
        ep_log = cdpg.EpisodeLog.from_csv(self.art.episode_csv(entry.episode))
        critic = cdpg.fit_critic(ep_log, self.config.gamma)
        scores = objectives.score_episode(ep_log, critic, self.config.gamma, self.config.beta)
        return Evaluation(entry.f, ep_log, critic, scores)

    # -- evaluation -------------------------------------------------------

    def evaluate(self, theta, episode: int) -> Optional[Evaluation]:
        """Run one episode; a failure is recorded and returns ``None``."""
        st = self.state
        try:
            ev = self.task.run_episode(theta, episode)
        except EpisodeFailed as exc:
            log.warning("%s", exc)
            st.failures.append(Failure(exc.episode, exc.step, exc.message))
            if self.art is not None:
                self.art.write_failures(st.failures)
            return None
        if ev.scores is not None:
            ev.f = ev.scores.with_previous(st.previous_vc).to_array()
            st.previous_vc = ev.scores.critic_sum
            if self.art is not None:
                ev.log.to_csv(self.art.episode_csv(episode))
        self._evals[episode] = ev
        return ev

    def record(self, episode: int, theta, ev: Evaluation, accepted: bool) -> mobo.ArchiveEntry:
        entry = self.state.archive.add(episode, theta, ev.f, accepted, ev.wall_time, self.config.mode)
        if self.art is not None:
            self.state.archive.to_csv(self.art.archive_csv)
            self.art.write_trace(self.state.archive)
        log.info("episode %d f=%s hv=%.6g%s", episode, np.array2string(ev.f, precision=4),
                 entry.hypervolume, "" if accepted else " (rejected)")
        return entry

    def safe(self, ev: Evaluation) -> bool:
        inc = self.state.archive.incumbent()
        if inc is None or inc.f[0] <= 0:
            return True
        return bool(ev.f[0] <= self.config.safety_factor * inc.f[0])

    # -- phases -----------------------------------------------------------

    def initialization_phase(self) -> None:
        """Evaluate the initial parameters and the quasi-random design not yet in the archive.

        Raises:
            InitializationError: when every design point fails.
        """
        design = initial_design(self.config)
        st = self.state
        for k, theta in enumerate(design):
            if k in st.archive.episodes or k in {f.episode for f in st.failures}:
                continue
            if k >= self.config.episodes:
                break
            ev = self.evaluate(theta, k)
            if ev is not None:
                self.record(k, theta, ev, True)
        n_done = min(len(design), self.config.episodes)
        ok = [e for e in st.archive.entries if e.episode < n_done]
        if n_done and not ok:
            raise InitializationError(
                f"all {n_done} initial design points failed: "
                + "; ".join(f"ep {f.episode}: {f.message}" for f in st.failures[:3]))

    def _propose(self, episode: int) -> np.ndarray:
        cfg = self.config
        arch = self.state.archive
        if cfg.mode == "bo":
            sur = mobo.fit_surrogate(arch, [0])
            kind = "ei"
        else:
            sur = mobo.fit_surrogate(arch)
            kind = "ehvi"
        seed = stream(cfg.seed, STREAM_PROPOSAL, episode)
        prop = mobo.propose_next(arch, sur, cfg.bounds(), seed, kind, n_mc=cfg.n_mc)
        if prop.fallback:
            log.info("episode %d: acquisition flat, using the max-variance candidate", episode)
        return prop.theta

    def run_bayesian(self) -> None:
        self.initialization_phase()
        st = self.state
        while st.next_episode < self.config.episodes:
            k = st.next_episode
            theta = self._propose(k)
            ev = self.evaluate(theta, k)
            if ev is not None:
                self.record(k, theta, ev, self.safe(ev))

    def run_gradient(self) -> None:
        """Plain MPC-RL: gradient steps on the critic's policy gradient with backtracking.

        A trial whose ``f1`` exceeds the current one, or that fails, is
        rejected: the parameters revert and the step size halves.
        """
        cfg = self.config
        st = self.state
        lo, hi = cfg.bounds()
        while st.next_episode < cfg.episodes:
            k = st.next_episode
            if st.theta is None:
                theta = cfg.theta0()
            else:
                theta = np.clip(cdpg.gradient_descent_step(st.theta, st.gradient, st.alpha), lo, hi)
            ev = self.evaluate(theta, k)
            if ev is None:
                st.alpha *= 0.5
                if st.theta is None and k >= cfg.n_init:
                    raise InitializationError("initial parameters fail repeatedly")
                continue
            better = st.f1 is None or ev.f[0] <= st.f1
            self.record(k, theta, ev, better)
            if better:
                st.theta, st.gradient, st.f1 = theta.copy(), ev.gradient, float(ev.f[0])
            else:
                st.alpha *= 0.5

    def final(self) -> Optional[mobo.ArchiveEntry]:
        arch = self.state.archive
        if self.config.mode == "mobo" and self.config.problem == "cstr":
            return arch.select_final()
        if self.config.mode == "mpc-rl":
            acc = [e for e in arch.entries if e.accepted]
            return acc[-1] if acc else None
        return arch.incumbent()

    def run(self) -> ExperimentResult:
        if self.art is not None:
            self.art.prepare()
            self.load()
        status = "complete"
        try:
            if self.config.mode == "mpc-rl":
                self.run_gradient()
            else:
                self.run_bayesian()
        except InitializationError:
            status = "failed"
            raise
        except BaseException:
            status = "interrupted"
            raise
        finally:
            final = self.final()
            if self.art is not None:
                self.art.manifest.write_text(
                    json.dumps(build_manifest(self.config, self.state, final, status), indent=2) + "\n")
        return ExperimentResult(self.state.archive, self.state.failures, final, self.art and self.art.root, status)

    @property
    def evaluations(self) -> dict:
        """Evaluations produced in this session, keyed by episode."""
        return self._evals


def run_experiment(config: ExperimentConfig, out_dir=None) -> ExperimentResult:
    return Experiment(config, out_dir).run()


# ----------------------------------------------------------------------
# replay and baselines
# ----------------------------------------------------------------------


def replay_log(path, gamma: float = 0.99, beta: float = 1.0, previous_log=None) -> dict:
    """Recompute the objectives of a stored episode log.

    ``previous_log`` is the log of the preceding evaluated episode; without
    it ``f3`` is zero.
    """
    ep_log = cdpg.EpisodeLog.from_csv(path)
    critic = cdpg.fit_critic(ep_log, gamma)
    scores = objectives.score_episode(ep_log, critic, gamma, beta)
    prev_vc = None
    if previous_log is not None:
        prev = cdpg.EpisodeLog.from_csv(previous_log)
        prev_vc = objectives.score_episode(prev, cdpg.fit_critic(prev, gamma), gamma, beta).critic_sum
    f = scores.with_previous(prev_vc)
    return {"f1": f.f1, "f2": f.f2, "f3": f.f3, "f4": f.f4, "critic_sum": scores.critic_sum,
            "steps": len(ep_log), "residual_w": critic.residual_w, "residual_nu": critic.residual_nu}


def previous_log_for(path) -> Optional[Path]:
    """Log of the nearest earlier episode stored next to ``path``."""
    path = Path(path)
    try:
        k = int(path.stem.split("_")[-1])
    except ValueError:
        return None
    earlier = []
    for p in path.parent.glob("ep_*.csv"):
        try:
            j = int(p.stem.split("_")[-1])
        except ValueError:
            continue
        if j < k:
            earlier.append((j, p))
    return max(earlier)[1] if earlier else None


def perfect_model_baseline(config: ExperimentConfig, episodes: int, theta=None) -> np.ndarray:
    """Per-episode ``f1`` of the perfect-model MPC, with the same initial states and noise as a run."""
    cfg = config.replace(mpc_model="perfect", model_biases={}, problem="cstr")
    task = CstrTask(cfg)
    th = cfg.theta0() if theta is None else np.asarray(theta, float)
    return np.array([task.run_episode(th, k).scores.f1 for k in range(episodes)])


def closed_loop(config: ExperimentConfig, theta, x0, steps: Optional[int] = None) -> cdpg.EpisodeLog:
    """Noise-free closed loop of the configured MPC on the true plant."""
    task = CstrTask(config)
    return cdpg.rollout(task.problem, theta, x0, task.plant_step, ode_sim.rl_stage_cost,
                        steps or config.steps)
