"""Finite deterministic MDPs for checking the modified-cost construction.

With ``L_delta(s, a) = V*(s) - gamma V*(f(s, a))`` and terminal cost ``V*``, a
finite-horizon problem posed on a wrong model ``f_hat`` returns the true
optimal value and first action whenever ``V*(f_hat(s, a)) == V*(f(s, a))``:
the modified terms then telescope exactly. For an arbitrary model the
unmodified first stage only sees ``f_hat(x_0, a_0)`` and the identity fails;
``sweep(..., model="arbitrary")`` measures by how much.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

MAX_SEQUENCES = 10**7


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FiniteMdp:
    """Deterministic MDP with a true transition table and a model table.

    ``f[s, a]`` and ``f_hat[s, a]`` are successor indices; ``cost[s, a]`` is
    the stage cost.
    """

    f: np.ndarray
    f_hat: np.ndarray
    cost: np.ndarray
    gamma: float
    horizon: int

    def __post_init__(self):
        for name in ("f", "f_hat", "cost"):
            object.__setattr__(self, name, np.asarray(getattr(self, name)))
        n, m = self.cost.shape
        if self.f.shape != (n, m) or self.f_hat.shape != (n, m):
            raise ValueError("transition tables must match the cost table shape")
        for table in (self.f, self.f_hat):
            if table.min() < 0 or table.max() >= n:
                raise ValueError("transition maps outside the state set")
        if not np.all(np.isfinite(self.cost)):
            raise ValueError("stage costs must be finite")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def n_states(self) -> int:
        return self.cost.shape[0]

    @property
    def n_actions(self) -> int:
        return self.cost.shape[1]


MODEL_KINDS = ("consistent", "perfect", "arbitrary")


def random_mdp(rng: np.random.Generator, n_states: int = 4, n_actions: int = 2, gamma: float = 0.9,
               horizon: int = 3, model: str = "consistent") -> FiniteMdp:
    """Random deterministic MDP with a wrong model of the requested kind.

    States are grouped into ``ceil(n_states / 2)`` classes that share stage
    costs and successor classes, so members of a class share ``V*``. The
    ``consistent`` model swaps true successors for other members of the same
    class: it is wrong as a transition table but agrees with the truth on
    ``V*`` of every successor. ``arbitrary`` draws the model uniformly and
    ``perfect`` copies the true table.

    For ``gamma = 1`` class 0 is absorbing at zero cost and every other class
    reaches it under action 0, so ``V*`` stays finite.
    """
    if model not in MODEL_KINDS:
        raise ValueError(f"model must be one of {MODEL_KINDS}")
    n_cls = max(1, -(-n_states // 2))
    # every class gets at least one state; the rest are spread at random
    cls_of = np.r_[np.arange(n_cls), rng.integers(0, n_cls, size=n_states - n_cls)]
    rng.shuffle(cls_of)
    members = [np.flatnonzero(cls_of == c) for c in range(n_cls)]

    f_cls = rng.integers(0, n_cls, size=(n_cls, n_actions))
    cost_cls = rng.uniform(0.0, 1.0, size=(n_cls, n_actions))
    if gamma >= 1.0:
        f_cls[0, :] = 0
        cost_cls[0, :] = 0.0
        for c in range(1, n_cls):
            f_cls[c, 0] = rng.integers(0, c)

    def pick(c):
        return members[c][rng.integers(0, members[c].size)]

    cost = cost_cls[cls_of]
    f = np.array([[pick(f_cls[cls_of[s], a]) for a in range(n_actions)] for s in range(n_states)])
    if model == "perfect":
        f_hat = f.copy()
    elif model == "arbitrary":
        f_hat = rng.integers(0, n_states, size=(n_states, n_actions))
    else:
        f_hat = np.array([[pick(f_cls[cls_of[s], a]) for a in range(n_actions)] for s in range(n_states)])
        # force at least one genuine disagreement where a class has a twin
        diff = np.argwhere([[members[f_cls[cls_of[s], a]].size > 1 for a in range(n_actions)]
                            for s in range(n_states)])
        if diff.size and np.array_equal(f_hat, f):
            s, a = diff[rng.integers(0, len(diff))]
            twins = members[cls_of[f[s, a]]]
            f_hat[s, a] = twins[twins != f[s, a]][0]
    return FiniteMdp(f, f_hat, cost, gamma, horizon)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-12, max_sweeps: int = 10**6):
    """Optimal value and greedy policy (ties go to the lowest action index).

    Costs are nonnegative or ``gamma < 1``, so iterating from zero converges.
    For ``gamma = 1`` with an absorbing zero-cost state the iteration reaches
    its fixed point in at most ``n_states`` sweeps.
    """
    V = np.zeros(mdp.n_states)
    for _ in range(max_sweeps):
        Q = mdp.cost + mdp.gamma * V[mdp.f]
        V_new = Q.min(axis=1)
        if np.max(np.abs(V_new - V)) <= tol:
            V = V_new
            break
        V = V_new
    else:
        raise ConvergenceError(f"value iteration did not converge in {max_sweeps} sweeps")
    Q = mdp.cost + mdp.gamma * V[mdp.f]
    return V, np.argmin(Q, axis=1)


def bellman_residual(mdp: FiniteMdp, V) -> float:
    return float(np.max(np.abs((mdp.cost + mdp.gamma * V[mdp.f]).min(axis=1) - V)))


def modified_costs(mdp: FiniteMdp, V_star):
    """``(L_delta[s, a], T_delta[s])`` built from the true successors."""
    V_star = np.asarray(V_star, dtype=float)
    return V_star[:, None] - mdp.gamma * V_star[mdp.f], V_star.copy()


def sequence_cost(mdp: FiniteMdp, s0: int, actions, L_delta, T_delta) -> float:
    """Cost of an open-loop action sequence rolled out on the model."""
    g = mdp.gamma
    total = mdp.cost[s0, actions[0]]
    s = mdp.f_hat[s0, actions[0]]
    for i, a in enumerate(actions[1:], start=1):
        total += g**i * L_delta[s, a]
        s = mdp.f_hat[s, a]
    return total + g ** len(actions) * T_delta[s]


@dataclass
class TheoremReport:
    max_gap: float
    agreement: float
    gamma: float
    horizon: int
    V_star: np.ndarray
    V_hat: np.ndarray


def verify_theorem1(mdp: FiniteMdp) -> TheoremReport:
    """Brute-force the modified finite-horizon problem and compare to ``V*``, ``pi*``.

    Raises:
        ValueError: if ``n_actions ** horizon`` exceeds ``1e7``.
    """
    n, m, N = mdp.n_states, mdp.n_actions, mdp.horizon
    if m**N > MAX_SEQUENCES:
        raise ValueError(f"{m}^{N} action sequences exceed the enumeration limit {MAX_SEQUENCES}")
    V_star, pi_star = value_iteration(mdp)
    L_delta, T_delta = modified_costs(mdp, V_star)
    V_hat = np.full(n, np.inf)
    first = np.zeros(n, dtype=int)
    for s in range(n):
        # lexicographic enumeration keeps ties on the lowest first action
        for seq in itertools.product(range(m), repeat=N):
            c = sequence_cost(mdp, s, seq, L_delta, T_delta)
            if c < V_hat[s]:
                V_hat[s], first[s] = c, seq[0]
    # first-action agreement is judged up to ties in Q*
    Q = mdp.cost + mdp.gamma * V_star[mdp.f]
    qmin = Q.min(axis=1)
    tie_tol = 1e-9 * np.maximum(1.0, np.abs(qmin))
    agree = np.abs(Q[np.arange(n), first] - qmin) <= tie_tol
    return TheoremReport(float(np.max(np.abs(V_hat - V_star))), float(agree.mean()),
                         mdp.gamma, N, V_star, V_hat)


def sweep(seeds, n_states: int = 4, n_actions: int = 2, horizons=(2, 3, 5), gammas=(0.9, 0.99, 1.0),
          model: str = "consistent") -> list[dict]:
    """Run the check for every seed, horizon and discount factor."""
    rows = []
    for seed in seeds:
        for N in horizons:
            for g in gammas:
                rng = np.random.default_rng([int(seed), int(N), int(round(g * 1000))])
                mdp = random_mdp(rng, n_states, n_actions, g, N, model)
                rep = verify_theorem1(mdp)
                rows.append({"seed": int(seed), "horizon": N, "gamma": g, "model": model,
                             "mismatch": int(np.sum(mdp.f != mdp.f_hat)),
                             "max_gap": rep.max_gap, "agreement": rep.agreement})
    return rows
