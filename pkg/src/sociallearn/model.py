"""Domain types for states, signals, likelihoods, networks, and beliefs.

Numeric tables are float64 numpy arrays. Likelihood tables may carry an
exact-rational mirror (tuples of ``fractions.Fraction``) which is used
wherever exact arithmetic matters; the float table is authoritative for
simulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    NegativeWeight,
    NonStochasticJointRow,
    NonStochasticRow,
    ValidationError,
)

ROW_SUM_TOL = 1e-12
#: Row-equality tolerance for float likelihood tables; rational tables use 0.
REAL_EQUIV_TOL = 1e-12

RationalTable = tuple[tuple[Fraction, ...], ...]


def as_rational_table(rows: Sequence[Sequence]) -> RationalTable:
    """Freeze nested rationals into the immutable mirror format."""
    return tuple(tuple(Fraction(x) for x in row) for row in rows)


@dataclass(frozen=True)
class StateSpace:
    """Finite set of world states with a designated true state."""

    labels: tuple[str, ...]
    true_state: int

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))

    @property
    def size(self) -> int:
        return len(self.labels)

    def index_of(self, label: str) -> int:
        return self.labels.index(label)


@dataclass(frozen=True)
class MarginalLikelihood:
    """Per-agent signal likelihood table, one row per state.

    ``table[theta, s]`` is the probability that the agent observes
    signal ``s`` in one period when the state is ``theta``.
    """

    agent: int
    table: np.ndarray
    alphabet: tuple[str, ...]
    rational_table: RationalTable | None = None

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)
        object.__setattr__(self, "alphabet", tuple(str(x) for x in self.alphabet))

    @property
    def n_signals(self) -> int:
        return len(self.alphabet)

    @property
    def n_states(self) -> int:
        return self.table.shape[0]

    def signal_index(self, label: str) -> int:
        return self.alphabet.index(label)


@dataclass(frozen=True)
class SignalModel:
    """Signal-generating law: per-agent marginals, optionally an exact joint.

    In joint mode signals may be correlated across agents within a
    period; they are always independent over time. ``joint`` has one row
    per state over signal profiles flattened in C order with dims
    ``(M_1, ..., M_n)``.
    """

    mode: str  # "independent" | "joint"
    marginals: tuple[MarginalLikelihood, ...]
    joint: np.ndarray | None = None
    joint_rational: RationalTable | None = None

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if self.joint is not None:
            j = np.asarray(self.joint, dtype=float)
            j.setflags(write=False)
            object.__setattr__(self, "joint", j)

    @property
    def n_agents(self) -> int:
        return len(self.marginals)

    @property
    def profile_dims(self) -> tuple[int, ...]:
        return tuple(m.n_signals for m in self.marginals)


@dataclass(frozen=True)
class Network:
    """Directed influence graph with row-stochastic weights.

    ``weights[i, j]`` is the weight agent i places on agent j; the
    diagonal is each agent's self-reliance. The influence edge set is
    derived from positive off-diagonal weights: ``a_ij > 0`` records the
    edge ``(j, i)`` (influence flows from j to i).
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def edges(self) -> set[tuple[int, int]]:
        w = self.weights
        return {(j, i) for i in range(self.n) for j in range(self.n) if i != j and w[i, j] > 0}

    def neighbors(self, i: int) -> list[int]:
        """Agents whose beliefs agent i averages in (excludes i)."""
        return [j for j in range(self.n) if j != i and self.weights[i, j] > 0]


@dataclass(frozen=True)
class BeliefProfile:
    """One belief row per agent, each a distribution over states."""

    beliefs: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.beliefs, dtype=float)
        b.setflags(write=False)
        object.__setattr__(self, "beliefs", b)

    @property
    def n(self) -> int:
        return self.beliefs.shape[0]

    @property
    def n_states(self) -> int:
        return self.beliefs.shape[1]


@dataclass(frozen=True)
class AssumptionReport:
    """Outcome of checking the learning preconditions on a model bundle."""

    strongly_connected: bool
    positive_self_reliance: bool
    zero_self_reliance_agents: tuple[int, ...]
    grain_of_truth: bool
    positive_prior_agents: tuple[int, ...]
    distinguishable: bool
    per_agent_equivalent: tuple[tuple[int, ...], ...]
    global_equivalent: tuple[int, ...]

    @property
    def all_pass(self) -> bool:
        return (
            self.strongly_connected
            and self.positive_self_reliance
            and self.grain_of_truth
            and self.distinguishable
        )

    def lines(self, states: StateSpace | None = None) -> list[str]:
        """Human-readable report, one ``key: value`` line per check."""

        def names(idxs):
            if states is None:
                return list(idxs)
            return [states.labels[k] for k in idxs]

        out = [
            f"strongly_connected: {str(self.strongly_connected).lower()}",
            f"positive_self_reliance: {str(self.positive_self_reliance).lower()}",
        ]
        if not self.positive_self_reliance:
            out.append(f"zero_self_reliance_agents: {list(self.zero_self_reliance_agents)}")
        out.append(f"grain_of_truth: {str(self.grain_of_truth).lower()}")
        out.append(f"positive_prior_agents: {list(self.positive_prior_agents)}")
        out.append(f"distinguishable: {str(self.distinguishable).lower()}")
        for i, eq in enumerate(self.per_agent_equivalent):
            out.append(f"equivalent_to_true[agent{i}]: {names(eq)}")
        out.append(f"equivalent_to_true[all]: {names(self.global_equivalent)}")
        return out


# ---------------------------------------------------------------------------
# Validation operations
# ---------------------------------------------------------------------------

def validate_network(network: Network) -> None:
    """Raise on the first violated network invariant.

    Checks squareness, nonnegativity, and row-stochasticity (1e-12).
    """
    w = network.weights
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ValidationError("weights", f"expected a square matrix, got shape {w.shape}")
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            if w[i, j] < 0:
                raise NegativeWeight(i, j, float(w[i, j]))
        total = float(w[i].sum())
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise NonStochasticRow(i, total)


def validate_states(states: StateSpace) -> None:
    if not states.labels:
        raise ValidationError("states.labels", "must be non-empty")
    if len(set(states.labels)) != len(states.labels):
        raise ValidationError("states.labels", "labels must be unique")
    if any(not lab for lab in states.labels):
        raise ValidationError("states.labels", "labels must be non-empty strings")
    if not 0 <= states.true_state < len(states.labels):
        raise ValidationError(
            "states.true_state",
            f"index {states.true_state} out of range for {len(states.labels)} states",
        )


def validate_marginal(likelihood: MarginalLikelihood, states: StateSpace) -> None:
    """Check stochastic rows, entry bounds, and positivity of the true row."""
    t = likelihood.table
    name = f"agents[{likelihood.agent}].likelihood"
    if t.ndim != 2:
        raise ValidationError(name, f"expected a 2-d table, got shape {t.shape}")
    if t.shape != (states.size, likelihood.n_signals):
        raise DimensionMismatch(
            f"table shape {t.shape} != (|states|={states.size}, |alphabet|={likelihood.n_signals})",
            field=name,
        )
    if np.any(t < 0) or np.any(t > 1):
        th, s = np.argwhere((t < 0) | (t > 1))[0]
        raise ValidationError(f"{name}[{th}][{s}]", f"entry {t[th, s]!r} outside [0, 1]")
    for th in range(t.shape[0]):
        total = float(t[th].sum())
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise NonStochasticRow(th, total, field=name)
    rt = likelihood.rational_table
    if rt is not None:
        if len(rt) != t.shape[0] or any(len(r) != t.shape[1] for r in rt):
            raise DimensionMismatch("rational mirror shape differs from table", field=name)
        for th, row in enumerate(rt):
            if sum(row) != 1:
                raise NonStochasticRow(th, float(sum(row)), field=name + ".rational")
    star = states.true_state
    for s in range(t.shape[1]):
        if t[star, s] <= 0:
            raise ValidationError(
                f"{name}[{states.labels[star]}][{likelihood.alphabet[s]}]",
                "true-state row must be strictly positive in every column",
            )


def validate_beliefs(profile: BeliefProfile) -> None:
    b = profile.beliefs
    if b.ndim != 2:
        raise ValidationError("beliefs", f"expected a 2-d array, got shape {b.shape}")
    if np.any(b < 0) or np.any(b > 1):
        i, th = np.argwhere((b < 0) | (b > 1))[0]
        raise ValidationError(f"beliefs[{i}][{th}]", f"entry {b[i, th]!r} outside [0, 1]")
    for i in range(b.shape[0]):
        total = float(b[i].sum())
        if abs(total - 1.0) > ROW_SUM_TOL:
            raise NonStochasticRow(i, total, field="beliefs")


def validate_signal_model(model: SignalModel, states: StateSpace) -> None:
    """Validate marginals, and in joint mode the joint table consistency."""
    if model.mode not in ("independent", "joint"):
        raise ValidationError("signal_mode", f"unknown mode {model.mode!r}")
    for m in model.marginals:
        validate_marginal(m, states)
    if model.mode == "joint":
        if model.joint is None:
            raise ValidationError("joint", "joint mode requires a joint table")
        j = model.joint
        n_profiles = int(np.prod(model.profile_dims))
        if j.shape != (states.size, n_profiles):
            raise DimensionMismatch(
                f"joint shape {j.shape} != (|states|={states.size}, profiles={n_profiles})",
                field="joint",
            )
        for th in range(j.shape[0]):
            total = float(j[th].sum())
            if abs(total - 1.0) > ROW_SUM_TOL:
                raise NonStochasticJointRow(th, total)
        derived = derive_marginals(j, [m.alphabet for m in model.marginals])
        for m, d in zip(model.marginals, derived):
            if not np.allclose(m.table, d.table, rtol=0, atol=ROW_SUM_TOL):
                raise ValidationError(
                    f"agents[{m.agent}].likelihood",
                    "marginal table is not the marginalization of the joint table",
                )


def check_dimensions(
    network: Network,
    beliefs: BeliefProfile,
    signal_model: SignalModel,
    states: StateSpace,
) -> None:
    """Raise DimensionMismatch when n or the state count disagree anywhere."""
    n = network.n
    if signal_model.n_agents != n:
        raise DimensionMismatch(
            f"network has {n} agents but signal model has {signal_model.n_agents}"
        )
    if beliefs.n != n:
        raise DimensionMismatch(f"network has {n} agents but beliefs have {beliefs.n} rows")
    k = states.size
    if beliefs.n_states != k:
        raise DimensionMismatch(f"beliefs have {beliefs.n_states} columns but |states| = {k}")
    for m in signal_model.marginals:
        if m.n_states != k:
            raise DimensionMismatch(
                f"agent {m.agent} likelihood has {m.n_states} rows but |states| = {k}"
            )


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------

def _tarjan_scc(adjacency: list[list[int]]) -> list[list[int]]:
    """Strongly connected components, iterative Tarjan."""
    n = len(adjacency)
    index = [-1] * n
    lowlink = [0] * n
    on_stack = [False] * n
    stack: list[int] = []
    components: list[list[int]] = []
    counter = 0

    for root in range(n):
        if index[root] != -1:
            continue
        # explicit DFS stack of (vertex, next-child position)
        work = [(root, 0)]
        while work:
            v, pi = work[-1]
            if pi == 0:
                index[v] = lowlink[v] = counter
                counter += 1
                stack.append(v)
                on_stack[v] = True
            advanced = False
            for ci in range(pi, len(adjacency[v])):
                u = adjacency[v][ci]
                if index[u] == -1:
                    work[-1] = (v, ci + 1)
                    work.append((u, 0))
                    advanced = True
                    break
                if on_stack[u]:
                    lowlink[v] = min(lowlink[v], index[u])
            if advanced:
                continue
            work.pop()
            if lowlink[v] == index[v]:
                comp = []
                while True:
                    u = stack.pop()
                    on_stack[u] = False
                    comp.append(u)
                    if u == v:
                        break
                components.append(comp)
            if work:
                parent = work[-1][0]
                lowlink[parent] = min(lowlink[parent], lowlink[v])
    return components


def influence_adjacency(weights: np.ndarray) -> list[list[int]]:
    """Adjacency lists of the influence digraph: j -> i iff a_ij > 0, j != i."""
    w = np.asarray(weights)
    n = w.shape[0]
    adj: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j and w[i, j] > 0:
                adj[j].append(i)
    return adj


def strongly_connected(network: Network) -> bool:
    """True iff the influence digraph on all vertices is strongly connected."""
    if network.n == 0:
        return False
    return len(_tarjan_scc(influence_adjacency(network.weights))) == 1


# ---------------------------------------------------------------------------
# Observational equivalence and assumption checking
# ---------------------------------------------------------------------------

def observationally_equivalent_set(
    likelihood: MarginalLikelihood,
    states: StateSpace,
    tol: float | None = None,
) -> set[int]:
    """States whose likelihood row matches the true state's, column by column.

    With a rational mirror and tol=0 the comparison is exact. When tol
    is None it defaults to 0 for rational tables and 1e-12 otherwise.
    """
    if tol is None:
        tol = 0 if likelihood.rational_table is not None else REAL_EQUIV_TOL
    if tol < 0:
        raise ValidationError("tol", "must be nonnegative")
    star = states.true_state
    if likelihood.rational_table is not None and tol == 0:
        rt = likelihood.rational_table
        return {th for th in range(len(rt)) if rt[th] == rt[star]}
    t = likelihood.table
    diffs = np.abs(t - t[star]).max(axis=1)
    return {th for th in range(t.shape[0]) if diffs[th] <= tol}


def check_assumptions(
    network: Network,
    beliefs: BeliefProfile,
    signal_model: SignalModel,
    states: StateSpace,
) -> AssumptionReport:
    """Evaluate connectivity, self-reliance, grain of truth, and identifiability."""
    check_dimensions(network, beliefs, signal_model, states)

    diag = network.weights.diagonal()
    zero_self = tuple(int(i) for i in np.flatnonzero(diag <= 0))
    star = states.true_state
    positive_prior = tuple(int(i) for i in np.flatnonzero(beliefs.beliefs[:, star] > 0))

    per_agent = tuple(
        tuple(sorted(observationally_equivalent_set(m, states)))
        for m in signal_model.marginals
    )
    global_eq = set(per_agent[0]) if per_agent else {star}
    for eq in per_agent[1:]:
        global_eq &= set(eq)

    return AssumptionReport(
        strongly_connected=strongly_connected(network),
        positive_self_reliance=not zero_self,
        zero_self_reliance_agents=zero_self,
        grain_of_truth=bool(positive_prior),
        positive_prior_agents=positive_prior,
        distinguishable=global_eq == {star},
        per_agent_equivalent=per_agent,
        global_equivalent=tuple(sorted(global_eq)),
    )


# ---------------------------------------------------------------------------
# Joint-table marginalization
# ---------------------------------------------------------------------------

def derive_marginals(
    joint,
    alphabets: Sequence[Sequence[str]],
) -> list[MarginalLikelihood]:
    """Marginalize a joint signal table into per-agent likelihoods.

    ``joint`` rows index states; columns index signal profiles flattened
    in C order over per-agent alphabets. Accepts float or Fraction
    entries; Fraction input yields exact rational mirrors. Positivity of
    the true-state row is not checked here (validate separately).
    """
    dims = tuple(len(a) for a in alphabets)
    rows = [list(r) for r in joint]
    n_profiles = int(np.prod(dims))
    exact = all(isinstance(x, (Fraction, int)) for r in rows for x in r)

    for th, row in enumerate(rows):
        if len(row) != n_profiles:
            raise DimensionMismatch(
                f"joint row {th} has {len(row)} entries, expected {n_profiles}",
                field="joint",
            )
        total = sum(Fraction(x) for x in row) if exact else float(np.sum(row))
        if (exact and total != 1) or (not exact and abs(total - 1.0) > ROW_SUM_TOL):
            raise NonStochasticJointRow(th, float(total))

    out = []
    for i, alphabet in enumerate(alphabets):
        zero = Fraction(0) if exact else 0.0
        table = [[zero] * dims[i] for _ in rows]
        for p, coords in enumerate(np.ndindex(*dims)):
            s = coords[i]
            for th, row in enumerate(rows):
                table[th][s] += row[p]
        rational = as_rational_table(table) if exact else None
        out.append(
            MarginalLikelihood(
                agent=i,
                table=np.array(table, dtype=float),
                alphabet=tuple(alphabet),
                rational_table=rational,
            )
        )
    return out


def product_joint(marginals: Sequence[MarginalLikelihood]):
    """Joint table of independent agents (the product of the marginals).

    Returns (float ndarray, rational mirror or None).
    """
    dims = tuple(m.n_signals for m in marginals)
    k = marginals[0].n_states
    exact = all(m.rational_table is not None for m in marginals)
    rows = []
    for th in range(k):
        row = []
        for coords in np.ndindex(*dims):
            if exact:
                v = Fraction(1)
                for m, s in zip(marginals, coords):
                    v *= m.rational_table[th][s]
            else:
                v = 1.0
                for m, s in zip(marginals, coords):
                    v *= float(m.table[th, s])
            row.append(v)
        rows.append(row)
    table = np.array([[float(v) for v in row] for row in rows])
    return table, (as_rational_table(rows) if exact else None)
