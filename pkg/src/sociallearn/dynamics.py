"""Belief-update law, forecast computations, signal sampling, simulation loop.

Each agent combines its private Bayesian posterior with a weighted
average of neighbor beliefs:

    mu_i'(theta) = a_ii * mu_i(theta) * l_i(s_i | theta) / m_i(s_i)
                   + sum_j a_ij * mu_j(theta)

where m_i is the agent's one-step forecast of its next signal.
Arithmetic is in linear probability space with per-step renormalization;
exact zeros are preserved exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import BeliefDriftError, DimensionMismatch, ZeroForecastMass
from .model import (
    BeliefProfile,
    MarginalLikelihood,
    Network,
    SignalModel,
    StateSpace,
    check_dimensions,
)

#: Max tolerated |row sum - 1| before renormalizing; larger is a hard error.
DRIFT_HARD_LIMIT = 1e-9

_MASK64 = (1 << 64) - 1
#: Key mixer so stream keys differ from the raw user seed.
_KEY_SALT = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class SignalProfile:
    """Per-agent observed signal indices for one period."""

    signals: tuple[int, ...]

    def __getitem__(self, i: int) -> int:
        return self.signals[i]

    def __len__(self) -> int:
        return len(self.signals)


@dataclass(frozen=True)
class StepRng:
    """Position in the deterministic signal-noise stream for one period.

    Draws are counter-based: slot ``a`` (an agent index, or ``n`` for the
    joint-profile draw) owns a Philox stream keyed by (seed, slot), and
    the draw for period t is the stream's t-th value. Results therefore
    never depend on the order agents are visited.
    """

    seed: int
    t: int

    def uniform(self, slot: int) -> float:
        gen = _slot_generator(self.seed, slot)
        return float(gen.random(self.t + 1)[-1])


def _slot_generator(seed: int, slot: int) -> np.random.Generator:
    key = np.array([(seed ^ _KEY_SALT) & _MASK64, slot & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _slot_uniforms(seed: int, slot: int, count: int) -> np.ndarray:
    """Stream values for periods 1..count of one slot, vectorized."""
    return _slot_generator(seed, slot).random(count + 1)[1:]


# ---------------------------------------------------------------------------
# Forecasts
# ---------------------------------------------------------------------------

def one_step_forecast(belief_row: np.ndarray, likelihood: MarginalLikelihood) -> np.ndarray:
    """Predictive distribution of the agent's next signal.

    m(s) = sum_theta l(s | theta) * mu(theta).
    """
    return likelihood.table.T @ np.asarray(belief_row, dtype=float)


def sequence_forecast(
    belief_row: np.ndarray,
    likelihood: MarginalLikelihood,
    sequence: Sequence[int],
) -> float:
    """Predictive probability of observing a whole signal sequence next.

    Per state the sequence likelihood is the product of one-period
    likelihoods, so only the multiset of signals matters. The product is
    evaluated in canonical signal order, making the result bit-identical
    under permutations of ``sequence``.
    """
    seq = np.asarray(sequence, dtype=int)
    if seq.size < 1:
        raise ValueError("sequence must have length >= 1")
    counts = np.bincount(seq, minlength=likelihood.n_signals)
    per_state = sequence_likelihoods(likelihood, counts)
    return float(per_state @ np.asarray(belief_row, dtype=float))


def sequence_likelihoods(likelihood: MarginalLikelihood, counts: np.ndarray) -> np.ndarray:
    """Per-state probability of a sequence given by signal counts."""
    per_state = np.ones(likelihood.n_states)
    for s, c in enumerate(counts):
        if c:
            per_state *= likelihood.table[:, s] ** int(c)
    return per_state


# ---------------------------------------------------------------------------
# Belief update
# ---------------------------------------------------------------------------

def update_beliefs(
    beliefs: BeliefProfile,
    network: Network,
    signals: SignalProfile,
    signal_model: SignalModel,
    renormalize: bool = True,
) -> BeliefProfile:
    """One synchronous step of the belief dynamic.

    All right-hand terms are read from the time-t snapshot. Raises
    ZeroForecastMass if any agent's observed signal has zero forecast
    probability (the dynamic is undefined there).
    """
    mu = beliefs.beliefs
    n, k = mu.shape
    w = network.weights
    if len(signals) != n:
        raise DimensionMismatch(f"{len(signals)} signals for {n} agents", field="signals")

    obs_lik = np.empty((n, k))
    for i in range(n):
        obs_lik[i] = signal_model.marginals[i].table[:, signals[i]]

    forecast_mass = np.einsum("ik,ik->i", obs_lik, mu)
    for i in range(n):
        if forecast_mass[i] <= 0:
            raise ZeroForecastMass(i, signals[i])

    off_diag = w.copy()
    np.fill_diagonal(off_diag, 0.0)
    bayes = mu * obs_lik / forecast_mass[:, None]
    new = w.diagonal()[:, None] * bayes + off_diag @ mu

    if renormalize:
        new = _renormalize_rows(new)
    return BeliefProfile(new)


def _renormalize_rows(rows: np.ndarray) -> np.ndarray:
    totals = rows.sum(axis=1)
    drift = np.abs(totals - 1.0)
    if np.any(drift > DRIFT_HARD_LIMIT):
        i = int(np.argmax(drift))
        raise BeliefDriftError(i, float(totals[i]))
    return rows / totals[:, None]


# ---------------------------------------------------------------------------
# Signal sampling
# ---------------------------------------------------------------------------

def sample_signals(
    signal_model: SignalModel,
    states: StateSpace,
    rng: StepRng,
) -> SignalProfile:
    """Draw one observation profile from the true state's signal law.

    Independent mode inverts each agent's marginal CDF at its own stream
    value; joint mode inverts the joint-row CDF at the profile slot
    (slot index n) and unflattens the profile in C order.
    """
    star = states.true_state
    if signal_model.mode == "independent":
        out = []
        for i, m in enumerate(signal_model.marginals):
            cdf = np.cumsum(m.table[star])
            out.append(int(np.searchsorted(cdf, rng.uniform(i), side="right")))
        return SignalProfile(tuple(out))
    cdf = np.cumsum(signal_model.joint[star])
    profile = int(np.searchsorted(cdf, rng.uniform(signal_model.n_agents), side="right"))
    coords = np.unravel_index(profile, signal_model.profile_dims)
    return SignalProfile(tuple(int(c) for c in coords))


def _sample_signal_block(
    signal_model: SignalModel, states: StateSpace, seed: int, horizon: int
) -> np.ndarray:
    """Signals for periods 1..horizon, shape (horizon, n).

    Vectorized over time; bit-identical to per-period sample_signals
    because each slot's stream value at position t is batching-invariant.
    """
    star = states.true_state
    n = signal_model.n_agents
    out = np.empty((horizon, n), dtype=np.int64)
    if signal_model.mode == "independent":
        for i, m in enumerate(signal_model.marginals):
            cdf = np.cumsum(m.table[star])
            u = _slot_uniforms(seed, i, horizon)
            out[:, i] = np.searchsorted(cdf, u, side="right")
        return out
    cdf = np.cumsum(signal_model.joint[star])
    u = _slot_uniforms(seed, n, horizon)
    profiles = np.searchsorted(cdf, u, side="right")
    coords = np.unravel_index(profiles, signal_model.profile_dims)
    for i in range(n):
        out[:, i] = coords[i]
    return out


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RecordOptions:
    """What simulate keeps in memory; persistence thinning lives in the harness."""

    forecasts: bool = True


@dataclass
class Trajectory:
    """Recorded sample path of one simulation run.

    ``beliefs`` has shape (T+1, n, |states|); ``signals`` has shape
    (T, n) (signal indices for periods 1..T). ``forecasts`` is one
    (T+1, M_i) array per agent, or None when not recorded.
    """

    horizon: int
    rng_seed: int
    beliefs: np.ndarray
    signals: np.ndarray
    forecasts: list[np.ndarray] | None

    @property
    def n(self) -> int:
        return self.beliefs.shape[1]

    def belief_profile(self, t: int) -> BeliefProfile:
        return BeliefProfile(self.beliefs[t])

    def signal_profile(self, t: int) -> SignalProfile:
        """Observation profile of period t (1-based, matching the dynamic)."""
        return SignalProfile(tuple(int(s) for s in self.signals[t - 1]))


@dataclass(frozen=True)
class ModelBundle:
    """Everything a run needs besides the horizon and the seed."""

    states: StateSpace
    signal_model: SignalModel
    network: Network
    initial_beliefs: BeliefProfile


def simulate(
    bundle: ModelBundle,
    horizon: int,
    rng_seed: int,
    record: RecordOptions = RecordOptions(),
) -> Trajectory:
    """Run the dynamic for ``horizon`` periods from the initial beliefs.

    Only dimension consistency is required; assumption violations are
    first-class (counterexample runs). Bit-reproducible for a fixed seed.
    Raises ZeroForecastMass (tagged with the failing step) if a signal
    arrives that the observing agent's forecast gave zero mass.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    check_dimensions(bundle.network, bundle.initial_beliefs, bundle.signal_model, bundle.states)

    n = bundle.network.n
    k = bundle.states.size
    marginals = bundle.signal_model.marginals
    w = bundle.network.weights
    diag = w.diagonal()[:, None]
    off_diag = w.copy()
    np.fill_diagonal(off_diag, 0.0)
    tables_by_signal = [m.table.T.copy() for m in marginals]  # (M_i, K) rows per signal

    beliefs = np.empty((horizon + 1, n, k))
    beliefs[0] = bundle.initial_beliefs.beliefs
    signals = _sample_signal_block(bundle.signal_model, bundle.states, rng_seed, horizon)

    forecasts: list[np.ndarray] | None = None
    if record.forecasts:
        forecasts = [np.empty((horizon + 1, m.n_signals)) for m in marginals]
        for i, m in enumerate(marginals):
            forecasts[i][0] = m.table.T @ beliefs[0, i]

    obs_lik = np.empty((n, k))
    for t in range(1, horizon + 1):
        mu = beliefs[t - 1]
        sig = signals[t - 1]
        for i in range(n):
            obs_lik[i] = tables_by_signal[i][sig[i]]
        forecast_mass = np.einsum("ik,ik->i", obs_lik, mu)
        if np.any(forecast_mass <= 0):
            i = int(np.argmax(forecast_mass <= 0))
            raise ZeroForecastMass(i, int(sig[i]), step=t)
        new = diag * (mu * obs_lik / forecast_mass[:, None]) + off_diag @ mu
        beliefs[t] = _renormalize_rows(new)
        if forecasts is not None:
            for i, m in enumerate(marginals):
                forecasts[i][t] = m.table.T @ beliefs[t, i]

    return Trajectory(
        horizon=horizon,
        rng_seed=rng_seed,
        beliefs=beliefs,
        signals=signals,
        forecasts=forecasts,
    )
