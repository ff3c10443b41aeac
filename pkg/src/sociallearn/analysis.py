"""Revealing-signal machinery and empirical convergence metrics.

A signal sequence is *revealing* for an agent when it is strictly more
likely under the true state than under any state outside the agent's
observational-equivalence set. The frequency-matched construction picks
the sequence whose signal frequencies equal their true-state
probabilities, with length equal to the least common denominator of
those probabilities; the brute-force search enumerates frequency
vectors by total length.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from .errors import EmptyComparisonSet, NotRevealing, ValidationError
from .model import MarginalLikelihood
from .dynamics import Trajectory, sequence_likelihoods

#: Float margin below 1 for revealing verdicts when exact rationals are absent.
FLOAT_MARGIN = 1e-12

DEFAULT_MAX_DENOMINATOR = 10**6
DEFAULT_K_MAX = 64


@dataclass(frozen=True)
class RevealingSequence:
    """A finite signal sequence revealing the true state for one agent.

    ``delta`` is the worst likelihood ratio of the sequence over states
    outside the equivalence set; exact Fraction in rational mode.
    """

    agent: int
    sequence: tuple[int, ...]
    delta: Fraction | float
    method: str  # "lcd" | "brute_force"

    def __post_init__(self):
        if len(self.sequence) < 1:
            raise ValidationError("sequence", "must have length >= 1")
        if not self.delta < 1:
            raise ValidationError("delta", f"{self.delta!r} is not < 1")

    @property
    def k(self) -> int:
        return len(self.sequence)

    def counts(self, n_signals: int) -> tuple[int, ...]:
        return tuple(np.bincount(np.array(self.sequence), minlength=n_signals))


def _signal_ratios(
    likelihood: MarginalLikelihood, true_state: int, exact: bool
) -> list[list[Fraction | float]]:
    """Per-state, per-signal likelihood ratios against the true state.

    Signals the true state never emits are excluded from all revealing
    constructions, so their ratio slot is None.
    """
    if exact:
        rows = likelihood.rational_table
        star = rows[true_state]
        return [
            [row[s] / star[s] if star[s] > 0 else None for s in range(len(row))]
            for row in rows
        ]
    t = likelihood.table
    star = t[true_state]
    return [
        [float(row[s]) / float(star[s]) if star[s] > 0 else None for s in range(len(row))]
        for row in t
    ]


def _support(likelihood: MarginalLikelihood, true_state: int, exact: bool) -> list[int]:
    if exact:
        row = likelihood.rational_table[true_state]
        return [s for s in range(len(row)) if row[s] > 0]
    row = likelihood.table[true_state]
    return [s for s in range(len(row)) if row[s] > 0]


def _is_revealing(delta, exact: bool) -> bool:
    if exact:
        return delta < 1
    return delta < 1 - FLOAT_MARGIN


def worst_sequence_ratio(
    likelihood: MarginalLikelihood,
    counts: Sequence[int],
    equivalence_set: set[int],
    true_state: int,
) -> Fraction | float:
    """Worst-case sequence likelihood ratio over states outside the set.

    ``counts[s]`` is how many times signal s occurs; only the frequency
    vector matters. Exact when a rational mirror is present.
    """
    exact = likelihood.rational_table is not None
    comparison = [th for th in range(likelihood.n_states) if th not in equivalence_set]
    if not comparison:
        raise EmptyComparisonSet("every state is observationally equivalent")
    ratios = _signal_ratios(likelihood, true_state, exact)
    worst = None
    for th in comparison:
        v = Fraction(1) if exact else 1.0
        for s, c in enumerate(counts):
            if not c:
                continue
            r = ratios[th][s]
            if r is None:
                raise ValidationError(
                    "counts", f"signal {s} has zero true-state probability"
                )
            v *= r ** int(c)
        if worst is None or v > worst:
            worst = v
    return worst


# ---------------------------------------------------------------------------
# Revealing constructions
# ---------------------------------------------------------------------------

def single_revealing_signal(
    likelihood: MarginalLikelihood,
    equivalence_set: set[int],
    true_state: int,
) -> tuple[int, Fraction | float] | None:
    """Best single revealing signal, or None when no signal works.

    Each candidate's score is its worst likelihood ratio over states
    outside the equivalence set; the minimizer wins (smallest signal
    index on ties) provided the score is < 1.
    """
    exact = likelihood.rational_table is not None
    comparison = [th for th in range(likelihood.n_states) if th not in equivalence_set]
    if not comparison:
        warnings.warn(
            "every state is observationally equivalent; no comparison to make",
            stacklevel=2,
        )
        return None
    ratios = _signal_ratios(likelihood, true_state, exact)
    best = None
    for s in _support(likelihood, true_state, exact):
        worst = max(ratios[th][s] for th in comparison)
        if best is None or worst < best[1]:
            best = (s, worst)
    if best is not None and _is_revealing(best[1], exact):
        return best
    return None


def _lcd_counts(row: Sequence[Fraction]) -> list[int]:
    """Occurrence counts of the frequency-matched sequence for one row."""
    denom = math.lcm(*(f.denominator for f in row))
    return [int(f * denom) for f in row]


def _approx_rational_row(row: np.ndarray, max_denominator: int) -> list[Fraction]:
    """Best rational approximation of each entry, renormalized to sum 1."""
    approx = [Fraction(float(x)).limit_denominator(max_denominator) for x in row]
    total = sum(approx)
    if total == 0:
        raise ValidationError("likelihood", "true-state row approximates to all zeros")
    return [f / total for f in approx]


def lcd_revealing_sequence(
    likelihood: MarginalLikelihood,
    equivalence_set: set[int],
    true_state: int,
    max_denominator: int = DEFAULT_MAX_DENOMINATOR,
) -> RevealingSequence:
    """Frequency-matched revealing sequence.

    With an exact rational true-state row the sequence length is the
    least common denominator of the row's entries and each signal occurs
    numerator-many times (ascending signal index). Real-valued rows are
    first approximated by rationals (continued-fraction best
    approximation bounded by ``max_denominator``, then exact
    renormalization); the ratio margin is always evaluated on the
    original table, so a failed margin raises NotRevealing rather than
    silently trusting the approximation.
    """
    if all(th in equivalence_set for th in range(likelihood.n_states)):
        raise EmptyComparisonSet("every state is observationally equivalent")
    exact = likelihood.rational_table is not None
    if exact:
        row = list(likelihood.rational_table[true_state])
    else:
        row = _approx_rational_row(likelihood.table[true_state], max_denominator)
    counts = _lcd_counts(row)
    delta = worst_sequence_ratio(likelihood, counts, equivalence_set, true_state)
    if not _is_revealing(delta, exact):
        raise NotRevealing(delta)
    sequence = tuple(s for s in range(len(counts)) for _ in range(counts[s]))
    return RevealingSequence(
        agent=likelihood.agent, sequence=sequence, delta=delta, method="lcd"
    )


def _compositions(total: int, parts: int) -> Iterator[tuple[int, ...]]:
    """All nonnegative integer vectors of given length summing to total, lex order."""
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def minimal_revealing_sequence(
    likelihood: MarginalLikelihood,
    equivalence_set: set[int],
    true_state: int,
    k_max: int = DEFAULT_K_MAX,
) -> RevealingSequence | None:
    """Shortest revealing sequence by exhaustive frequency-vector search.

    Order within a sequence never matters, so for each length k the
    search enumerates frequency vectors over the true-state support.
    Among admissible vectors of the first workable k, the smallest worst
    ratio wins, then the lexicographically smallest vector. Returns None
    when no length up to ``k_max`` works (including the vacuous case of
    an all-equivalent state space).
    """
    if k_max < 1:
        raise ValidationError("k_max", "must be >= 1")
    exact = likelihood.rational_table is not None
    comparison = [th for th in range(likelihood.n_states) if th not in equivalence_set]
    if not comparison:
        return None
    support = _support(likelihood, true_state, exact)
    m = likelihood.n_signals
    for k in range(1, k_max + 1):
        best = None
        for sparse in _compositions(k, len(support)):
            counts = [0] * m
            for s, c in zip(support, sparse):
                counts[s] = c
            delta = worst_sequence_ratio(likelihood, counts, equivalence_set, true_state)
            if not _is_revealing(delta, exact):
                continue
            key = (delta, tuple(counts))
            if best is None or key < best:
                best = key
        if best is not None:
            delta, counts = best
            sequence = tuple(s for s in range(m) for _ in range(counts[s]))
            return RevealingSequence(
                agent=likelihood.agent,
                sequence=sequence,
                delta=delta,
                method="brute_force",
            )
    return None


def default_k_max(likelihood: MarginalLikelihood, true_state: int) -> int:
    """Search-depth default: 4x the frequency-matched length, capped at 64."""
    if likelihood.rational_table is not None:
        k_hat = sum(_lcd_counts(list(likelihood.rational_table[true_state])))
        return min(4 * k_hat, DEFAULT_K_MAX)
    return DEFAULT_K_MAX


def verify_lcd_optimality(
    likelihood: MarginalLikelihood,
    true_state: int,
    grid_step: float | None = None,
) -> bool:
    """Check that the true-state row maximizes its frequency-matched sequence.

    Exact finite check: every table row that differs from the true
    state's must give the sequence strictly smaller probability. With
    ``grid_step`` set and at most 3 signals, additionally scans the
    probability simplex and requires the grid maximizer to be the grid
    point nearest the true-state row.
    """
    if likelihood.rational_table is None:
        raise ValidationError("likelihood", "rational true-state row required")
    rows = likelihood.rational_table
    star = rows[true_state]
    counts = _lcd_counts(list(star))

    def seq_prob(row):
        p = Fraction(1)
        for s, c in enumerate(counts):
            if c:
                p *= row[s] ** c
        return p

    target = seq_prob(star)
    for th, row in enumerate(rows):
        if row == star:
            continue
        if not seq_prob(row) < target:
            return False

    if grid_step is not None:
        m = likelihood.n_signals
        if m > 3:
            raise ValidationError("grid_step", "grid check supports at most 3 signals")
        pts = _simplex_grid(m, grid_step)
        objective = np.ones(len(pts))
        for s, c in enumerate(counts):
            if c:
                objective *= pts[:, s] ** c
        star_f = np.array([float(x) for x in star])
        nearest = int(np.argmin(np.linalg.norm(pts - star_f, axis=1)))
        if int(np.argmax(objective)) != nearest:
            return False
    return True


def _simplex_grid(m: int, step: float) -> np.ndarray:
    """Grid over the probability simplex with the given coordinate step."""
    ticks = int(round(1.0 / step))
    pts = []
    if m == 2:
        for a in range(ticks + 1):
            pts.append((a * step, 1.0 - a * step))
    else:
        for a in range(ticks + 1):
            for b in range(ticks + 1 - a):
                pts.append((a * step, b * step, 1.0 - (a + b) * step))
    return np.array(pts)


# ---------------------------------------------------------------------------
# Convergence metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(1 - belief-in-true) on a trailing window."""

    slope: float
    residual: float  # RMS residual of the linear fit in log space
    start: int
    points: int


@dataclass
class ConvergenceReport:
    """Per-step series derived from one trajectory.

    ``tv_forecast`` and ``belief_true`` have shape (T+1, n);
    ``kstep_error`` maps (agent, sequence) to a (T+1,) series;
    ``consensus`` is the max over agent pairs of the sup-norm belief
    distance. ``rate_fits`` has one entry per agent (None = no fit).
    """

    tv_forecast: np.ndarray
    belief_true: np.ndarray
    kstep_error: dict[tuple[int, tuple[int, ...]], np.ndarray]
    consensus: np.ndarray
    rate_fits: list[RateFit | None]


def compute_metrics(
    trajectory: Trajectory,
    signal_model,
    states,
    watch_sequences: Sequence[Sequence[Sequence[int]]] | None = None,
) -> ConvergenceReport:
    """Compute all convergence series for one recorded trajectory.

    ``watch_sequences[i]`` lists the signal-index sequences whose
    forecast error agent i should track. Forecasts recorded on the
    trajectory are reused; otherwise they are recomputed from beliefs.
    """
    beliefs = trajectory.beliefs
    steps, n, _ = beliefs.shape
    star = states.true_state

    tv = np.empty((steps, n))
    for i, m in enumerate(signal_model.marginals):
        if trajectory.forecasts is not None:
            fc = trajectory.forecasts[i]
        else:
            fc = beliefs[:, i, :] @ m.table
        tv[:, i] = 0.5 * np.abs(fc - m.table[star]).sum(axis=1)

    belief_true = beliefs[:, :, star].copy()
    consensus = (beliefs.max(axis=1) - beliefs.min(axis=1)).max(axis=1)

    kstep: dict[tuple[int, tuple[int, ...]], np.ndarray] = {}
    if watch_sequences is not None:
        for i, seqs in enumerate(watch_sequences):
            m = signal_model.marginals[i]
            for seq in seqs:
                counts = np.bincount(np.asarray(seq, dtype=int), minlength=m.n_signals)
                per_state = sequence_likelihoods(m, counts)
                series = np.abs(beliefs[:, i, :] @ per_state - per_state[star])
                kstep[(i, tuple(int(s) for s in seq))] = series

    fits = [fit_exponential_rate(1.0 - belief_true[:, i]) for i in range(n)]
    return ConvergenceReport(
        tv_forecast=tv,
        belief_true=belief_true,
        kstep_error=kstep,
        consensus=consensus,
        rate_fits=fits,
    )


def fit_exponential_rate(
    gaps: np.ndarray,
    lower: float = 1e-12,
    upper: float = 1e-1,
    min_points: int = 10,
) -> RateFit | None:
    """Fit log(gap) ~ a + slope * t on the trailing qualifying window.

    The window is the last contiguous run of steps whose gap lies in
    (lower, upper); fewer than ``min_points`` qualifying steps means no
    fit. A clean geometric decay C * r^t recovers slope = log(r).
    """
    g = np.asarray(gaps, dtype=float)
    mask = (g > lower) & (g < upper)
    if not mask.any():
        return None
    end = int(len(g) - np.argmax(mask[::-1]))  # one past the last True
    start = end
    while start > 0 and mask[start - 1]:
        start -= 1
    if end - start < min_points:
        return None
    t = np.arange(start, end)
    y = np.log(g[start:end])
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    return RateFit(
        slope=float(slope),
        residual=float(np.sqrt(np.mean(resid**2))),
        start=start,
        points=end - start,
    )


def detect_convergence(
    series: Sequence[float], epsilon: float, window: int
) -> int | None:
    """Smallest t with the whole window [t, t+window) below epsilon.

    Only fully observed windows count; returns None when no such t
    exists within the series.
    """
    if epsilon <= 0:
        raise ValidationError("epsilon", "must be > 0")
    if window < 1:
        raise ValidationError("window", "must be >= 1")
    s = np.asarray(series, dtype=float)
    below = s < epsilon
    run = 0
    for t, ok in enumerate(below):
        run = run + 1 if ok else 0
        if run >= window:
            return t - window + 1
    return None
