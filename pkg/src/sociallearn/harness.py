"""Experiment configuration, seed sweeps, and trajectory persistence.

Configs are YAML documents; likelihood and belief entries may be
decimals or exact-rational strings like ``"2/3"`` (rationals survive a
round trip exactly). Trajectories persist as long-form CSV with header
``t,agent,kind,key,value``; sweep summaries persist as YAML.
"""

from __future__ import annotations

import csv
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .analysis import (
    ConvergenceReport,
    compute_metrics,
    detect_convergence,
)
from .dynamics import ModelBundle, RecordOptions, Trajectory, simulate
from .errors import ParseError, SocialLearnError, ValidationError
from .model import (
    BeliefProfile,
    MarginalLikelihood,
    Network,
    SignalModel,
    StateSpace,
    as_rational_table,
    check_assumptions,
    check_dimensions,
    validate_beliefs,
    validate_network,
    validate_signal_model,
    validate_states,
)

DEFAULT_HORIZON = 2000
DEFAULT_SEED_COUNT = 200

CSV_HEADER = ("t", "agent", "kind", "key", "value")


@dataclass(frozen=True)
class AnalysisOptions:
    """Metric thresholds and search parameters for a sweep.

    ``watch`` is a flat list of (agent, signal-index sequence) pairs
    whose forecast error is tracked.
    """

    watch: tuple[tuple[int, tuple[int, ...]], ...] = ()
    epsilon: float = 1e-3
    window: int = 50
    k_max: int = 64
    max_denominator: int = 10**6
    tv_tol: float = 1e-2
    kstep_tol: float = 1e-2
    learn_threshold: float = 0.99
    consensus_tol: float = 1e-3
    min_pass_fraction: float = 0.95

    def per_agent_watch(self, n: int) -> list[list[tuple[int, ...]]]:
        out: list[list[tuple[int, ...]]] = [[] for _ in range(n)]
        for agent, seq in self.watch:
            out[agent].append(seq)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully validated description of one experiment."""

    name: str
    states: StateSpace
    signal_model: SignalModel
    network: Network
    initial_beliefs: BeliefProfile
    horizon: int
    seeds: tuple[int, ...]
    record_forecasts: bool = True
    stride: int = 1
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)

    @property
    def bundle(self) -> ModelBundle:
        return ModelBundle(
            states=self.states,
            signal_model=self.signal_model,
            network=self.network,
            initial_beliefs=self.initial_beliefs,
        )


@dataclass
class RunSummary:
    """Per-seed outcome of a sweep."""

    seed: int
    error: str | None = None
    passes: dict[str, bool] = field(default_factory=dict)
    terminal_belief_true: list[float] = field(default_factory=list)
    terminal_tv: list[float] = field(default_factory=list)
    terminal_kstep: dict[str, float] = field(default_factory=dict)
    terminal_consensus: float | None = None
    convergence_steps: dict[str, int | None] = field(default_factory=dict)
    rates: list[tuple[float, float] | None] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "error": self.error,
            "passes": dict(self.passes),
            "terminal_belief_true": list(self.terminal_belief_true),
            "terminal_tv": list(self.terminal_tv),
            "terminal_kstep": dict(self.terminal_kstep),
            "terminal_consensus": self.terminal_consensus,
            "convergence_steps": dict(self.convergence_steps),
            "rates": [list(r) if r is not None else None for r in self.rates],
        }


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _parse_prob(value, path: str) -> tuple[float, Fraction | None]:
    """One probability entry: ints and strings parse exactly, floats as-is."""
    if isinstance(value, bool):
        raise ValidationError(path, f"expected a probability, got {value!r}")
    if isinstance(value, int):
        frac = Fraction(value)
        return float(frac), frac
    if isinstance(value, str):
        try:
            frac = Fraction(value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ValidationError(path, f"not a rational number: {value!r} ({exc})")
        return float(frac), frac
    if isinstance(value, float):
        return value, None
    raise ValidationError(path, f"expected a number or 'p/q' string, got {type(value).__name__}")


def _parse_table(rows, path: str) -> tuple[np.ndarray, tuple | None]:
    """Probability table; returns the float table and an exact mirror when possible."""
    if not isinstance(rows, list) or not rows or not all(isinstance(r, list) for r in rows):
        raise ValidationError(path, "expected a list of rows")
    floats, fracs, all_exact = [], [], True
    for r_idx, row in enumerate(rows):
        frow, qrow = [], []
        for c_idx, cell in enumerate(row):
            f, q = _parse_prob(cell, f"{path}[{r_idx}][{c_idx}]")
            frow.append(f)
            qrow.append(q)
            all_exact = all_exact and q is not None
        floats.append(frow)
        fracs.append(qrow)
    if len({len(r) for r in floats}) != 1:
        raise ValidationError(path, "rows have unequal lengths")
    table = np.array(floats, dtype=float)
    return table, (as_rational_table(fracs) if all_exact else None)


def _parse_states(doc: dict) -> StateSpace:
    section = doc.get("states")
    if not isinstance(section, dict):
        raise ValidationError("states", "missing or not a mapping")
    labels = section.get("labels")
    if not isinstance(labels, list) or not labels:
        raise ValidationError("states.labels", "must be a non-empty list")
    labels = [str(x) for x in labels]
    true = section.get("true_state", 0)
    if isinstance(true, str):
        if true not in labels:
            raise ValidationError("states.true_state", f"unknown label {true!r}")
        true = labels.index(true)
    if not isinstance(true, int):
        raise ValidationError("states.true_state", "must be an index or a label")
    states = StateSpace(labels=tuple(labels), true_state=true)
    validate_states(states)
    return states


def _parse_agents(doc: dict, states: StateSpace) -> list[MarginalLikelihood]:
    agents = doc.get("agents")
    if not isinstance(agents, list) or not agents:
        raise ValidationError("agents", "must be a non-empty list")
    out = []
    for i, spec in enumerate(agents):
        path = f"agents[{i}]"
        if not isinstance(spec, dict):
            raise ValidationError(path, "must be a mapping")
        alphabet = spec.get("alphabet")
        if not isinstance(alphabet, list) or not alphabet:
            raise ValidationError(f"{path}.alphabet", "must be a non-empty list")
        table, rational = _parse_table(spec.get("likelihood"), f"{path}.likelihood")
        out.append(
            MarginalLikelihood(
                agent=i,
                table=table,
                alphabet=tuple(str(a) for a in alphabet),
                rational_table=rational,
            )
        )
    return out


def _parse_signal_model(doc: dict, marginals: list[MarginalLikelihood]) -> SignalModel:
    joint_rows = doc.get("joint")
    mode = doc.get("signal_mode", "joint" if joint_rows is not None else "independent")
    if mode == "independent":
        if joint_rows is not None:
            raise ValidationError("signal_mode", "joint table given but mode is independent")
        return SignalModel(mode="independent", marginals=tuple(marginals))
    if mode != "joint":
        raise ValidationError("signal_mode", f"unknown mode {mode!r}")
    if joint_rows is None:
        raise ValidationError("joint", "joint mode requires a joint table")
    table, rational = _parse_table(joint_rows, "joint")
    return SignalModel(
        mode="joint", marginals=tuple(marginals), joint=table, joint_rational=rational
    )


def _parse_beliefs(doc: dict, n: int, states: StateSpace) -> BeliefProfile:
    spec = doc.get("initial_beliefs", "uniform")
    k = states.size
    if spec == "uniform":
        rows = np.full((n, k), 1.0 / k)
    elif spec == "zero_on_true":
        if k < 2:
            raise ValidationError("initial_beliefs", "zero_on_true needs >= 2 states")
        rows = np.full((n, k), 1.0 / (k - 1))
        rows[:, states.true_state] = 0.0
    elif isinstance(spec, dict) and "point_mass" in spec:
        target = spec["point_mass"]
        if isinstance(target, str):
            target = states.index_of(target)
        rows = np.zeros((n, k))
        rows[:, target] = 1.0
    elif isinstance(spec, list):
        table, _ = _parse_table(spec, "initial_beliefs")
        rows = table
    else:
        raise ValidationError("initial_beliefs", f"unrecognized spec {spec!r}")
    return BeliefProfile(rows)


def _parse_seeds(doc: dict) -> tuple[int, ...]:
    spec = doc.get("seeds", {"count": DEFAULT_SEED_COUNT, "base": 0})
    if isinstance(spec, list):
        if not spec:
            raise ValidationError("seeds", "must be non-empty")
        return tuple(int(s) for s in spec)
    if isinstance(spec, dict):
        count = int(spec.get("count", DEFAULT_SEED_COUNT))
        base = int(spec.get("base", 0))
        if count < 1:
            raise ValidationError("seeds.count", "must be >= 1")
        return tuple(range(base, base + count))
    raise ValidationError("seeds", "must be a list or a {count, base} mapping")


def _parse_analysis(doc: dict, marginals: list[MarginalLikelihood]) -> AnalysisOptions:
    section = doc.get("analysis", {}) or {}
    if not isinstance(section, dict):
        raise ValidationError("analysis", "must be a mapping")
    watch = []
    for w_idx, entry in enumerate(section.get("watch_sequences", []) or []):
        path = f"analysis.watch_sequences[{w_idx}]"
        if not isinstance(entry, dict) or "agent" not in entry or "sequence" not in entry:
            raise ValidationError(path, "needs 'agent' and 'sequence'")
        agent = int(entry["agent"])
        if not 0 <= agent < len(marginals):
            raise ValidationError(f"{path}.agent", f"no agent {agent}")
        alphabet = marginals[agent].alphabet
        seq = []
        for item in entry["sequence"]:
            if isinstance(item, str):
                if item not in alphabet:
                    raise ValidationError(f"{path}.sequence", f"unknown signal {item!r}")
                seq.append(alphabet.index(item))
            else:
                s = int(item)
                if not 0 <= s < len(alphabet):
                    raise ValidationError(f"{path}.sequence", f"signal index {s} out of range")
                seq.append(s)
        watch.append((agent, tuple(seq)))
    defaults = AnalysisOptions()
    return AnalysisOptions(
        watch=tuple(watch),
        epsilon=float(section.get("epsilon", defaults.epsilon)),
        window=int(section.get("window", defaults.window)),
        k_max=int(section.get("k_max", defaults.k_max)),
        max_denominator=int(section.get("max_denominator", defaults.max_denominator)),
        tv_tol=float(section.get("tv_tol", defaults.tv_tol)),
        kstep_tol=float(section.get("kstep_tol", defaults.kstep_tol)),
        learn_threshold=float(section.get("learn_threshold", defaults.learn_threshold)),
        consensus_tol=float(section.get("consensus_tol", defaults.consensus_tol)),
        min_pass_fraction=float(section.get("min_pass_fraction", defaults.min_pass_fraction)),
    )


def bundled_fixture_path(name: str) -> Path | None:
    """Path of a config shipped with the package, or None."""
    candidate = resources.files("sociallearn").joinpath(f"fixtures/{name}.yaml")
    if candidate.is_file():
        return Path(str(candidate))
    return None


def load_config(source: str | Path) -> ExperimentConfig:
    """Load and fully validate a config from a path, fixture name, or YAML text."""
    name = "config"
    if isinstance(source, Path):
        text = source.read_text()
        name = source.stem
    else:
        path = Path(source)
        fixture = None if "\n" in source else bundled_fixture_path(source)
        if "\n" not in source and path.is_file():
            text = path.read_text()
            name = path.stem
        elif fixture is not None:
            text = fixture.read_text()
            name = source
        elif ":" in source or "\n" in source:
            text = source
        else:
            raise ParseError(str(source), "no such file or bundled config")

    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        location = f"{name}:{mark.line + 1}" if mark is not None else name
        raise ParseError(location, str(getattr(exc, "problem", exc)))
    if not isinstance(doc, dict):
        raise ParseError(name, "top level must be a mapping")

    states = _parse_states(doc)
    marginals = _parse_agents(doc, states)
    signal_model = _parse_signal_model(doc, marginals)
    network_rows = (doc.get("network") or {}).get("weights") if isinstance(doc.get("network"), dict) else doc.get("network")
    if network_rows is None:
        raise ValidationError("network.weights", "missing")
    weights, _ = _parse_table(network_rows, "network.weights")
    network = Network(weights=weights)
    beliefs = _parse_beliefs(doc, network.n, states)

    horizon = int(doc.get("horizon", DEFAULT_HORIZON))
    if horizon < 0:
        raise ValidationError("horizon", "must be >= 0")
    seeds = _parse_seeds(doc)
    record = doc.get("record", {}) or {}
    stride = int(record.get("stride", 1))
    if stride < 1:
        raise ValidationError("record.stride", "must be >= 1")

    config = ExperimentConfig(
        name=str(doc.get("name", name)),
        states=states,
        signal_model=signal_model,
        network=network,
        initial_beliefs=beliefs,
        horizon=horizon,
        seeds=seeds,
        record_forecasts=bool(record.get("forecasts", True)),
        stride=stride,
        analysis=_parse_analysis(doc, marginals),
    )
    validate_network(config.network)
    validate_signal_model(config.signal_model, config.states)
    validate_beliefs(config.initial_beliefs)
    check_dimensions(config.network, config.initial_beliefs, config.signal_model, config.states)
    return config


def config_assumptions(config: ExperimentConfig):
    return check_assumptions(
        config.network, config.initial_beliefs, config.signal_model, config.states
    )


# ---------------------------------------------------------------------------
# Running experiments
# ---------------------------------------------------------------------------

def _watch_key(config: ExperimentConfig, agent: int, seq: tuple[int, ...]) -> str:
    labels = config.signal_model.marginals[agent].alphabet
    return f"agent{agent}:" + ",".join(labels[s] for s in seq)


def summarize_run(config: ExperimentConfig, seed: int, report: ConvergenceReport) -> RunSummary:
    """Reduce one run's metric series to the sweep-level summary row."""
    opts = config.analysis
    n = config.network.n
    tv_final = [float(report.tv_forecast[-1, i]) for i in range(n)]
    mu_final = [float(report.belief_true[-1, i]) for i in range(n)]
    kstep_final = {
        _watch_key(config, agent, seq): float(series[-1])
        for (agent, seq), series in report.kstep_error.items()
    }
    consensus_final = float(report.consensus[-1])

    steps: dict[str, int | None] = {}
    for i in range(n):
        steps[f"tv[agent{i}]"] = detect_convergence(
            report.tv_forecast[:, i], opts.epsilon, opts.window
        )
        steps[f"belief[agent{i}]"] = detect_convergence(
            1.0 - report.belief_true[:, i], opts.epsilon, opts.window
        )
    for (agent, seq), series in report.kstep_error.items():
        steps[f"kstep[{_watch_key(config, agent, seq)}]"] = detect_convergence(
            series, opts.epsilon, opts.window
        )
    steps["consensus"] = detect_convergence(report.consensus, opts.epsilon, opts.window)

    passes = {
        "weak_merging": all(v < opts.tv_tol for v in tv_final),
        "asymptotic_learning": all(v > opts.learn_threshold for v in mu_final),
        "consensus": consensus_final < opts.consensus_tol,
    }
    if kstep_final:
        passes["kstep_forecast"] = all(v < opts.kstep_tol for v in kstep_final.values())

    rates = [
        (fit.slope, fit.residual) if fit is not None else None for fit in report.rate_fits
    ]
    return RunSummary(
        seed=seed,
        passes=passes,
        terminal_belief_true=mu_final,
        terminal_tv=tv_final,
        terminal_kstep=kstep_final,
        terminal_consensus=consensus_final,
        convergence_steps=steps,
        rates=rates,
    )


def run_single(config: ExperimentConfig, seed: int) -> tuple[RunSummary, Trajectory | None]:
    """One seed: simulate, compute metrics, summarize; errors are captured."""
    try:
        trajectory = simulate(
            config.bundle,
            config.horizon,
            seed,
            RecordOptions(forecasts=config.record_forecasts),
        )
        report = compute_metrics(
            trajectory,
            config.signal_model,
            config.states,
            config.analysis.per_agent_watch(config.network.n),
        )
        return summarize_run(config, seed, report), trajectory
    except SocialLearnError as exc:
        return RunSummary(seed=seed, error=f"{type(exc).__name__}: {exc}"), None


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    workers: int = 1,
) -> list[RunSummary]:
    """Run every configured seed; optionally persist trajectories and a summary.

    Per-run errors are captured in their RunSummary and never abort the
    sweep. Results are deterministic and invariant to ``workers``: each
    run depends only on (config, seed) and the reduction is ordered by
    the configured seed list.
    """
    seeds = config.seeds

    def job(seed: int) -> tuple[int, RunSummary, Trajectory | None]:
        summary, trajectory = run_single(config, seed)
        if out_dir is not None and trajectory is not None:
            report = compute_metrics(
                trajectory,
                config.signal_model,
                config.states,
                config.analysis.per_agent_watch(config.network.n),
            )
            write_trajectory_csv(
                Path(out_dir) / f"run_{seed}.csv", config, trajectory, report
            )
        return seed, summary, trajectory

    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)

    results: dict[int, RunSummary] = {}
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for seed, summary, _ in pool.map(job, seeds):
                results[seed] = summary
    else:
        for seed in seeds:
            seed, summary, _ = job(seed)
            results[seed] = summary

    summaries = [results[s] for s in seeds]
    if out_dir is not None:
        write_summary(Path(out_dir) / "summary.yaml", config, summaries)
    return summaries


def aggregate_summaries(summaries: list[RunSummary]) -> dict:
    """Cross-seed aggregates: pass fractions and median convergence steps."""
    total = len(summaries)
    predicates: dict[str, int] = {}
    for s in summaries:
        for name in s.passes:
            predicates.setdefault(name, 0)
    for s in summaries:
        for name in predicates:
            if s.passes.get(name, False):
                predicates[name] += 1
    medians: dict[str, float | None] = {}
    keys = {k for s in summaries for k in s.convergence_steps}
    for key in sorted(keys):
        vals = [
            s.convergence_steps[key]
            for s in summaries
            if s.convergence_steps.get(key) is not None
        ]
        medians[key] = float(statistics.median(vals)) if vals else None
    return {
        "runs": total,
        "errors": sum(1 for s in summaries if s.error is not None),
        "pass_fraction": {k: v / total for k, v in sorted(predicates.items())},
        "median_convergence_step": medians,
    }


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _recorded_steps(horizon: int, stride: int) -> list[int]:
    ts = list(range(0, horizon + 1, stride))
    if ts[-1] != horizon:
        ts.append(horizon)
    return ts


def write_trajectory_csv(
    path: str | Path,
    config: ExperimentConfig,
    trajectory: Trajectory,
    report: ConvergenceReport | None = None,
) -> Path:
    """Persist one run in long form: ``t,agent,kind,key,value``.

    Floats are written at shortest round-trip precision, so identical
    runs produce byte-identical files. The thinning stride applies to
    all series; the terminal step is always included.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    states = config.states
    marginals = config.signal_model.marginals
    ts = _recorded_steps(trajectory.horizon, config.stride)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for t in ts:
            for i in range(trajectory.n):
                for th, label in enumerate(states.labels):
                    writer.writerow((t, i, "belief", label, repr(float(trajectory.beliefs[t, i, th]))))
        if trajectory.forecasts is not None:
            for t in ts:
                for i, m in enumerate(marginals):
                    for s, label in enumerate(m.alphabet):
                        writer.writerow((t, i, "forecast", label, repr(float(trajectory.forecasts[i][t, s]))))
        for t in ts:
            if t == 0:
                continue
            for i in range(trajectory.n):
                s = int(trajectory.signals[t - 1, i])
                writer.writerow((t, i, "signal", marginals[i].alphabet[s], s))
        if report is not None:
            for t in ts:
                for i in range(trajectory.n):
                    writer.writerow((t, i, "metric", "tv", repr(float(report.tv_forecast[t, i]))))
                for (agent, seq), series in report.kstep_error.items():
                    key = "kstep:" + ",".join(marginals[agent].alphabet[s] for s in seq)
                    writer.writerow((t, agent, "metric", key, repr(float(series[t]))))
                writer.writerow((t, -1, "metric", "consensus", repr(float(report.consensus[t]))))
    return path


def read_trajectory_csv(path: str | Path, config: ExperimentConfig) -> Trajectory:
    """Rebuild a Trajectory from a persisted CSV.

    Assumes stride-1 persistence for a faithful reconstruction; with
    thinning, recorded steps are reindexed consecutively. Missing signal
    rows become -1 placeholders.
    """
    states = config.states
    marginals = config.signal_model.marginals
    beliefs: dict[tuple[int, int, int], float] = {}
    forecasts: dict[tuple[int, int, int], float] = {}
    signals: dict[tuple[int, int], int] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ParseError(str(path), f"unexpected header {header!r}")
        for row in reader:
            t, agent, kind, key, value = int(row[0]), int(row[1]), row[2], row[3], row[4]
            if kind == "belief":
                beliefs[(t, agent, states.index_of(key))] = float(value)
            elif kind == "forecast":
                forecasts[(t, agent, marginals[agent].signal_index(key))] = float(value)
            elif kind == "signal":
                signals[(t, agent)] = int(value)

    ts = sorted({t for t, _, _ in beliefs})
    if not ts:
        raise ParseError(str(path), "no belief rows")
    n = config.network.n
    k = states.size
    belief_arr = np.empty((len(ts), n, k))
    for idx, t in enumerate(ts):
        for i in range(n):
            for th in range(k):
                belief_arr[idx, i, th] = beliefs[(t, i, th)]
    fc = None
    if forecasts:
        fc = [np.empty((len(ts), m.n_signals)) for m in marginals]
        for idx, t in enumerate(ts):
            for i, m in enumerate(marginals):
                for s in range(m.n_signals):
                    fc[i][idx, s] = forecasts[(t, i, s)]
    sig_arr = np.full((len(ts) - 1, n), -1, dtype=np.int64)
    for idx, t in enumerate(ts[1:]):
        for i in range(n):
            if (t, i) in signals:
                sig_arr[idx, i] = signals[(t, i)]
    return Trajectory(
        horizon=len(ts) - 1,
        rng_seed=-1,
        beliefs=belief_arr,
        signals=sig_arr,
        forecasts=fc,
    )


def analyze_trajectory(path: str | Path, config: ExperimentConfig) -> ConvergenceReport:
    """Recompute metrics offline from a persisted trajectory CSV."""
    trajectory = read_trajectory_csv(path, config)
    return compute_metrics(
        trajectory,
        config.signal_model,
        config.states,
        config.analysis.per_agent_watch(config.network.n),
    )


def write_summary(path: str | Path, config: ExperimentConfig, summaries: list[RunSummary]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "name": config.name,
        "horizon": config.horizon,
        "seeds": list(config.seeds),
        "aggregates": aggregate_summaries(summaries),
        "runs": [s.to_dict() for s in summaries],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return path
