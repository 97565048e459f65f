"""Experiment configuration, sweeps and result files.

Config files are plain ``key=value`` lines; ``#`` starts a comment.  Every
key is a field of `ExperimentConfig`.  Command-line flags ``--key=value``
override file values.

Sweep points that share the same training-relevant settings reuse one
model, so a sweep over P_max_dbm trains once while a sweep over N, K,
access or clustering trains per point.  Test scenarios for trial t are
seeded by (seed, trial) only, so every sweep point sees the same drops and
QoS draws (common random numbers).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import TopologyConfig, dbm_to_watt, generate_topology, make_rng, sample_channels
from .errors import InvalidConfig, ParseError, RisNomaError, SingularMatrix, UnknownKey
from .maml import TWO_PI, LearnedStepSize, LossWeights, TrainingConfig, infer, train

RESULT_COLUMNS = ("sweep_var", "value", "mean_rate_mbps", "stderr", "mean_violation_mbps",
                  "trials", "wall_s")
SWEEP_VARS = ("K", "N", "P_max_dbm", "clustering", "access")
FAILED = "FAILED"


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "sweep"
    sweep_var: str = "N"
    sweep_values: tuple = ()
    trials: int = 100
    out_dir: str = "results"
    seed: int = 0
    record_wall_time: bool = False
    # topology
    N: int = 16
    M: int = 16
    K: int = 4
    P_max_dbm: float = 20.0
    area_width: float = 10.0
    alpha: float = 3.0
    rician_factor: float = 10.0
    bandwidth: float = 4e6
    noise_psd: float = -169.0
    qos_low_mbps: float = 0.5
    qos_high_mbps: float = 2.5
    # system and training
    clustering: str = "qos"
    access: str = "noma"
    episodes: int = 2000
    batch_size: int = 16
    J: int = 5
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    second_order: bool = True
    phase_mode: str = "wrap"
    optimizer: str = "sgd"
    grad_clip: float = 20.0  # 0 disables
    hidden: tuple = (128, 128)
    w1: float = -1.0
    w2: float = 10.0

    def __post_init__(self):
        if self.mode not in ("train", "eval", "sweep"):
            raise InvalidConfig(f"mode must be train, eval or sweep, got {self.mode!r}")
        if self.sweep_var not in SWEEP_VARS:
            raise InvalidConfig(f"sweep_var must be one of {SWEEP_VARS}, got {self.sweep_var!r}")
        if self.trials < 1:
            raise InvalidConfig("trials must be >= 1")
        if not self.sweep_values:
            # a single point at the configured value
            object.__setattr__(self, "sweep_values", (getattr(self, self.sweep_var),))
        if self.grad_clip < 0:
            raise InvalidConfig("grad_clip must be >= 0")
        object.__setattr__(self, "sweep_values",
                           tuple(_coerce_sweep(self.sweep_var, v) for v in self.sweep_values))
        self.topology().validate(self.access)
        self.training()

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def at(self, value) -> ExperimentConfig:
        """This config with the sweep variable set to `value`."""
        return self.replace(**{self.sweep_var: _coerce_sweep(self.sweep_var, value)})

    def topology(self) -> TopologyConfig:
        return TopologyConfig(
            area_width=self.area_width, num_antennas=self.M, num_elements=self.N,
            num_users=self.K, path_loss_exponent=self.alpha, rician_factor=self.rician_factor,
            bandwidth=self.bandwidth, noise_psd=self.noise_psd,
            p_max=float(dbm_to_watt(self.P_max_dbm)), qos_low=self.qos_low_mbps * 1e6,
            qos_high=self.qos_high_mbps * 1e6)

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            inner_steps=self.J, inner_lr=self.inner_lr, outer_lr=self.outer_lr,
            episodes=self.episodes, batch_size=self.batch_size, second_order=self.second_order,
            seed=self.seed, phase_mode=self.phase_mode, optimizer=self.optimizer,
            hidden=self.hidden, loss_weights=LossWeights(self.w1, self.w2),
            clustering=self.clustering, access=self.access,
            grad_clip=self.grad_clip or None)

    def model_key(self) -> tuple:
        """Settings that change the trained model (P_max is excluded)."""
        neutral = self.replace(P_max_dbm=20.0, sweep_var="N", sweep_values=(self.N,), trials=1,
                               mode="train", out_dir="", record_wall_time=False)
        return dataclasses.astuple(neutral)


def _coerce_sweep(var, value):
    if var in ("K", "N"):
        if isinstance(value, str) and not value.strip().lstrip("-").isdigit():
            raise InvalidConfig(f"{var} values must be integers, got {value!r}")
        return int(value)
    if var == "P_max_dbm":
        return float(value)
    return str(value).strip()


# ---------------------------------------------------------------------------
# parsing

_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_bool(raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_value(key, raw):
    kind = _FIELDS[key].type
    if key == "sweep_values":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if key == "hidden":
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        return _parse_bool(raw)
    return raw


def _parse_lines(lines, where):
    values = {}
    for n, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        loc = where(n)
        if "=" not in text:
            raise ParseError(f"expected key=value, got {text!r}", line=loc)
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in _FIELDS:
            raise UnknownKey(f"unknown key {key!r}", line=loc)
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}", line=loc) from None
    return values


def parse_config(path=None, flags=(), text=None) -> ExperimentConfig:
    """Build a config from a file (or `text`) and ``--key=value`` flags."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ParseError(f"cannot read config: {exc}") from exc
    if text is not None:
        values.update(_parse_lines(text.splitlines(), lambda n: n))
    flag_lines = []
    for flag in flags:
        if not flag.startswith("--"):
            raise ParseError(f"flags look like --key=value, got {flag!r}")
        flag_lines.append(flag[2:])
    values.update(_parse_lines(flag_lines, lambda n: None))
    try:
        return ExperimentConfig(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, RisNomaError):
            raise
        raise InvalidConfig(str(exc)) from exc


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class ResultRow:
    sweep_var: str
    value: object
    mean_rate_mbps: float
    stderr: float
    mean_violation_mbps: float
    trials: int
    wall_s: float = 0.0
    per_trial: list = field(default_factory=list)  # sum rate (Mbit/s) per good trial
    failed: bool = False


def trial_scenario(topology: TopologyConfig, seed: int, trial: int):
    """Scenario, channels and starting phases for one trial."""
    scenario = generate_topology(topology, (seed, 7, trial, 1))
    channels = sample_channels(scenario, (seed, 7, trial, 2))
    theta0 = make_rng(seed, 7, trial, 3).uniform(0.0, TWO_PI, topology.num_elements)
    return scenario, channels, theta0


def evaluate_model(weights, step: LearnedStepSize, config: ExperimentConfig):
    """Per-trial (sum rate Mbit/s, QoS shortfall Mbit/s), None for failures."""
    topo = config.topology()
    out = []
    for t in range(config.trials):
        scenario, channels, theta0 = trial_scenario(topo, config.seed, t)
        try:
            _, _, report = infer(weights, step, scenario, channels, J=config.J, theta0=theta0,
                                 clustering=config.clustering, access=config.access,
                                 config=config.training())
        except SingularMatrix:
            out.append(None)
            continue
        out.append((report.sum_rate / 1e6, float(report.qos_violation.sum()) / 1e6))
    return out


def summarize(var, value, trials, wall_s=0.0) -> ResultRow:
    good = [t for t in trials if t is not None]
    if not good:
        return ResultRow(var, value, math.nan, math.nan, math.nan, 0, wall_s, [], failed=True)
    rates = np.array([r for r, _ in good])
    stderr = float(rates.std(ddof=1) / np.sqrt(len(rates))) if len(rates) > 1 else 0.0
    return ResultRow(var, value, float(rates.mean()), stderr,
                     float(np.mean([v for _, v in good])), len(good), wall_s, rates.tolist())


def train_model(config: ExperimentConfig):
    weights, step, log_rows = train(config.training(), config.topology())
    return weights, step, log_rows


def _run_point(config: ExperimentConfig, model=None):
    start = time.perf_counter()
    if model is None:
        weights, step, _ = train_model(config)
    else:
        weights, step = model
    trials = evaluate_model(weights, step, config)
    return (weights, step), trials, time.perf_counter() - start


def worker_count() -> int:
    raw = os.environ.get("RNM_THREADS")
    n = os.cpu_count() or 1
    if raw:
        try:
            n = min(n, int(raw))
        except ValueError:
            raise InvalidConfig(f"RNM_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def run_sweep(config: ExperimentConfig, models=None, progress=None) -> list[ResultRow]:
    """Train (or reuse) a model per point and evaluate `trials` scenarios.

    `models` optionally maps a model key (see `ExperimentConfig.model_key`)
    to (weights, step); trained models are added to it.
    """
    models = {} if models is None else models
    points = [config.at(v) for v in config.sweep_values]
    keys = [p.model_key() for p in points]
    first_of = {}
    for i, k in enumerate(keys):
        first_of.setdefault(k, i)
    results = [None] * len(points)

    def finish(i, model, trials, wall):
        models.setdefault(keys[i], model)
        wall = wall if config.record_wall_time else 0.0
        results[i] = summarize(config.sweep_var, config.sweep_values[i], trials, wall)
        if progress is not None:
            progress(results[i])

    # points owning a new model first (possibly in parallel), then the reusers
    owners = [i for i in range(len(points)) if first_of[keys[i]] == i and keys[i] not in models]
    workers = min(worker_count(), len(owners))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = {i: pool.submit(_run_point, points[i]) for i in owners}
            for i in sorted(futures):
                finish(i, *futures[i].result())
    else:
        for i in owners:
            finish(i, *_run_point(points[i]))
    for i in range(len(points)):
        if results[i] is None:
            finish(i, *_run_point(points[i], models[keys[i]]))
    return results


# ---------------------------------------------------------------------------
# result files

def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def results_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        if r.failed:
            stats = [FAILED, FAILED, FAILED]
        else:
            stats = [_fmt(r.mean_rate_mbps), _fmt(r.stderr), _fmt(r.mean_violation_mbps)]
        writer.writerow([r.sweep_var, _fmt(r.value), *stats, str(r.trials), _fmt(r.wall_s)])
    return buf.getvalue()


def plot_data(rows) -> str:
    """Whitespace columns for gnuplot: one block per series, x then y.

    Non-numeric sweep values are replaced by their position and named in
    a comment line.
    """
    lines = []
    for series in ("mean_rate_mbps", "stderr", "mean_violation_mbps"):
        var = rows[0].sweep_var if rows else ""
        lines.append(f"# {var} {series}")
        for i, r in enumerate(rows):
            x = r.value if isinstance(r.value, (int, float)) else i
            if not isinstance(r.value, (int, float)):
                lines.append(f"# {i} = {r.value}")
            y = "nan" if r.failed else _fmt(getattr(r, series))
            lines.append(f"{_fmt(x)} {y}")
        lines += ["", ""]
    return "\n".join(lines[:-1]) + ("\n" if lines else "")


def write_results(rows, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path, plot_path = out / "results.csv", out / "plot_data.txt"
        for path, body in ((csv_path, results_csv(rows)), (plot_path, plot_data(rows))):
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(body)
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    return csv_path, plot_path


def read_results(path) -> list[ResultRow]:
    """Parse a results.csv back into rows (per-trial values are not stored)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != RESULT_COLUMNS:
            raise ParseError(f"unexpected header {header}", line=1)
        rows = []
        for var, value, mean, se, viol, trials, wall in reader:
            value = _coerce_sweep(var, value)
            failed = mean == FAILED
            nums = [math.nan] * 3 if failed else [float(mean), float(se), float(viol)]
            rows.append(ResultRow(var, value, *nums, int(trials), float(wall), failed=failed))
    return rows


__all__ = [
    "ExperimentConfig", "ResultRow", "parse_config", "run_sweep", "write_results",
    "read_results", "results_csv", "plot_data", "evaluate_model", "summarize", "trial_scenario",
    "train_model", "worker_count", "RESULT_COLUMNS",
]
