"""Multi-seed experiments: regret series, quantiles, CSV output and a plot script."""

from __future__ import annotations

import csv
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import AgentConfig, make_schedule, run_agent
from .core import FactoredMdp, ValidationError, flatten, load, require_valid
from .envs import JaoSpec, SysadminSpec, build_jao_product, build_product_circle, build_sysadmin
from .planners import PlannerChoice
from .solve import solve_average_reward

DEFAULT_LOG_STRIDE = 100
DEFAULT_SEEDS = 20
RUN_COLUMNS = ["agent", "param", "seed", "t", "episode", "cum_reward", "cum_regret"]
AGGREGATE_COLUMNS = ["agent", "param", "t", "q25", "q50", "q75"]


def _fmt(value) -> str:
    return f"{value:.12g}"


# --- regret and quantiles ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RegretSeries:
    t: np.ndarray  # steps completed, 1..T
    cum_reward: np.ndarray
    cum_regret: np.ndarray
    gain: float

    def at(self, steps) -> np.ndarray:
        return self.cum_regret[np.asarray(steps, dtype=np.int64) - 1]


def compute_regret(rewards, gain: float) -> RegretSeries:
    """``R_t = t * gain - sum_{tau <= t} r_tau`` for every prefix."""
    rewards = np.asarray(rewards, dtype=float)
    t = np.arange(1, rewards.size + 1, dtype=np.int64)
    cum = np.cumsum(rewards)
    return RegretSeries(t, cum, t * gain - cum, float(gain))


@dataclass(frozen=True, eq=False)
class QuantileTable:
    t: np.ndarray
    q25: np.ndarray
    q50: np.ndarray
    q75: np.ndarray


def aggregate_quantiles(series, stride: int | None = None, t=None) -> QuantileTable:
    """Per-step 25/50/75 percent quantiles (linear interpolation) across runs.

    ``series`` is a list of ``RegretSeries`` or of equal-length arrays. With
    ``stride`` only multiples of it (and the last step) are kept.
    """
    rows = [s.cum_regret if isinstance(s, RegretSeries) else np.asarray(s, dtype=float) for s in series]
    if not rows:
        raise ValidationError("no series to aggregate")
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise ValidationError(f"series lengths differ: {sorted(lengths)}")
    data = np.vstack(rows)
    n = data.shape[1]
    steps = np.arange(1, n + 1) if t is None else np.asarray(t, dtype=np.int64)
    if steps.size != n:
        raise ValidationError("t does not match the series length")
    if stride:
        keep = (steps % stride == 0) | (np.arange(n) == n - 1)
        data, steps = data[:, keep], steps[keep]
    q = np.quantile(data, [0.25, 0.5, 0.75], axis=0)
    return QuantileTable(steps, q[0], q[1], q[2])


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class EnvSpec:
    topology: str = "circle"  # circle | three-leg | jao | product-circle | file
    size: int = 4
    seed: int = 0
    path: str | None = None
    delta: float = 0.1
    epsilon: float = 0.05
    actions: int = 2

    def build(self, base_dir: Path | None = None) -> FactoredMdp:
        if self.topology == "file":
            path = Path(self.path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            return require_valid(load(path))
        return build_env(self.topology, self.size, self.seed, self.delta, self.epsilon, self.actions)


def build_env(topology: str, size: int, seed: int = 0, delta: float = 0.1,
              epsilon: float = 0.05, actions: int = 2) -> FactoredMdp:
    if topology in ("circle", "three-leg"):
        return build_sysadmin(SysadminSpec(topology, size, noise_seed=seed))
    if topology == "jao":
        return build_jao_product(JaoSpec(size, delta, epsilon, actions))
    if topology == "product-circle":
        return build_product_circle(2, size)
    raise ValidationError(f"unknown topology {topology!r}")


@dataclass(frozen=True)
class AgentSweep:
    base: AgentConfig
    values: tuple  # swept c (dorl, psrl, fsrl widths) or m_known (frmax); (None,) = defaults

    def configs(self) -> list:
        out = []
        for v in self.values:
            if v is None:
                out.append(self.base)
            elif self.base.kind == "frmax":
                out.append(_replace(self.base, m_known=int(v)))
            else:
                out.append(_replace(self.base, c=float(v)))
        return out


def _replace(cfg, **changes):
    from dataclasses import replace

    return replace(cfg, **changes)


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvSpec
    agents: tuple
    T: int
    L: int | None = None
    num_seeds: int = DEFAULT_SEEDS
    master_seed: int = 0
    out: str = "results"
    log_stride: int = DEFAULT_LOG_STRIDE
    workers: int = 1
    base_dir: str | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ValidationError("T must be at least 1")
        if self.num_seeds < 1:
            raise ValidationError("num_seeds must be at least 1")
        if not self.agents:
            raise ValidationError("agents must be a nonempty list")
        if self.log_stride < 1:
            raise ValidationError("log_stride must be at least 1")


def _line_of(text: str, key: str) -> int | None:
    match = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, match.start()) + 1 if match else None


def _config_error(text: str, key: str, message: str, source: str):
    line = _line_of(text, key)
    where = f"{source}:{line}" if line else source
    return ValidationError(f"{where}: {message}")


_AGENT_FIELDS = {"kind", "c", "m_known", "rho", "budget", "candidates", "planner", "track_confidence"}
_TOP_FIELDS = {"env", "agents", "T", "L", "num_seeds", "master_seed", "out", "log_stride", "workers"}


def parse_config(text: str, source: str = "<config>", base_dir=None) -> ExperimentConfig:
    """Parse a JSON experiment configuration with line-numbered errors."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{source}:{exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ValidationError(f"{source}:1: the configuration must be a JSON object")
    for key in data:
        if key not in _TOP_FIELDS:
            raise _config_error(text, key, f"unknown field {key!r}", source)
    for key in ("env", "agents", "T"):
        if key not in data:
            raise ValidationError(f"{source}: missing required field {key!r}")
    env_data = data["env"]
    if not isinstance(env_data, dict):
        raise _config_error(text, "env", "env must be an object", source)
    try:
        if "file" in env_data:
            env = EnvSpec(topology="file", path=str(env_data["file"]))
        else:
            env = EnvSpec(
                topology=str(env_data.get("topology", "circle")),
                size=int(env_data.get("size", 4)),
                seed=int(env_data.get("seed", 0)),
                delta=float(env_data.get("delta", 0.1)),
                epsilon=float(env_data.get("epsilon", 0.05)),
                actions=int(env_data.get("actions", 2)),
            )
            if env.topology not in ("circle", "three-leg", "jao", "product-circle"):
                raise ValidationError(f"unknown topology {env.topology!r}")
    except (TypeError, ValueError) as exc:
        raise _config_error(text, "env", str(exc), source) from None
    if not isinstance(data["agents"], list) or not data["agents"]:
        raise _config_error(text, "agents", "agents must be a nonempty list", source)
    sweeps = []
    for item in data["agents"]:
        if not isinstance(item, dict):
            raise _config_error(text, "agents", "each agent must be an object", source)
        for key in item:
            if key not in _AGENT_FIELDS:
                raise _config_error(text, key, f"unknown agent field {key!r}", source)
        try:
            kind = item.get("kind")
            sweep_key = "m_known" if kind == "frmax" else "c"
            raw = item.get(sweep_key)
            values = tuple(raw) if isinstance(raw, list) else (raw,)
            if not values:
                raise ValidationError(f"{sweep_key} sweep list is empty")
            planner = PlannerChoice(**item.get("planner", {}))
            base = AgentConfig(
                kind=kind,
                rho=float(item.get("rho", 0.05)),
                m_known=int(values[0]) if kind == "frmax" and values[0] is not None else 300,
                budget=float(item.get("budget", math.inf)),
                candidates=int(item.get("candidates", 512)),
                planner=planner,
                track_confidence=bool(item.get("track_confidence", False)),
            )
            sweeps.append(AgentSweep(base, values))
        except (TypeError, ValueError) as exc:
            raise _config_error(text, "agents", str(exc), source) from None
    try:
        return ExperimentConfig(
            env=env,
            agents=tuple(sweeps),
            T=int(data["T"]),
            L=None if data.get("L") is None else int(data["L"]),
            num_seeds=int(data.get("num_seeds", DEFAULT_SEEDS)),
            master_seed=int(data.get("master_seed", 0)),
            out=str(data.get("out", "results")),
            log_stride=int(data.get("log_stride", DEFAULT_LOG_STRIDE)),
            workers=int(data.get("workers", 1)),
            base_dir=None if base_dir is None else str(base_dir),
        )
    except (TypeError, ValueError) as exc:
        key = next((k for k in ("T", "L", "num_seeds", "master_seed", "log_stride", "workers") if k in str(exc)), "T")
        raise _config_error(text, key, str(exc), source) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path), path.parent)


# --- execution -------------------------------------------------------------------


def run_seed(master_seed: int, agent_index: int, sweep_index: int, seed_index: int) -> int:
    """64-bit run seed: the first two 32-bit words of a SeedSequence over the four indices."""
    words = np.random.SeedSequence([master_seed, agent_index, sweep_index, seed_index]).generate_state(2)
    return int(words[0]) | (int(words[1]) << 32)


def logged_steps(T: int, L: int, stride: int) -> np.ndarray:
    """Multiples of ``stride``, every episode end, the decile marks and ``T``."""
    schedule = make_schedule(L, T)
    marks = {T}
    marks.update(range(stride, T + 1, stride))
    marks.update(int(v) for v in np.cumsum(schedule.lengths))
    marks.update(T * k // 10 for k in range(1, 10) if T * k // 10 >= 1)
    return np.array(sorted(marks), dtype=np.int64)


@dataclass(frozen=True, eq=False)
class RunSummary:
    agent: str
    param: float
    seed_index: int
    seed: int
    steps: np.ndarray
    episode: np.ndarray
    cum_reward: np.ndarray
    cum_regret: np.ndarray
    planner_failures: int
    membership: float | None


def _execute(args) -> RunSummary:
    env, cfg, T, L, seed, seed_index, gain, steps = args
    record = run_agent(env, cfg, T, L, seed)
    series = compute_regret(record.rewards, gain)
    episode = np.searchsorted(np.cumsum(record.schedule.lengths), steps, side="left") + 1
    membership = None if record.in_confidence is None else float(record.in_confidence.mean())
    return RunSummary(
        cfg.kind, cfg.param, seed_index, seed, steps, episode,
        series.cum_reward[steps - 1], series.cum_regret[steps - 1],
        record.planner_failures, membership,
    )


@dataclass(eq=False)
class ExperimentResult:
    out_dir: Path
    gain: float
    runs: list
    aggregate_path: Path
    summary: dict = field(default_factory=dict)


def _workers(requested: int | None, cfg: ExperimentConfig) -> int:
    env_value = os.environ.get("FRL_WORKERS")
    if env_value:
        return max(1, int(env_value))
    return max(1, int(requested if requested is not None else cfg.workers))


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> ExperimentResult:
    base_dir = None if cfg.base_dir is None else Path(cfg.base_dir)
    env = cfg.env.build(base_dir)
    out = Path(out_dir if out_dir is not None else cfg.out)
    if not out.is_absolute() and base_dir is not None and out_dir is None:
        out = base_dir / out
    (out / "runs").mkdir(parents=True, exist_ok=True)
    # The true optimal gain always comes from the exact planner.
    gain = solve_average_reward(flatten(env)).gain
    L = env.scope_bound if cfg.L is None else cfg.L
    steps = logged_steps(cfg.T, L, cfg.log_stride)
    jobs = []
    for ai, sweep in enumerate(cfg.agents):
        for pi, agent_cfg in enumerate(sweep.configs()):
            for si in range(cfg.num_seeds):
                seed = run_seed(cfg.master_seed, ai, pi, si)
                jobs.append((env, agent_cfg, cfg.T, L, seed, si, gain, steps))
    n_workers = _workers(workers, cfg)
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            runs = list(pool.map(_execute, jobs))
    else:
        runs = [_execute(job) for job in jobs]

    for run in runs:
        path = out / "runs" / f"{run.agent}_{_fmt(run.param)}_seed{run.seed_index:03d}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RUN_COLUMNS)
            for t, ep, cr, rg in zip(run.steps, run.episode, run.cum_reward, run.cum_regret):
                writer.writerow([run.agent, _fmt(run.param), run.seed, int(t), int(ep), _fmt(cr), _fmt(rg)])

    groups = {}
    for run in runs:
        groups.setdefault((run.agent, run.param), []).append(run)
    aggregate_path = out / "aggregate.csv"
    summary = {"gain": gain, "T": cfg.T, "L": L, "num_seeds": cfg.num_seeds, "env": env.name, "groups": []}
    decile = cfg.T // 10
    with aggregate_path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(AGGREGATE_COLUMNS)
        for (agent, param), members in groups.items():
            table = aggregate_quantiles([r.cum_regret for r in members], t=steps)
            for t, a, b, c in zip(table.t, table.q25, table.q50, table.q75):
                writer.writerow([agent, _fmt(param), int(t), _fmt(a), _fmt(b), _fmt(c)])
            final = np.array([r.cum_regret[-1] for r in members])
            entry = {
                "agent": agent,
                "param": param,
                "median_final_regret": float(np.median(final)),
                "planner_failures": int(sum(r.planner_failures for r in members)),
            }
            if decile >= 1:
                idx = {int(t): k for k, t in enumerate(steps)}
                first = np.array([r.cum_regret[idx[decile]] / decile for r in members])
                last_start = cfg.T - decile
                last = np.array([
                    (r.cum_regret[-1] - (r.cum_regret[idx[last_start]] if last_start >= 1 else 0.0)) / decile
                    for r in members
                ])
                entry["median_first_decile_rate"] = float(np.median(first))
                entry["median_last_decile_rate"] = float(np.median(last))
            memberships = [r.membership for r in members if r.membership is not None]
            if memberships:
                entry["confidence_coverage"] = float(np.mean(memberships))
            summary["groups"].append(entry)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=float))
    write_plot_script(out / "plot_regret.py", aggregate_path.name, env.name)
    return ExperimentResult(out, gain, runs, aggregate_path, summary)


PLOT_TEMPLATE = '''"""Plot median regret with a 25-75 percent band from {csv}.

Usage: python3 plot_regret.py [output.png]
"""
import csv
import sys
from collections import defaultdict
from pathlib import Path

import matplotlib.pyplot as plt

here = Path(__file__).resolve().parent
curves = defaultdict(lambda: ([], [], [], []))
with open(here / "{csv}") as fh:
    for row in csv.DictReader(fh):
        t, q25, q50, q75 = curves[(row["agent"], row["param"])]
        t.append(int(row["t"]))
        q25.append(float(row["q25"]))
        q50.append(float(row["q50"]))
        q75.append(float(row["q75"]))

fig, ax = plt.subplots(figsize=(6, 4))
for (agent, param), (t, q25, q50, q75) in sorted(curves.items()):
    line, = ax.plot(t, q50, label=f"{{agent}} ({{param}})")
    ax.fill_between(t, q25, q75, color=line.get_color(), alpha=0.2)
ax.set_xlabel("t")
ax.set_ylabel("regret")
ax.set_title("{title}")
ax.legend()
fig.tight_layout()
fig.savefig(sys.argv[1] if len(sys.argv) > 1 else here / "regret.png", dpi=150)
'''


def write_plot_script(path: Path, csv_name: str, title: str) -> None:
    Path(path).write_text(PLOT_TEMPLATE.format(csv=csv_name, title=title))
