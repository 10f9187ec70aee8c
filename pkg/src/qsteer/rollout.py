"""Inference-time episodes: greedy, sampling, Best-of-N and Q-guided selection.

Each episode owns its RNG.  ``episode_rng(seed, task_seed, k)`` is the stream
for the ``k``-th sample of a task; greedy, sampled and Q-guided episodes all
use ``k = 0`` and Best-of-N uses ``k = 0..n-1``, so the first Best-of-N sample
is exactly the single sampled episode.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from qsteer.env import EnvState, Instruction, TextEnv, Trajectory, Transition, canonicalize, make_env
from qsteer.policy import Context, Proposer

GREEDY, SAMPLE, BEST_OF_N, Q_GUIDED = "greedy", "sample", "best_of_n", "q_guided"
STRATEGIES = (GREEDY, SAMPLE, BEST_OF_N, Q_GUIDED)


class QScorer(Protocol):
    """Anything with ``q_values(context) -> array`` aligned to the candidates."""

    def q_values(self, context: Context) -> np.ndarray: ...


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    reward: float
    strategy: str
    n_used: int
    # number of proposal calls made, for cost accounting
    tokens_proposed: int


def episode_rng(seed: int, task_seed: int, k: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, task_seed, k])


class CountingEnv:
    """Wraps an environment and counts steps and terminal outcomes.

    Used to check that a single-trial episode observes exactly one outcome,
    on its final step, and never steps past it.
    """

    def __init__(self, env: TextEnv):
        self.env = env
        self.steps = 0
        self.outcomes = 0
        self.steps_after_outcome = 0

    def __getattr__(self, name):
        return getattr(self.env, name)

    def step(self, state: EnvState, action: str) -> Transition:
        if self.outcomes:
            self.steps_after_outcome += 1
        tr = self.env.step(state, action)
        self.steps += 1
        if tr.terminal:
            self.outcomes += 1
        return tr


Chooser = Callable[[Context], str]


def _run(env: TextEnv, instruction: Instruction, choose: Chooser) -> Trajectory:
    state, instr, obs = env.reset(instruction.seed)
    steps: list[tuple[str, str]] = []
    outcome = 0.0
    while True:
        ctx = Context(instr, tuple(steps), tuple(env.valid_actions(state)), obs, state)
        action = canonicalize(choose(ctx))
        state, obs, terminal, r = env.step(state, action)
        steps.append((action, obs))
        if terminal:
            outcome = float(r)
            break
    return Trajectory(instr, steps, outcome)


def greedy_episode(env: TextEnv, policy: Proposer, instruction: Instruction,
                   rng: Optional[np.random.Generator] = None) -> EpisodeResult:
    rng = rng if rng is not None else episode_rng(0, instruction.seed)
    calls = 0

    def choose(ctx):
        nonlocal calls
        calls += 1
        return policy.greedy(ctx, rng)

    traj = _run(env, instruction, choose)
    return EpisodeResult(traj, traj.outcome, GREEDY, 1, calls)


def sample_episode(env: TextEnv, policy: Proposer, instruction: Instruction,
                   rng: Optional[np.random.Generator] = None, temperature: float = 1.0) -> EpisodeResult:
    rng = rng if rng is not None else episode_rng(0, instruction.seed)
    calls = 0

    def choose(ctx):
        nonlocal calls
        calls += 1
        return policy.propose(ctx, 1, temperature, rng)[0]

    traj = _run(env, instruction, choose)
    return EpisodeResult(traj, traj.outcome, SAMPLE, 1, calls)


def q_select(q_model: QScorer, ctx: Context, proposals: Sequence[str]) -> str:
    """Highest-Q proposal; ties and unscorable proposals fall back to proposal order."""
    if len(proposals) == 1:
        return proposals[0]
    q = q_model.q_values(ctx)
    best, best_q = proposals[0], -math.inf
    for a in proposals:
        try:
            qa = float(q[ctx.index(a)])
        except KeyError:
            continue
        if qa > best_q:
            best, best_q = a, qa
    return best


def q_guided_episode(env: TextEnv, policy: Proposer, q_model: QScorer, instruction: Instruction,
                     n: int = 5, rng: Optional[np.random.Generator] = None) -> EpisodeResult:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else episode_rng(0, instruction.seed)
    calls = 0

    def choose(ctx):
        nonlocal calls
        calls += 1
        return q_select(q_model, ctx, policy.propose(ctx, n, 1.0, rng))

    traj = _run(env, instruction, choose)
    return EpisodeResult(traj, traj.outcome, Q_GUIDED, n, calls)


def best_of_n_episode(env: TextEnv, policy: Proposer, instruction: Instruction, n: int,
                      seed: int = 0) -> EpisodeResult:
    """Evaluation-only baseline: uses the environment outcome of all n samples."""
    if n < 1:
        raise ValueError("n must be >= 1")
    best, calls = None, 0
    for k in range(n):
        res = sample_episode(env, policy, instruction, episode_rng(seed, instruction.seed, k))
        calls += res.tokens_proposed
        if best is None or res.reward > best.reward:
            best = res
    return EpisodeResult(best.trajectory, best.reward, BEST_OF_N, n, calls)


# -- suites ------------------------------------------------------------------------


@dataclass(frozen=True)
class SuiteRow:
    strategy: str
    n: int
    mean_reward: float
    stderr: float
    num_tasks: int


@dataclass
class SuiteResult:
    rows: list[SuiteRow]
    # (strategy, n) -> reward per task, in task order
    per_task: dict[tuple[str, int], list[float]] = field(default_factory=dict)
    task_ids: list[str] = field(default_factory=list)

    def row(self, strategy: str, n: int) -> SuiteRow:
        for r in self.rows:
            if r.strategy == strategy and r.n == n:
                return r
        raise KeyError((strategy, n))

    def rewards(self, strategy: str, n: int) -> list[float]:
        return self.per_task[(strategy, n)]


def mean_stderr(xs: Sequence[float]) -> tuple[float, float]:
    a = np.asarray(xs, dtype=np.float64)
    if len(a) < 2:
        return float(a.mean()), 0.0
    return float(a.mean()), float(a.std(ddof=1) / math.sqrt(len(a)))


def _strategy_kind(strategy: str) -> str:
    return strategy.split(":", 1)[0]


def _runs(strategies: Sequence[str], n_values: Sequence[int]) -> list[tuple[str, int]]:
    runs = []
    for s in strategies:
        kind = _strategy_kind(s)
        if kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}")
        if kind in (GREEDY, SAMPLE):
            runs.append((s, 1))
        else:
            runs.extend((s, n) for n in n_values)
    return runs


def run_strategy(
    env: TextEnv,
    policy: Proposer,
    instruction: Instruction,
    strategy: str,
    n: int,
    q_models: Optional[Mapping[str, QScorer]] = None,
    seed: int = 0,
) -> EpisodeResult:
    """Run one named strategy.  ``q_guided:<name>`` picks ``q_models[name]``;
    plain ``q_guided`` requires exactly one model."""
    kind = _strategy_kind(strategy)
    rng = episode_rng(seed, instruction.seed)
    if kind == GREEDY:
        return greedy_episode(env, policy, instruction, rng)
    if kind == SAMPLE:
        return sample_episode(env, policy, instruction, rng)
    if kind == BEST_OF_N:
        return best_of_n_episode(env, policy, instruction, n, seed)
    if not q_models:
        raise ValueError("q_guided needs a Q model")
    if ":" in strategy:
        model = q_models[strategy.split(":", 1)[1]]
    elif len(q_models) == 1:
        model = next(iter(q_models.values()))
    else:
        raise ValueError("ambiguous q_guided strategy; use q_guided:<model name>")
    return q_guided_episode(env, policy, model, instruction, n, rng)


def _task_rewards(args) -> list[float]:
    env, policy, instruction, runs, q_models, seed = args
    return [run_strategy(env, policy, instruction, s, n, q_models, seed).reward for s, n in runs]


def evaluate_suite(
    env_kind: str,
    strategies: Sequence[str],
    n_values: Sequence[int],
    task_seeds: Sequence[int],
    policy: Proposer,
    q_models: Optional[Mapping[str, QScorer]] = None,
    seed: int = 0,
    workers: int = 1,
    env: Optional[TextEnv] = None,
) -> SuiteResult:
    """Mean reward +- standard error per (strategy, n) over the given tasks.

    Tasks run independently (optionally in a process pool); results are
    gathered in task order, so the table does not depend on ``workers``.
    """
    if not task_seeds:
        raise ValueError("need at least one task")
    env = env or make_env(env_kind)
    runs = _runs(strategies, n_values)
    jobs = [(env, policy, env.instruction(s), runs, q_models, seed) for s in task_seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_task_rows = list(pool.map(_task_rewards, jobs))
    else:
        per_task_rows = [_task_rewards(j) for j in jobs]
    per_task = {run: [row[i] for row in per_task_rows] for i, run in enumerate(runs)}
    rows = []
    for (s, n), rewards in per_task.items():
        mean, se = mean_stderr(rewards)
        rows.append(SuiteRow(s, n, mean, se, len(rewards)))
    return SuiteResult(rows, per_task, [env.instruction(s).task_id for s in task_seeds])


# -- export ----------------------------------------------------------------------

METRIC_FIELDS = ("strategy", "n", "mean_reward", "stderr", "num_tasks")


def write_metrics_csv(result: SuiteResult, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in result.rows:
            w.writerow([r.strategy, r.n, repr(r.mean_reward), repr(r.stderr), r.num_tasks])


def write_metrics_json(result: SuiteResult, path: Union[str, Path], extra: Optional[dict] = None) -> None:
    doc = {"rows": [asdict(r) for r in result.rows]}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_per_task_jsonl(result: SuiteResult, path: Union[str, Path]) -> None:
    lines = []
    for (s, n), rewards in result.per_task.items():
        for tid, r in zip(result.task_ids, rewards):
            lines.append(json.dumps({"strategy": s, "n": n, "task_id": tid, "reward": r}))
    Path(path).write_text("".join(x + "\n" for x in lines), encoding="utf-8")
