"""End-to-end commands: collect -> train -> evaluate, plus artifact inspection.

All artifacts land in ``config.output_dir``:

    pairs.jsonl, trajectory_pairs.jsonl            training split preferences
    validation_pairs.jsonl, validation_trajectory_pairs.jsonl
    trees/<task_id>.json                           search trees (training split)
    collect_report.json
    model.json, train_curve.csv, train_report.json
    metrics.csv, metrics.json, per_task.jsonl
    q_histogram.csv                                from ``inspect`` on a checkpoint

Nothing time- or host-dependent is written, so repeated runs with the same
config produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy import stats

from qsteer.config import RunConfig
from qsteer.dpo import (
    QValueModel,
    prepare_step_examples,
    prepare_trajectory_examples,
    q_value,
    train,
)
from qsteer.env import TextEnv, make_env
from qsteer.mcts import SearchConfig, run_search
from qsteer.policy import Context, Featurizer, FeaturizedPolicy, Proposer, ScriptedAgent
from qsteer.prefs import (
    DatasetError,
    NoTerminalError,
    PreferencePair,
    TrajectoryPair,
    extract_pairs,
    extract_trajectory_pairs,
    fingerprint,
    read_dataset,
    read_trajectory_dataset,
    write_dataset,
)
from qsteer.remote import EndpointConfig, RemotePolicy
from qsteer.rollout import (
    evaluate_suite,
    episode_rng,
    sample_episode,
    write_metrics_csv,
    write_metrics_json,
    write_per_task_jsonl,
)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def make_agent(cfg: RunConfig, env: TextEnv) -> Proposer:
    a = cfg.agent
    if a.kind == "scripted":
        return ScriptedAgent(env, a.epsilon)
    if a.kind == "featurized":
        return FeaturizedPolicy.load(Path(a.weights)) if a.weights else FeaturizedPolicy.zeros()
    return RemotePolicy(EndpointConfig(a.base_url, a.model))


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- collect -----------------------------------------------------------------


@dataclass
class TaskOutcome:
    task_id: str
    tree: Optional[dict] = None
    pairs: list[PreferencePair] = field(default_factory=list)
    trajectory_pairs: list[TrajectoryPair] = field(default_factory=list)
    has_terminal: bool = False
    early_stopped: bool = False
    error: Optional[str] = None


def search_task(env: TextEnv, agent: Proposer, config: SearchConfig, seed: int) -> TaskOutcome:
    instruction = env.instruction(seed)
    try:
        tree = run_search(instruction, env, agent, config)
    except Exception as e:  # one task's failure must not abort the others
        log.warning("search failed for %s: %s", instruction.task_id, e)
        return TaskOutcome(instruction.task_id, error=f"{type(e).__name__}: {e}")
    out = TaskOutcome(instruction.task_id, tree.to_json(), early_stopped=tree.early_stopped)
    try:
        out.pairs = extract_pairs(tree)
        out.has_terminal = True
    except NoTerminalError:
        return out
    out.trajectory_pairs = extract_trajectory_pairs(tree)
    return out


def _search_job(args) -> TaskOutcome:
    return search_task(*args)


def collect_split(cfg: RunConfig, seeds: Sequence[int], env: Optional[TextEnv] = None) -> list[TaskOutcome]:
    env = env or make_env(cfg.env)
    agent = make_agent(cfg, env)
    jobs = [(env, agent, cfg.mcts, s) for s in seeds]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            return list(pool.map(_search_job, jobs))
    return [_search_job(j) for j in jobs]


def _split_report(outcomes: Sequence[TaskOutcome]) -> dict:
    done = [o for o in outcomes if o.error is None]
    pairs = sum(len(o.pairs) for o in outcomes)
    return {
        "tasks_attempted": len(outcomes),
        "tasks_failed": len(outcomes) - len(done),
        "trees_with_terminal": sum(o.has_terminal for o in outcomes),
        "pairs": pairs,
        "trajectory_pairs": sum(len(o.trajectory_pairs) for o in outcomes),
        "pairs_per_task": pairs / len(done) if done else 0.0,
        "early_stop_rate": sum(o.early_stopped for o in done) / len(done) if done else 0.0,
    }


def cmd_collect(cfg: RunConfig) -> dict:
    out = cfg.out
    (out / "trees").mkdir(parents=True, exist_ok=True)
    train_seeds = cfg.splits.seeds("train")
    if not train_seeds:
        write_dataset([], out / "pairs.jsonl")
        raise PipelineError("training split is empty")
    report: dict = {"config": cfg.to_dict()}
    for split, prefix in (("train", ""), ("validation", "validation_")):
        outcomes = collect_split(cfg, cfg.splits.seeds(split))
        pairs = [p for o in outcomes for p in o.pairs]
        tpairs = [p for o in outcomes for p in o.trajectory_pairs]
        write_dataset(pairs, out / f"{prefix}pairs.jsonl")
        write_dataset(tpairs, out / f"{prefix}trajectory_pairs.jsonl")
        if split == "train":
            for o in outcomes:
                if o.tree is not None:
                    _dump(o.tree, out / "trees" / f"{o.task_id}.json")
        rep = _split_report(outcomes)
        rep["dataset_fingerprint"] = fingerprint(pairs)
        report[split] = rep
        if split == "train" and outcomes and rep["tasks_failed"] == len(outcomes):
            _dump(report, out / "collect_report.json")
            raise PipelineError("every training task failed")
    _dump(report, out / "collect_report.json")
    return report


# -- train -------------------------------------------------------------------


def _load_pairs(path: Path, level: str):
    if not path.exists():
        raise PipelineError(f"dataset {path} does not exist")
    try:
        return read_dataset(path) if level == "step" else read_trajectory_dataset(path)
    except DatasetError as e:
        raise PipelineError(str(e)) from e


def cmd_train(cfg: RunConfig, dataset: Optional[Union[str, Path]] = None,
              validation: Optional[Union[str, Path]] = None) -> dict:
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    level = cfg.dpo.level
    stem = "pairs.jsonl" if level == "step" else "trajectory_pairs.jsonl"
    dataset = Path(dataset) if dataset else out / stem
    validation = Path(validation) if validation else out / f"validation_{stem}"
    pairs = _load_pairs(dataset, level)
    if not pairs:
        raise PipelineError(f"dataset {dataset} is empty")
    featurizer = Featurizer()
    prepare = prepare_step_examples if level == "step" else prepare_trajectory_examples
    examples, skipped = prepare(pairs, featurizer)
    if not examples:
        raise PipelineError(f"no usable pairs in {dataset} ({skipped} skipped)")
    val_examples = []
    if validation.exists():
        val_pairs = _load_pairs(validation, level)
        val_examples = prepare(val_pairs, featurizer)[0] if val_pairs else []
    model = QValueModel.initial(featurizer.dim, cfg.dpo.beta)
    result = train(examples, cfg.dpo, model, val_examples or None)
    fp = fingerprint(pairs)
    result.model.save(out / "model.json", cfg.dpo, fp)
    with open(out / "train_curve.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_accuracy", "validation_accuracy"])
        for row in result.history:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["train_accuracy"]),
                        repr(row.get("validation_accuracy", float("nan")))])
    report = {
        "config": cfg.to_dict(),
        "dataset": str(dataset),
        "dataset_fingerprint": fp,
        "pairs": len(pairs),
        "skipped": skipped,
        "history": result.history,
    }
    _dump(report, out / "train_report.json")
    return report


# -- evaluate ----------------------------------------------------------------


def load_checkpoint(path: Union[str, Path]) -> QValueModel:
    try:
        return QValueModel.load(path)
    except FileNotFoundError as e:
        raise PipelineError(f"checkpoint {path} not found") from e
    except (ValueError, KeyError, TypeError) as e:
        raise PipelineError(f"cannot load checkpoint {path}: {e}") from e


def cmd_evaluate(cfg: RunConfig, checkpoints: Optional[Mapping[str, Union[str, Path]]] = None) -> dict:
    """Run every configured strategy over the test split.

    ``checkpoints`` maps a model name to a checkpoint path; ``q_guided:<name>``
    strategies select by name.  Defaults to ``{"q": <output_dir>/model.json}``.
    """
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    needs_q = any(s.startswith("q_guided") for s in cfg.evaluate.strategies)
    if checkpoints is None:
        checkpoints = {"q": out / "model.json"} if needs_q else {}
    models = {name: load_checkpoint(p) for name, p in checkpoints.items()}
    env = make_env(cfg.env)
    seeds = cfg.splits.seeds("test")
    if not seeds:
        raise PipelineError("test split is empty")
    result = evaluate_suite(
        cfg.env, cfg.evaluate.strategies, cfg.evaluate.n_values, seeds, make_agent(cfg, env),
        models, cfg.evaluate.seed, cfg.workers, env,
    )
    write_metrics_csv(result, out / "metrics.csv")
    write_metrics_json(result, out / "metrics.json", {"config": cfg.to_dict()})
    write_per_task_jsonl(result, out / "per_task.jsonl")
    return {"rows": result.rows, "result": result}


# -- inspect -----------------------------------------------------------------


@dataclass
class QHistogram:
    success: list[float]
    failure: list[float]

    def summary(self) -> dict:
        out = {}
        for name, xs in (("success", self.success), ("failure", self.failure)):
            a = np.asarray(xs)
            out[name] = {
                "count": len(a),
                "mean": float(a.mean()) if len(a) else float("nan"),
                "skew": float(stats.skew(a)) if len(a) > 2 and np.ptp(a) > 0 else 0.0,
            }
        if self.success and self.failure:
            out["mann_whitney_p"] = float(
                stats.mannwhitneyu(self.failure, self.success, alternative="less").pvalue
            )
        return out


def q_histogram(
    model: QValueModel, env: TextEnv, agent: Proposer, seeds: Sequence[int],
    per_group: int = 100, seed: int = 0,
) -> QHistogram:
    """Q values of actions drawn from successful (reward 1) and failed episodes.

    Episodes are sampled at temperature 1 from ``agent``; up to ``per_group``
    actions per group are then drawn uniformly without replacement.
    """
    groups: dict[str, list[tuple[Context, str]]] = {"success": [], "failure": []}
    for s in seeds:
        res = sample_episode(env, agent, env.instruction(s), episode_rng(seed, s))
        state, instr, obs = env.reset(s)
        prefix: list[tuple[str, str]] = []
        steps = []
        for action, next_obs in res.trajectory.steps:
            steps.append((Context(instr, tuple(prefix), tuple(env.valid_actions(state)), obs, state), action))
            state, obs, _, _ = env.step(state, action)
            prefix.append((action, next_obs))
        groups["success" if res.reward >= 1.0 else "failure"].extend(steps)
    rng = np.random.default_rng(seed)
    values = {}
    for name, items in groups.items():
        pick = rng.choice(len(items), size=min(per_group, len(items)), replace=False) if items else []
        values[name] = [q_value(model, items[i][0], items[i][1]) for i in sorted(pick)]
    return QHistogram(values["success"], values["failure"])


def write_q_histogram(h: QHistogram, path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "q"])
        for name, xs in (("success", h.success), ("failure", h.failure)):
            for x in xs:
                w.writerow([name, repr(x)])


def _inspect_tree(doc: dict) -> dict:
    nodes = doc["nodes"]
    terminals = [n for n in nodes if n["terminal"]]
    return {
        "kind": "tree",
        "task_id": doc.get("task_id"),
        "nodes": len(nodes),
        "iterations_used": doc["iterations_used"],
        "early_stopped": doc["early_stopped"],
        "max_depth": max(n["depth"] for n in nodes),
        "terminals": len(terminals),
        "best_reward": max((n["reward"] for n in terminals), default=None),
        "root_value": nodes[doc["root"]]["V"],
    }


def _inspect_dataset(path: Path) -> dict:
    try:
        pairs = read_dataset(path)
        depths: dict[int, int] = {}
        for p in pairs:
            depths[p.depth] = depths.get(p.depth, 0) + 1
        return {
            "kind": "step_pairs",
            "pairs": len(pairs),
            "tasks": len({p.task_id for p in pairs}),
            "pairs_by_depth": dict(sorted(depths.items())),
            "mean_q_win": float(np.mean([p.q_win for p in pairs])) if pairs else None,
            "mean_q_lose": float(np.mean([p.q_lose for p in pairs])) if pairs else None,
            "fingerprint": fingerprint(pairs),
        }
    except DatasetError:
        tpairs = read_trajectory_dataset(path)
        return {"kind": "trajectory_pairs", "pairs": len(tpairs), "fingerprint": fingerprint(tpairs)}


def cmd_inspect(path: Union[str, Path], cfg: Optional[RunConfig] = None, per_group: int = 100) -> dict:
    """Summarize a tree dump, dataset or checkpoint.

    For a checkpoint, episodes are sampled on the test split of ``cfg`` and a
    success/failure Q histogram is written to ``<output_dir>/q_histogram.csv``.
    """
    path = Path(path)
    if not path.exists():
        raise PipelineError(f"{path} does not exist")
    try:
        if path.suffix == ".jsonl":
            return _inspect_dataset(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if isinstance(doc, dict) and "nodes" in doc:
            return _inspect_tree(doc)
        if not (isinstance(doc, dict) and "theta" in doc):
            raise PipelineError(f"{path}: not a tree dump, dataset or checkpoint")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, DatasetError) as e:
        raise PipelineError(f"{path}: malformed artifact: {e}") from e
    model = load_checkpoint(path)
    summary = {
        "kind": "checkpoint",
        "beta": model.beta,
        "dim": len(model.theta),
        "theta_minus_ref_norm": float(np.linalg.norm(model.theta - model.ref)),
        "dataset_fingerprint": doc.get("dataset_fingerprint"),
    }
    if cfg is not None:
        env = make_env(cfg.env)
        h = q_histogram(model, env, make_agent(cfg, env), cfg.splits.seeds("test"), per_group, cfg.evaluate.seed)
        cfg.out.mkdir(parents=True, exist_ok=True)
        write_q_histogram(h, cfg.out / "q_histogram.csv")
        summary["q_histogram"] = h.summary()
    return summary
