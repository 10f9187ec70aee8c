"""Step-level and trajectory-level preference data from finished search trees."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

from qsteer.mcts import SearchTree, TreeNode, q_estimate

Steps = tuple[tuple[str, str], ...]


class NoTerminalError(ValueError):
    """The tree has no terminal node; it cannot yield preferences."""


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class PreferencePair:
    task_id: str
    depth: int
    prefix: Steps
    win_action: str
    lose_action: str
    q_win: float
    q_lose: float


@dataclass(frozen=True)
class TrajectoryPair:
    task_id: str
    win_steps: Steps
    lose_steps: Steps
    win_reward: float
    lose_reward: float

    @property
    def win_actions(self) -> list[str]:
        return [a for a, _ in self.win_steps]

    @property
    def lose_actions(self) -> list[str]:
        return [a for a, _ in self.lose_steps]


def best_terminal(tree: SearchTree) -> int:
    best: TreeNode | None = None
    for nd in tree.nodes:
        if nd.terminal and (best is None or nd.reward > best.reward):
            best = nd
    if best is None:
        raise NoTerminalError(f"no terminal node in tree for {tree.instruction.task_id}")
    return best.id


def extract_pairs(tree: SearchTree) -> list[PreferencePair]:
    """One (win, lose) pair per depth of the best trajectory.

    The win action is the best trajectory's next action; the lose action is
    the visited sibling with the lowest Q-hat strictly below the win's.
    """
    path = tree.path_to(best_terminal(tree))
    pairs = []
    for t, (node_id, win_id) in enumerate(zip(path, path[1:])):
        win = tree[win_id]
        q_win = q_estimate(tree, node_id, win.action).value
        lose, q_lose = None, None
        for c in tree[node_id].children:
            if c == win_id:
                continue
            q = q_estimate(tree, node_id, tree[c].action)
            if q.visited and q.value < q_win and (q_lose is None or q.value < q_lose):
                lose, q_lose = tree[c], q.value
        if lose is not None:
            pairs.append(
                PreferencePair(tree.instruction.task_id, t, tree.prefix(node_id), win.action, lose.action, q_win, q_lose)
            )
    return pairs


def extract_trajectory_pairs(tree: SearchTree, k: int = 1) -> list[TrajectoryPair]:
    """Pair the best terminal trajectory with up to ``k`` lowest-reward ones."""
    terminals = tree.terminals()
    if len({nd.reward for nd in terminals}) < 2:
        return []
    best = tree[best_terminal(tree)]
    losers = sorted((nd for nd in terminals if nd.reward < best.reward), key=lambda nd: (nd.reward, nd.id))
    return [
        TrajectoryPair(tree.instruction.task_id, tree.prefix(best.id), tree.prefix(nd.id), best.reward, nd.reward)
        for nd in losers[:k]
    ]


# -- JSONL -------------------------------------------------------------------


def _num(x: float) -> str:
    # +0.0 avoids "-0", which json reads back as an int and loses the sign
    return format(float(x) + 0.0, ".17g")


def _steps_json(steps: Steps) -> str:
    return "[" + ", ".join(
        f'{{"action": {json.dumps(a)}, "observation": {json.dumps(o)}}}' for a, o in steps
    ) + "]"


def pair_to_line(p: PreferencePair) -> str:
    return (
        f'{{"task_id": {json.dumps(p.task_id)}, "depth": {p.depth}, "prefix": {_steps_json(p.prefix)}, '
        f'"win_action": {json.dumps(p.win_action)}, "lose_action": {json.dumps(p.lose_action)}, '
        f'"q_win": {_num(p.q_win)}, "q_lose": {_num(p.q_lose)}}}'
    )


def trajectory_pair_to_line(p: TrajectoryPair) -> str:
    return (
        f'{{"task_id": {json.dumps(p.task_id)}, "win_steps": {_steps_json(p.win_steps)}, '
        f'"lose_steps": {_steps_json(p.lose_steps)}, '
        f'"win_reward": {_num(p.win_reward)}, "lose_reward": {_num(p.lose_reward)}}}'
    )


def _steps(raw) -> Steps:
    return tuple((str(s["action"]), str(s["observation"])) for s in raw)


def _pair_from(d: dict) -> PreferencePair:
    return PreferencePair(
        str(d["task_id"]), int(d["depth"]), _steps(d["prefix"]), str(d["win_action"]),
        str(d["lose_action"]), float(d["q_win"]), float(d["q_lose"]),
    )


def _trajectory_pair_from(d: dict) -> TrajectoryPair:
    return TrajectoryPair(
        str(d["task_id"]), _steps(d["win_steps"]), _steps(d["lose_steps"]),
        float(d["win_reward"]), float(d["lose_reward"]),
    )


AnyPair = Union[PreferencePair, TrajectoryPair]


def write_dataset(pairs: Iterable[AnyPair], path: Union[str, Path]) -> None:
    lines = []
    for p in pairs:
        lines.append(pair_to_line(p) if isinstance(p, PreferencePair) else trajectory_pair_to_line(p))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _read(path: Union[str, Path], build) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(build(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetError(f"{path}: line {lineno}: {e}") from e
    return out


def read_dataset(path: Union[str, Path]) -> list[PreferencePair]:
    return _read(path, _pair_from)


def read_trajectory_dataset(path: Union[str, Path]) -> list[TrajectoryPair]:
    return _read(path, _trajectory_pair_from)


def fingerprint(pairs: Sequence[AnyPair]) -> str:
    """Content hash of a dataset's canonical serialization."""
    h = hashlib.sha256()
    for p in pairs:
        line = pair_to_line(p) if isinstance(p, PreferencePair) else trajectory_pair_to_line(p)
        h.update(line.encode())
        h.update(b"\n")
    return h.hexdigest()
