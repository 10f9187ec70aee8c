"""Monte Carlo Tree Search that annotates agent steps with Q-value estimates.

One iteration is select -> expand -> evaluate -> backpropagate:

* select descends by UCT, ``V + sqrt(eta * ln N(parent) / N)``, with unvisited
  children taking priority;
* expand samples up to ``n`` deduplicated actions from the proposal policy at
  the selected leaf and steps the environment for each;
* evaluate rolls out the first new child with the same policy (one sample per
  step, temperature 1) until termination, or scores ``penalty_reward`` when
  the depth cap is hit;
* backpropagate updates the running mean and visit count of every node on
  the selected path, so the root is visited exactly once per iteration.

Search stops early once any terminal node with reward >= 1 exists.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from qsteer.env import EnvState, Instruction, TextEnv, canonicalize
from qsteer.policy import Context, Proposer

SUCCESS_REWARD = 1.0


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    m: int = 30
    n: int = 5
    eta: float = 2.0
    temperature: float = 1.0
    max_depth: Optional[int] = None
    penalty_reward: float = -1.0
    seed: int = 0
    early_stop: bool = True
    # expand every valid action instead of sampling n of them
    full_expansion: bool = False

    def validate(self) -> "SearchConfig":
        if self.m < 1 or self.n < 1:
            raise ValueError("m and n must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.penalty_reward >= 0:
            raise ValueError("penalty_reward must be negative")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        return self


@dataclass
class TreeNode:
    id: int
    parent: Optional[int]
    action: Optional[str]
    observation: str
    depth: int
    state: EnvState
    terminal: bool = False
    reward: Optional[float] = None
    truncated: bool = False
    V: float = 0.0
    N: int = 0
    children: list[int] = field(default_factory=list)


@dataclass
class SearchTree:
    instruction: Instruction
    nodes: list[TreeNode]
    root: int = 0
    iterations_used: int = 0
    early_stopped: bool = False
    max_depth: int = 0

    def __getitem__(self, i: int) -> TreeNode:
        return self.nodes[i]

    def __len__(self) -> int:
        return len(self.nodes)

    def add(self, **kw) -> TreeNode:
        node = TreeNode(id=len(self.nodes), **kw)
        self.nodes.append(node)
        if node.parent is not None:
            self.nodes[node.parent].children.append(node.id)
        return node

    def path_to(self, i: int) -> list[int]:
        path = [i]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path[::-1]

    def prefix(self, i: int) -> tuple[tuple[str, str], ...]:
        """The (action, observation) history leading to node ``i``."""
        return tuple((self.nodes[j].action, self.nodes[j].observation) for j in self.path_to(i)[1:])

    def context(self, i: int, env: TextEnv) -> Context:
        node = self.nodes[i]
        return Context(
            self.instruction,
            self.prefix(i),
            tuple(env.valid_actions(node.state)),
            node.observation,
            node.state,
        )

    def child_by_action(self, parent: int, action: str) -> TreeNode:
        action = canonicalize(action)
        for c in self.nodes[parent].children:
            if self.nodes[c].action == action:
                return self.nodes[c]
        raise KeyError(f"node {parent} has no child via {action!r}")

    def terminals(self) -> list[TreeNode]:
        return [nd for nd in self.nodes if nd.terminal]

    def has_success(self) -> bool:
        return any(nd.terminal and nd.reward >= SUCCESS_REWARD for nd in self.nodes)

    def to_json(self) -> dict:
        return {
            "task_id": self.instruction.task_id,
            "instruction": self.instruction.text,
            "root": self.root,
            "iterations_used": self.iterations_used,
            "early_stopped": self.early_stopped,
            "nodes": [
                {
                    "id": nd.id,
                    "parent": nd.parent,
                    "action": nd.action,
                    "observation": nd.observation,
                    "V": nd.V,
                    "N": nd.N,
                    "depth": nd.depth,
                    "terminal": nd.terminal,
                    "reward": nd.reward,
                }
                for nd in self.nodes
            ],
        }


def uct_score(node: TreeNode, parent_visits: int, eta: float) -> float:
    if node.N == 0:
        return math.inf
    return node.V + math.sqrt(eta * math.log(parent_visits) / node.N)


def select(tree: SearchTree, eta: float) -> list[int]:
    path = [tree.root]
    node = tree[tree.root]
    while node.children and not node.terminal and node.depth < tree.max_depth:
        parent_visits = max(node.N, 1)
        best, best_score = None, -math.inf
        for c in node.children:
            score = uct_score(tree[c], parent_visits, eta)
            if score > best_score:
                best, best_score = c, score
        node = tree[best]
        path.append(best)
    return path


def expand(
    tree: SearchTree,
    leaf: int,
    policy: Proposer,
    env: TextEnv,
    n: int,
    temperature: float,
    rng: np.random.Generator,
    penalty_reward: float = -1.0,
    full: bool = False,
) -> list[int]:
    node = tree[leaf]
    if node.terminal:
        raise SearchError(f"cannot expand terminal node {leaf}")
    if node.children:
        raise SearchError(f"node {leaf} is already expanded")
    ctx = tree.context(leaf, env)
    actions = list(ctx.candidates) if full else policy.propose(ctx, n, temperature, rng)
    new = []
    for a in actions:
        a = canonicalize(a)
        nxt, obs, terminal, outcome = env.step(node.state, a)
        truncated = nxt.truncated
        child = tree.add(
            parent=leaf,
            action=a,
            observation=obs,
            depth=node.depth + 1,
            state=nxt,
            terminal=terminal,
            reward=(penalty_reward if truncated else outcome) if terminal else None,
            truncated=truncated,
        )
        new.append(child.id)
    return new


def evaluate(
    tree: SearchTree,
    node_id: int,
    rollout_policy: Proposer,
    env: TextEnv,
    max_depth: int,
    penalty_reward: float,
    rng: np.random.Generator,
) -> float:
    """Value of a node: its stored reward if terminal, otherwise one rollout.

    Rollout steps are not added to the tree.  Hitting ``max_depth`` or the
    environment step cap without finishing scores ``penalty_reward``.
    """
    node = tree[node_id]
    if node.terminal:
        return node.reward
    state, obs, depth = node.state, node.observation, node.depth
    prefix = list(tree.prefix(node_id))
    while depth < max_depth:
        ctx = Context(tree.instruction, tuple(prefix), tuple(env.valid_actions(state)), obs, state)
        action = rollout_policy.propose(ctx, 1, 1.0, rng)[0]
        state, obs, terminal, outcome = env.step(state, action)
        depth += 1
        if terminal:
            return penalty_reward if state.truncated else outcome
        prefix.append((canonicalize(action), obs))
    return penalty_reward


def backpropagate(tree: SearchTree, path: list[int], r: float) -> None:
    for i in reversed(path):
        node = tree[i]
        node.N += 1
        node.V = (node.V * (node.N - 1) + r) / node.N


class QEstimate(NamedTuple):
    value: float
    visited: bool


def q_estimate(tree: SearchTree, parent: int, action: str) -> QEstimate:
    """Q-hat(s, a) = V(child) under deterministic transitions.

    Terminal children report their stored reward; an unvisited non-terminal
    child has no evidence and is flagged.
    """
    child = tree.child_by_action(parent, action)
    if child.terminal:
        return QEstimate(child.reward, True)
    if child.N == 0:
        return QEstimate(0.0, False)
    return QEstimate(child.V, True)


IterationHook = Callable[[SearchTree], None]


def run_search(
    instruction: Instruction,
    env: TextEnv,
    policy: Proposer,
    config: SearchConfig,
    rollout_policy: Optional[Proposer] = None,
    on_iteration: Optional[IterationHook] = None,
) -> SearchTree:
    config.validate()
    rollout_policy = rollout_policy or policy
    max_depth = config.max_depth or env.max_steps
    state, instr, obs = env.reset(instruction.seed)
    rng = np.random.default_rng([config.seed, instruction.seed])
    tree = SearchTree(instr, [], max_depth=max_depth)
    tree.add(parent=None, action=None, observation=obs, depth=0, state=state)

    for _ in range(config.m):
        path = select(tree, config.eta)
        leaf = tree[path[-1]]
        if not leaf.terminal and leaf.depth < max_depth:
            new = expand(
                tree, leaf.id, policy, env, config.n, config.temperature, rng,
                config.penalty_reward, config.full_expansion,
            )
            path.append(new[0])
        r = evaluate(tree, path[-1], rollout_policy, env, max_depth, config.penalty_reward, rng)
        backpropagate(tree, path, r)
        tree.iterations_used += 1
        if on_iteration is not None:
            on_iteration(tree)
        if config.early_stop and tree.has_success():
            tree.early_stopped = True
            break
    return tree


def check_tree(tree: SearchTree, penalty_reward: float) -> list[str]:
    """Return a list of violated structural/statistical invariants (empty if sound)."""
    problems = []
    root = tree[tree.root]
    if root.parent is not None or root.depth != 0 or root.action is not None:
        problems.append("malformed root")
    if root.N != tree.iterations_used:
        problems.append(f"root N {root.N} != iterations {tree.iterations_used}")
    seen = set()
    stack = [tree.root]
    while stack:
        i = stack.pop()
        if i in seen:
            problems.append(f"cycle at {i}")
            continue
        seen.add(i)
        nd = tree[i]
        if nd.N < sum(tree[c].N for c in nd.children):
            problems.append(f"visit conservation at {i}")
        if not (penalty_reward - 1e-12 <= nd.V <= 1.0 + 1e-12):
            problems.append(f"value out of bounds at {i}: {nd.V}")
        for c in nd.children:
            if tree[c].parent != i or tree[c].depth != nd.depth + 1:
                problems.append(f"bad link {i}->{c}")
            stack.append(c)
    if len(seen) != len(tree):
        problems.append("unreachable nodes")
    if tree.early_stopped and not tree.has_success():
        problems.append("early stop without a successful terminal")
    return problems


def config_dict(config: SearchConfig) -> dict:
    return asdict(config)
