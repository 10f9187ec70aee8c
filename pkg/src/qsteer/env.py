"""Deterministic text environments with sparse terminal rewards.

Two environments are provided:

* ``TreasureShop`` -- a small shopping site.  The agent searches a keyword,
  clicks a product, picks a size option, and buys it.  The outcome is graded
  in [0, 1] by how many of the required attributes (type, color, material,
  size) and the price cap the purchase satisfies.
* ``ChainQA`` -- multi-hop question answering over a tiny knowledge graph.
  The agent searches an entity, follows relations with ``lookup``, and
  answers.  The outcome is binary.

Both are pure functions of ``(env_kind, seed)`` and have small, enumerable
state spaces, so exact Q values can be computed by backward induction.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Any, Mapping, NamedTuple, Optional, Protocol, Union

from qsteer.rng import SplitMix64

TREASURE_SHOP = "treasureshop"
CHAIN_QA = "chainqa"
ENV_KINDS = (TREASURE_SHOP, CHAIN_QA)

INVALID_OBSERVATION = "invalid action."
_ACTION_RE = re.compile(r"^(\w+)\[(.*)\]$")


class EnvError(RuntimeError):
    """Caller misuse of an environment (stepping a terminal state, ...)."""


class StateSpaceTooLarge(EnvError):
    pass


def canonicalize(text: str) -> str:
    """Trim, lowercase and collapse internal whitespace."""
    return " ".join(text.strip().lower().split())


def parse_action(action: str) -> tuple[str, str]:
    """Split ``verb[arg]`` into ``(verb, arg)``; unparseable text gives ``("", text)``."""
    m = _ACTION_RE.match(action)
    if m is None:
        return "", action
    return m.group(1), m.group(2).strip()


@dataclass(frozen=True)
class Instruction:
    task_id: str
    seed: int
    text: str

    @property
    def env_kind(self) -> str:
        return self.task_id.rsplit("-", 1)[0]


def task_id_for(env_kind: str, seed: int) -> str:
    return f"{env_kind}-{seed}"


def parse_task_id(task_id: str) -> tuple[str, int]:
    kind, _, seed = task_id.rpartition("-")
    if kind not in ENV_KINDS or not seed.isdigit():
        raise ValueError(f"malformed task id: {task_id!r}")
    return kind, int(seed)


@dataclass(frozen=True)
class EnvState:
    env_kind: str
    seed: int
    step_count: int
    page: tuple
    terminal: bool = False

    @property
    def truncated(self) -> bool:
        """Terminal because the step cap was reached rather than by finishing."""
        return self.terminal and self.page == ("timeout",)


class Transition(NamedTuple):
    state: EnvState
    observation: str
    terminal: bool
    outcome: Optional[float]


@dataclass
class Trajectory:
    instruction: Instruction
    steps: list[tuple[str, str]] = field(default_factory=list)
    outcome: Optional[float] = None

    @property
    def actions(self) -> list[str]:
        return [a for a, _ in self.steps]


class TextEnv:
    """Shared step/reset logic; subclasses define pages and transitions."""

    kind: str = ""
    default_max_steps: int = 10

    def __init__(self, max_steps: Optional[int] = None):
        self.max_steps = max_steps or self.default_max_steps
        self._solutions: dict[int, dict] = {}

    def task(self, seed: int) -> Any:
        raise NotImplementedError

    def _initial(self, task) -> tuple[tuple, str]:
        raise NotImplementedError

    def _actions(self, task, page: tuple) -> list[str]:
        raise NotImplementedError

    def _transition(self, task, page: tuple, action: str) -> tuple[tuple, str, Optional[float]]:
        raise NotImplementedError

    def fixture(self, seed: int) -> dict:
        raise NotImplementedError

    def reset(self, seed: int) -> tuple[EnvState, Instruction, str]:
        task = self.task(seed)
        page, obs = self._initial(task)
        state = EnvState(self.kind, seed, 0, page)
        return state, Instruction(task_id_for(self.kind, seed), seed, task.instruction), obs

    def instruction(self, seed: int) -> Instruction:
        return Instruction(task_id_for(self.kind, seed), seed, self.task(seed).instruction)

    def step(self, state: EnvState, action: str) -> Transition:
        if state.terminal:
            raise EnvError("cannot step a terminal state")
        if state.env_kind != self.kind:
            raise EnvError(f"state belongs to {state.env_kind}, not {self.kind}")
        task = self.task(state.seed)
        page, obs, outcome = self._transition(task, state.page, canonicalize(action))
        count = state.step_count + 1
        if outcome is not None:
            return Transition(EnvState(self.kind, state.seed, count, ("done",), True), obs, True, outcome)
        if count >= self.max_steps:
            return Transition(EnvState(self.kind, state.seed, count, ("timeout",), True), obs, True, 0.0)
        return Transition(replace(state, step_count=count, page=page), obs, False, None)

    def valid_actions(self, state: EnvState) -> list[str]:
        if state.terminal:
            raise EnvError("terminal state has no valid actions")
        return self._actions(self.task(state.seed), state.page)

    def replay(self, seed: int, actions: list[str]) -> tuple[EnvState, Instruction, list[tuple[str, str]]]:
        """Reset and apply ``actions``; returns the final state and the observed steps."""
        state, instruction, _ = self.reset(seed)
        steps = []
        for a in actions:
            state, obs, _, _ = self.step(state, a)
            steps.append((canonicalize(a), obs))
        return state, instruction, steps

    # -- exact solution ---------------------------------------------------

    def solution(self, seed: int) -> dict:
        """Optimal values and shortest optimal actions, memoized per seed."""
        if seed not in self._solutions:
            self._solutions[seed] = _solve_optimal(self, seed)
        return self._solutions[seed]

    def optimal_action(self, state: EnvState) -> str:
        return self.solution(state.seed)["action"][state]

    def optimal_reward(self, seed: int) -> float:
        state, _, _ = self.reset(seed)
        return self.solution(seed)["value"][state]


# ---------------------------------------------------------------------------
# TreasureShop

SHOP_TYPES = ("boots", "sandals", "jacket", "backpack", "hat", "scarf", "sneakers", "gloves")
SHOP_COLORS = ("red", "blue", "black", "white", "green", "brown")
SHOP_MATERIALS = ("leather", "cotton", "wool", "canvas", "suede", "denim")
SHOP_PRICE_CAPS = (30, 40, 50, 60)
SHOP_SIZES = ("small", "medium", "large")
SHOP_KEYWORDS = 5
SHOP_ITEMS_PER_PAGE = 4


@dataclass(frozen=True)
class Product:
    type: str
    color: str
    material: str
    price: int

    @property
    def title(self) -> str:
        return f"{self.color} {self.material} {self.type}"


@dataclass(frozen=True)
class ShopTask:
    seed: int
    target: Product
    price_cap: int
    size: str
    keywords: tuple[str, ...]
    results: Mapping[str, tuple[Product, ...]]
    instruction: str

    def reward(self, p: Product, size: str = "") -> float:
        """(matched required attributes + price indicator) / (required attributes + 1)."""
        matched = (
            (p.type == self.target.type)
            + (p.color == self.target.color)
            + (p.material == self.target.material)
            + (size == self.size)
        )
        return min(1.0, max(0.0, (matched + (p.price < self.price_cap)) / 5.0))


@lru_cache(maxsize=4096)
def make_shop_task(seed: int) -> ShopTask:
    rng = SplitMix64(seed)
    types = rng.sample(SHOP_TYPES, SHOP_KEYWORDS)
    target_type = types[0]
    color = rng.choice(SHOP_COLORS)
    material = rng.choice(SHOP_MATERIALS)
    cap = rng.choice(SHOP_PRICE_CAPS)
    size = rng.choice(SHOP_SIZES)
    keywords = list(types)
    rng.shuffle(keywords)

    def price(within: bool) -> int:
        return cap - 1 - rng.below(20) if within else cap + rng.below(25)

    def other(options, exclude):
        return rng.choice([o for o in options if o != exclude])

    target = Product(target_type, color, material, price(True))
    items = [
        target,
        Product(target_type, color, other(SHOP_MATERIALS, material), price(rng.below(2) == 0)),
        Product(target_type, other(SHOP_COLORS, color), material, price(rng.below(2) == 0)),
        Product(target_type, other(SHOP_COLORS, color), other(SHOP_MATERIALS, material), price(rng.below(2) == 0)),
    ]
    rng.shuffle(items)
    results = {target_type: tuple(items)}
    for kw in types[1:]:
        page: list[Product] = []
        titles = set()
        while len(page) < SHOP_ITEMS_PER_PAGE:
            p = Product(kw, rng.choice(SHOP_COLORS), rng.choice(SHOP_MATERIALS), 10 + rng.below(70))
            if p.title not in titles:
                titles.add(p.title)
                page.append(p)
        results[kw] = tuple(page)
    text = (
        f"i am looking for {color} {material} {target_type} in size {size}, "
        f"and price lower than {cap}.00 dollars"
    )
    return ShopTask(seed, target, cap, size, tuple(keywords), results, text)


class TreasureShop(TextEnv):
    kind = TREASURE_SHOP
    default_max_steps = 10

    def task(self, seed: int) -> ShopTask:
        return make_shop_task(seed)

    def _initial(self, task: ShopTask):
        return ("search",), self._search_page(task)

    @staticmethod
    def _search_page(task: ShopTask) -> str:
        return "search page. keywords: " + ", ".join(task.keywords) + ". [search]"

    @staticmethod
    def _results_page(task: ShopTask, kw: str) -> str:
        listing = " | ".join(f"[{p.title}] ${p.price}.00" for p in task.results[kw])
        return f"results for {kw}: {listing} | [back to search]"

    @staticmethod
    def _item_page(p: Product, size: str = "") -> str:
        options = " ".join(f"[{s}]" for s in SHOP_SIZES)
        chosen = f"selected size: {size}. " if size else ""
        return f"{p.title}. price: ${p.price}.00. size: {options}. {chosen}[buy now] [< prev] [back to search]"

    def _actions(self, task: ShopTask, page: tuple) -> list[str]:
        if page[0] == "search":
            return [f"search[{kw}]" for kw in task.keywords]
        if page[0] == "results":
            return [f"click[{p.title}]" for p in task.results[page[1]]] + ["click[back to search]"]
        return [f"click[{s}]" for s in SHOP_SIZES] + ["click[buy now]", "click[< prev]", "click[back to search]"]

    def _transition(self, task: ShopTask, page: tuple, action: str):
        verb, arg = parse_action(action)
        where = page[0]
        if verb == "search" and where == "search":
            words = set(re.findall(r"[a-z]+", arg))
            for kw in task.keywords:
                if kw in words:
                    return ("results", kw), self._results_page(task, kw), None
        elif verb == "click":
            if arg == "back to search" and where in ("results", "item"):
                return ("search",), self._search_page(task), None
            if where == "results":
                for i, p in enumerate(task.results[page[1]]):
                    if p.title == arg:
                        return ("item", page[1], i, ""), self._item_page(p), None
            elif where == "item":
                p = task.results[page[1]][page[2]]
                if arg in SHOP_SIZES:
                    return ("item", page[1], page[2], arg), self._item_page(p, arg), None
                if arg == "buy now":
                    return ("done",), "thank you for shopping with us.", task.reward(p, page[3])
                if arg == "< prev":
                    return ("results", page[1]), self._results_page(task, page[1]), None
        return page, INVALID_OBSERVATION, None

    def fixture(self, seed: int) -> dict:
        task = self.task(seed)
        return {
            "env_kind": self.kind,
            "seed": seed,
            "instruction_text": task.instruction,
            "catalog": {
                "target": {
                    "type": task.target.type,
                    "color": task.target.color,
                    "material": task.target.material,
                    "price_cap": task.price_cap,
                    "size": task.size,
                },
                "keywords": list(task.keywords),
                "results": {
                    kw: [{"title": p.title, "price": p.price} for p in task.results[kw]]
                    for kw in task.keywords
                },
            },
            "optimal_reward": self.optimal_reward(seed),
        }


# ---------------------------------------------------------------------------
# ChainQA

QA_ENTITIES = (
    "arden", "bexley", "corvin", "dalmar", "elwood", "fenwick", "garrick", "halden",
    "ivers", "jorvik", "kestrel", "lomond", "marlow", "norcott", "orwell", "pellam",
    "quinlan", "rowan", "selden", "thorne", "ulster", "varden", "wexford", "yarrow",
)
QA_RELATIONS = ("founder", "capital", "director", "author", "spouse", "mentor", "rival", "successor")
QA_GRAPH_SIZE = 8
QA_RELATIONS_PER_TASK = 3
QA_SEARCH_OPTIONS = 3


@dataclass(frozen=True)
class QATask:
    seed: int
    entities: tuple[str, ...]
    relations: tuple[str, ...]
    graph: Mapping[str, Mapping[str, str]]
    start: str
    hops: tuple[str, str]
    answer: str
    search_options: tuple[str, ...]
    instruction: str


@lru_cache(maxsize=4096)
def make_qa_task(seed: int) -> QATask:
    rng = SplitMix64(seed)
    entities = rng.sample(QA_ENTITIES, QA_GRAPH_SIZE)
    relations = rng.sample(QA_RELATIONS, QA_RELATIONS_PER_TASK)
    graph = {
        e: {r: rng.choice([x for x in entities if x != e]) for r in relations} for e in entities
    }
    start = entities[0]
    r1, r2 = rng.choice(relations), rng.choice(relations)
    mid = graph[start][r1]
    if graph[mid][r2] == start:
        graph[mid][r2] = rng.choice([x for x in entities if x not in (start, mid)])
    answer = graph[mid][r2]
    # no one-hop shortcut from the start entity
    for r in relations:
        if r != r1 and graph[start][r] == answer:
            graph[start][r] = rng.choice([x for x in entities if x not in (start, answer)])
    pool = [x for x in entities if x not in (start, mid, answer) and answer not in graph[x].values()]
    if len(pool) < QA_SEARCH_OPTIONS - 1:
        pool = [x for x in entities if x not in (start, mid, answer)]
    distractors = rng.sample(pool, QA_SEARCH_OPTIONS - 1)
    options = [start] + distractors
    rng.shuffle(options)
    return QATask(
        seed,
        tuple(entities),
        tuple(relations),
        graph,
        start,
        (r1, r2),
        answer,
        tuple(options),
        f"what is the {r2} of the {r1} of {start}?",
    )


class ChainQA(TextEnv):
    kind = CHAIN_QA
    default_max_steps = 7

    def task(self, seed: int) -> QATask:
        return make_qa_task(seed)

    def _initial(self, task: QATask):
        return ("start",), "question answering. use search[entity], lookup[relation] and answer[entity]."

    def _actions(self, task: QATask, page: tuple) -> list[str]:
        actions = [f"search[{e}]" for e in task.search_options]
        if page[0] == "page":
            actions += [f"lookup[{r}]" for r in task.relations]
            actions.append(f"answer[{page[1]}]")
        return actions

    def _transition(self, task: QATask, page: tuple, action: str):
        verb, arg = parse_action(action)
        if verb == "answer":
            return ("done",), f"you answered {arg}.", 1.0 if arg == task.answer else 0.0
        if verb == "search" and arg in task.graph:
            facts = ", ".join(task.relations)
            return ("page", arg), f"{arg}: entries on {arg} cover {facts}.", None
        if verb == "lookup" and page[0] == "page" and arg in task.relations:
            target = task.graph[page[1]][arg]
            return ("page", target), f"the {arg} of {page[1]} is {target}.", None
        return page, INVALID_OBSERVATION, None

    def fixture(self, seed: int) -> dict:
        task = self.task(seed)
        return {
            "env_kind": self.kind,
            "seed": seed,
            "instruction_text": task.instruction,
            "graph": {
                "entities": list(task.entities),
                "relations": list(task.relations),
                "edges": {e: dict(task.graph[e]) for e in task.entities},
                "start": task.start,
                "answer": task.answer,
            },
            "optimal_reward": self.optimal_reward(seed),
        }


_ENV_CLASSES = {TREASURE_SHOP: TreasureShop, CHAIN_QA: ChainQA}
_DEFAULT_ENVS: dict[str, TextEnv] = {}


def make_env(env_kind: str, max_steps: Optional[int] = None) -> TextEnv:
    try:
        cls = _ENV_CLASSES[env_kind]
    except KeyError:
        raise ValueError(f"unknown env kind {env_kind!r}; expected one of {ENV_KINDS}") from None
    if max_steps is not None:
        return cls(max_steps)
    if env_kind not in _DEFAULT_ENVS:
        _DEFAULT_ENVS[env_kind] = cls()
    return _DEFAULT_ENVS[env_kind]


def reset(env_kind: str, seed: int) -> tuple[EnvState, Instruction, str]:
    return make_env(env_kind).reset(seed)


def step(state: EnvState, action: str) -> Transition:
    return make_env(state.env_kind).step(state, action)


def valid_actions(state: EnvState) -> list[str]:
    return make_env(state.env_kind).valid_actions(state)


# ---------------------------------------------------------------------------
# Exact oracles


class StatePolicy(Protocol):
    """A Markov policy: action probabilities as a function of the env state."""

    def state_probs(self, env: TextEnv, state: EnvState) -> Mapping[str, float]: ...


MAX_ORACLE_STATES = 50_000


def reachable_states(env: TextEnv, seed: int, cap: int = MAX_ORACLE_STATES) -> list[EnvState]:
    """All non-terminal states reachable from the initial state, in BFS order."""
    start, _, _ = env.reset(seed)
    seen = {start}
    order = [start]
    i = 0
    while i < len(order):
        s = order[i]
        i += 1
        for a in env.valid_actions(s):
            nxt = env.step(s, a).state
            if not nxt.terminal and nxt not in seen:
                if len(seen) >= cap:
                    raise StateSpaceTooLarge(f"more than {cap} reachable states for seed {seed}")
                seen.add(nxt)
                order.append(nxt)
    return order


def exact_q_oracle(
    env: TextEnv,
    seed: int,
    policy: Union[str, StatePolicy] = "optimal",
    cap: int = MAX_ORACLE_STATES,
    truncation_reward: float = 0.0,
) -> dict[tuple[EnvState, str], float]:
    """Exact Q(s, a) for every reachable non-terminal state by backward induction.

    ``policy`` is ``"optimal"`` for Q*, ``"uniform"`` for the uniform random
    policy over valid actions, or any object with ``state_probs``.  Step-cap
    truncation scores ``truncation_reward`` (the environment's own outcome 0
    by default; search uses a negative penalty instead).
    """
    states = reachable_states(env, seed, cap)
    # step_count strictly increases along transitions, so this order is topological
    states.sort(key=lambda s: -s.step_count)
    value: dict[EnvState, float] = {}
    q: dict[tuple[EnvState, str], float] = {}
    for s in states:
        actions = env.valid_actions(s)
        for a in actions:
            nxt, _, terminal, outcome = env.step(s, a)
            if terminal:
                q[(s, a)] = truncation_reward if nxt.truncated else outcome
            else:
                q[(s, a)] = value[nxt]
        if policy == "optimal":
            value[s] = max(q[(s, a)] for a in actions)
        else:
            probs = _policy_probs(policy, env, s, actions)
            value[s] = sum(probs[a] * q[(s, a)] for a in actions)
    return q


def _policy_probs(policy, env, state, actions) -> Mapping[str, float]:
    if policy == "uniform":
        return {a: 1.0 / len(actions) for a in actions}
    if isinstance(policy, str):
        raise ValueError(f"unknown oracle policy {policy!r}")
    return policy.state_probs(env, state)


def state_values(
    env: TextEnv, seed: int, q: Mapping[tuple[EnvState, str], float], policy="optimal"
) -> dict[EnvState, float]:
    """Recover V(s) from a Q table under ``policy``."""
    by_state: dict[EnvState, list[str]] = {}
    for s, a in q:
        by_state.setdefault(s, []).append(a)
    out = {}
    for s, actions in by_state.items():
        if policy == "optimal":
            out[s] = max(q[(s, a)] for a in actions)
        else:
            probs = _policy_probs(policy, env, s, actions)
            out[s] = sum(probs[a] * q[(s, a)] for a in actions)
    return out


def _solve_optimal(env: TextEnv, seed: int) -> dict:
    """Q* with ties broken by fewest remaining steps, then canonical action order."""
    states = reachable_states(env, seed)
    states.sort(key=lambda s: -s.step_count)
    value: dict[EnvState, float] = {}
    dist: dict[EnvState, int] = {}
    best: dict[EnvState, str] = {}
    for s in states:
        top: Optional[tuple[float, int, str]] = None
        for a in env.valid_actions(s):
            nxt, _, terminal, outcome = env.step(s, a)
            v, d = (outcome, 1) if terminal else (value[nxt], 1 + dist[nxt])
            if top is None or v > top[0] + 1e-12 or (abs(v - top[0]) <= 1e-12 and d < top[1]):
                top = (v, d, a)
        assert top is not None
        value[s], dist[s], best[s] = top
    return {"value": value, "dist": dist, "action": best}
