from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qsteer.env import EnvState, Instruction, TextEnv
from qsteer.mcts import SearchTree

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# -- hand-built trees ---------------------------------------------------------

DUMMY_INSTRUCTION = Instruction("chainqa-0", 0, "toy")


def dummy_state(i: int = 0, terminal: bool = False) -> EnvState:
    return EnvState("chainqa", 0, i, ("n", i), terminal)


def tree_with_root() -> SearchTree:
    tree = SearchTree(DUMMY_INSTRUCTION, [], max_depth=10)
    tree.add(parent=None, action=None, observation="root", depth=0, state=dummy_state())
    return tree


def add_child(tree: SearchTree, parent: int, action: str, V: float = 0.0, N: int = 0,
              terminal: bool = False, reward=None):
    node = tree.add(
        parent=parent, action=action, observation=f"obs {action}", depth=tree[parent].depth + 1,
        state=dummy_state(len(tree), terminal), terminal=terminal, reward=reward,
    )
    node.V, node.N = V, N
    return node


# -- toy environments -----------------------------------------------------------


class ToyEnv(TextEnv):
    """A configurable tree-shaped environment.

    ``spec`` maps a page name to {action: next page name or terminal reward}.
    The initial page is ``"root"``.
    """

    kind = "chainqa"  # reuse a registered kind so task ids parse

    def __init__(self, spec: dict, max_steps: int = 10):
        super().__init__(max_steps)
        self.spec = spec

    def task(self, seed):
        class _T:
            instruction = "toy task"

        return _T()

    def _initial(self, task):
        return ("root",), "at root"

    def _actions(self, task, page):
        return list(self.spec[page[0]])

    def _transition(self, task, page, action):
        edges = self.spec[page[0]]
        if action not in edges:
            return page, "invalid action.", None
        nxt = edges[action]
        if isinstance(nxt, str):
            return (nxt,), f"at {nxt}", None
        return ("done",), "finished", float(nxt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
