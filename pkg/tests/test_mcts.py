import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsteer.env import CHAIN_QA, TREASURE_SHOP, exact_q_oracle, make_env
from qsteer.mcts import (
    SearchConfig,
    SearchError,
    backpropagate,
    check_tree,
    evaluate,
    expand,
    q_estimate,
    run_search,
    select,
    uct_score,
)
from qsteer.policy import ScriptedAgent, dedup

from conftest import ToyEnv, add_child, tree_with_root


class Uniform:
    """Uniform proposer over the candidate set."""

    def propose(self, context, n, temperature, rng):
        return dedup([context.candidates[int(i)] for i in rng.integers(len(context.candidates), size=n)])

    def greedy(self, context, rng):
        return self.propose(context, 1, 1.0, rng)[0]


class Fixed:
    """Always proposes the same list."""

    def __init__(self, actions):
        self.actions = actions

    def propose(self, context, n, temperature, rng):
        return dedup(self.actions)[:n]


# -- uct ------------------------------------------------------------------------


def test_uct_examples():
    tree = tree_with_root()
    node = add_child(tree, 0, "a", V=0.5, N=2)
    assert uct_score(node, 8, 2.0) == pytest.approx(1.9420, abs=1e-4)
    assert uct_score(add_child(tree, 0, "b"), 8, 2.0) == math.inf
    for n in (1, 3, 10):
        node.N = n
        assert uct_score(node, 8, 0.0) == 0.5


# -- select ---------------------------------------------------------------------


def test_select_prefers_unvisited():
    tree = tree_with_root()
    tree[0].N = 10
    add_child(tree, 0, "a", V=1.2, N=5)
    add_child(tree, 0, "b")
    add_child(tree, 0, "c", V=0.9, N=5)
    assert select(tree, 0.0) == [0, 2]


def test_select_ties_pick_first_expanded():
    tree = tree_with_root()
    tree[0].N = 6
    for a in "abc":
        add_child(tree, 0, a, V=0.3, N=2)
    assert select(tree, 2.0) == [0, 1]


def test_select_follows_single_chain():
    tree = tree_with_root()
    parent = 0
    for a in "abcd":
        parent = add_child(tree, parent, a, V=0.1, N=1).id
    assert select(tree, 2.0) == [0, 1, 2, 3, 4]


def test_select_stops_at_terminal_and_depth_cap():
    tree = tree_with_root()
    tree[0].N = 2
    t = add_child(tree, 0, "a", V=1.0, N=1, terminal=True, reward=1.0)
    add_child(tree, t.id, "ghost")  # never descended into
    assert select(tree, 0.0) == [0, 1]
    tree2 = tree_with_root()
    tree2.max_depth = 1
    c = add_child(tree2, 0, "a", N=1)
    add_child(tree2, c.id, "b")
    assert select(tree2, 0.0) == [0, 1]


# -- expand ---------------------------------------------------------------------


def _toy_tree(env):
    from qsteer.mcts import SearchTree

    state, instr, obs = env.reset(0)
    tree = SearchTree(instr, [], max_depth=env.max_steps)
    tree.add(parent=None, action=None, observation=obs, depth=0, state=state)
    return tree


def test_expand_creates_fresh_children():
    env = ToyEnv({"root": {"a": "x", "b": "x", "c": 0.7}, "x": {"d": 1.0}})
    tree = _toy_tree(env)
    rng = np.random.default_rng(0)
    new = expand(tree, 0, Fixed(["a", "b", "c"]), env, 5, 1.0, rng)
    assert [tree[i].action for i in new] == ["a", "b", "c"]
    assert all(tree[i].N == 0 and tree[i].V == 0.0 for i in new)
    term = tree[new[2]]
    assert term.terminal and term.reward == 0.7
    assert not tree[new[0]].terminal and tree[new[0]].reward is None


def test_expand_dedups_proposals():
    env = ToyEnv({"root": {"a": 1.0, "b": 0.0, "c": 0.5}})
    tree = _toy_tree(env)
    new = expand(tree, 0, Fixed(["b", "a", "b", "a", "b"]), env, 5, 1.0, np.random.default_rng(0))
    assert len(new) == 2


def test_expand_errors():
    env = ToyEnv({"root": {"a": 1.0, "b": "root"}})
    tree = _toy_tree(env)
    rng = np.random.default_rng(0)
    new = expand(tree, 0, Fixed(["a"]), env, 5, 1.0, rng)
    with pytest.raises(SearchError):
        expand(tree, 0, Fixed(["b"]), env, 5, 1.0, rng)
    with pytest.raises(SearchError):
        expand(tree, new[0], Fixed(["b"]), env, 5, 1.0, rng)


def test_expand_truncation_scores_penalty():
    env = ToyEnv({"root": {"loop": "root"}}, max_steps=1)
    tree = _toy_tree(env)
    new = expand(tree, 0, Fixed(["loop"]), env, 1, 1.0, np.random.default_rng(0), penalty_reward=-1.0)
    child = tree[new[0]]
    assert child.terminal and child.truncated and child.reward == -1.0


# -- evaluate -------------------------------------------------------------------


def test_evaluate_terminal_passthrough():
    tree = tree_with_root()
    t = add_child(tree, 0, "a", terminal=True, reward=0.7)
    assert evaluate(tree, t.id, Uniform(), None, 10, -1.0, np.random.default_rng(0)) == 0.7


def test_evaluate_rollout_reaches_answer():
    env = make_env(CHAIN_QA)
    agent = ScriptedAgent(env, 0.0)
    tree = run_search(env.instruction(3), env, agent, SearchConfig(m=1, n=1))
    r = evaluate(tree, 0, agent, env, env.max_steps, -1.0, np.random.default_rng(0))
    assert r == 1.0


def test_evaluate_depth_cap_gives_penalty():
    env = ToyEnv({"root": {"loop": "root"}}, max_steps=50)
    tree = _toy_tree(env)
    assert evaluate(tree, 0, Uniform(), env, 4, -1.0, np.random.default_rng(0)) == -1.0
    assert evaluate(tree, 0, Uniform(), env, 4, -0.5, np.random.default_rng(0)) == -0.5


def test_evaluate_does_not_grow_tree():
    env = make_env(TREASURE_SHOP)
    tree = run_search(env.instruction(1), env, Uniform(), SearchConfig(m=1, n=1))
    size = len(tree)
    evaluate(tree, 0, Uniform(), env, env.max_steps, -1.0, np.random.default_rng(0))
    assert len(tree) == size


# -- backpropagate ----------------------------------------------------------------


def test_backprop_running_mean_example():
    tree = tree_with_root()
    tree[0].N, tree[0].V = 1, 0.8
    backpropagate(tree, [0], 0.4)
    assert tree[0].N == 2 and tree[0].V == pytest.approx(0.6)
    c = add_child(tree, 0, "a")
    backpropagate(tree, [0, c.id], 0.25)
    assert c.N == 1 and c.V == 0.25


@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=50))
def test_backprop_equals_arithmetic_mean(rewards):
    tree = tree_with_root()
    c = add_child(tree, 0, "a")
    for r in rewards:
        backpropagate(tree, [0, c.id], r)
    assert c.N == len(rewards)
    assert c.V == pytest.approx(float(np.mean(rewards)), abs=1e-12)
    assert tree[0].V == pytest.approx(c.V, abs=1e-12)


# -- q estimate ---------------------------------------------------------------------


def test_q_estimate_examples():
    tree = tree_with_root()
    add_child(tree, 0, "a", V=0.7, N=1, terminal=True, reward=0.7)
    add_child(tree, 0, "b")
    c = add_child(tree, 0, "c")
    for r in (1, 1, 0):
        backpropagate(tree, [c.id], r)
    assert q_estimate(tree, 0, "a") == (0.7, True)
    assert q_estimate(tree, 0, "b") == (0.0, False)
    assert q_estimate(tree, 0, "c").value == pytest.approx(2 / 3)
    with pytest.raises(KeyError):
        q_estimate(tree, 0, "zzz")


# -- full search ---------------------------------------------------------------------


def test_immediate_success_stops_after_one_iteration():
    env = ToyEnv({"root": {"a": 1.0, "b": 1.0}})
    tree = run_search(env.instruction(0), env, Uniform(), SearchConfig(m=30, n=2))
    assert tree.early_stopped and tree.iterations_used == 1


def test_search_is_deterministic():
    env = make_env(CHAIN_QA)
    agent = ScriptedAgent(env, 0.3)
    cfg = SearchConfig(m=30, n=5, seed=4)
    a = run_search(env.instruction(12), env, agent, cfg)
    b = run_search(env.instruction(12), env, agent, cfg)
    assert a.to_json() == b.to_json()
    assert [(nd.V, nd.N) for nd in a.nodes] == [(nd.V, nd.N) for nd in b.nodes]


def test_two_level_values_match_uniform_oracle():
    env = ToyEnv({
        "root": {"a": "left", "b": "right"},
        "left": {"c": 1.0, "d": 0.0},
        "right": {"e": 0.5, "f": 0.2, "g": 0.8},
    })
    cfg = SearchConfig(m=3000, n=3, eta=1e4, early_stop=False, full_expansion=True)
    tree = run_search(env.instruction(0), env, Uniform(), cfg)
    q = exact_q_oracle(env, 0, policy="uniform")
    root = tree[0].state
    for action in ("a", "b"):
        assert tree.child_by_action(0, action).V == pytest.approx(q[(root, action)], abs=0.05)


def test_invalid_configs_rejected():
    for bad in (dict(m=0), dict(n=0), dict(eta=-1), dict(temperature=0), dict(penalty_reward=0.0), dict(max_depth=0)):
        with pytest.raises(ValueError):
            SearchConfig(**bad).validate()


@given(
    st.sampled_from([TREASURE_SHOP, CHAIN_QA]),
    st.integers(0, 10_000),
    st.integers(1, 40),
    st.integers(1, 6),
    st.floats(0.0, 5.0),
    st.floats(0.0, 1.0),
    st.booleans(),
)
def test_invariants_hold_every_iteration(kind, seed, m, n, eta, eps, early):
    env = make_env(kind)
    cfg = SearchConfig(m=m, n=n, eta=eta, seed=seed, early_stop=early)
    problems = []
    seen = []

    def hook(tree):
        problems.extend(check_tree(tree, cfg.penalty_reward))
        seen.append(tree.early_stopped)

    tree = run_search(env.instruction(seed), env, ScriptedAgent(env, eps), cfg, on_iteration=hook)
    assert problems == []
    assert check_tree(tree, cfg.penalty_reward) == []
    assert tree[0].N == tree.iterations_used <= m
    # nothing ran after early stop was triggered
    if tree.early_stopped:
        assert tree.has_success() and len(seen) == tree.iterations_used
    elif early:
        assert tree.iterations_used == m


def test_check_tree_flags_corruption():
    env = make_env(CHAIN_QA)
    tree = run_search(env.instruction(0), env, ScriptedAgent(env, 0.5), SearchConfig(m=10, early_stop=False))
    assert check_tree(tree, -1.0) == []
    tree[0].N += 1
    assert check_tree(tree, -1.0)
    tree[0].N -= 1
    tree[tree[0].children[0]].V = 3.0
    assert check_tree(tree, -1.0)
