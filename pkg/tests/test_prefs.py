import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from qsteer.env import CHAIN_QA, TREASURE_SHOP, make_env
from qsteer.mcts import SearchConfig, run_search
from qsteer.policy import ScriptedAgent
from qsteer.prefs import (
    DatasetError,
    NoTerminalError,
    PreferencePair,
    TrajectoryPair,
    best_terminal,
    extract_pairs,
    extract_trajectory_pairs,
    fingerprint,
    read_dataset,
    read_trajectory_dataset,
    write_dataset,
)

from conftest import add_child, tree_with_root


def visited(tree, parent, action, q, terminal=False):
    return add_child(tree, parent, action, V=q, N=1, terminal=terminal, reward=q if terminal else None)


# -- best terminal ------------------------------------------------------------


def test_best_terminal_max_and_tie():
    tree = tree_with_root()
    for i, r in enumerate((0.2, 1.0, 0.6, 1.0)):
        visited(tree, 0, f"a{i}", r, terminal=True)
    assert best_terminal(tree) == 2  # first of the two 1.0 terminals
    with pytest.raises(NoTerminalError):
        best_terminal(tree_with_root())


# -- step pairs -----------------------------------------------------------------------


def test_lowest_visited_sibling_is_loser():
    tree = tree_with_root()
    win = visited(tree, 0, "win", 0.9)
    visited(tree, 0, "x", 0.1)
    visited(tree, 0, "y", 0.4)
    add_child(tree, 0, "never")  # unvisited, ignored
    visited(tree, win.id, "done", 0.9, terminal=True)
    pairs = extract_pairs(tree)
    assert [(p.depth, p.win_action, p.lose_action, p.q_lose) for p in pairs] == [(0, "win", "x", 0.1)]


def test_equal_sibling_is_skipped():
    tree = tree_with_root()
    win = visited(tree, 0, "win", 0.5)
    visited(tree, 0, "same", 0.5)
    visited(tree, win.id, "end", 0.5, terminal=True)
    assert extract_pairs(tree) == []


def test_one_pair_per_depth():
    tree = tree_with_root()
    parent = 0
    for d in range(3):
        nxt = visited(tree, parent, f"w{d}", 1.0, terminal=d == 2)
        visited(tree, parent, f"l{d}", 0.0, terminal=True)
        parent = nxt.id
    pairs = extract_pairs(tree)
    assert [p.depth for p in pairs] == [0, 1, 2]
    assert [p.win_action for p in pairs] == ["w0", "w1", "w2"]
    assert pairs[1].prefix == (("w0", "obs w0"),)


# -- trajectory pairs ---------------------------------------------------------------


def test_trajectory_pairs_sorted_by_reward():
    tree = tree_with_root()
    for a, r in (("a", 1.0), ("b", 0.3), ("c", 0.0)):
        visited(tree, 0, a, r, terminal=True)
    pairs = extract_trajectory_pairs(tree, k=2)
    assert [(p.win_reward, p.lose_reward) for p in pairs] == [(1.0, 0.0), (1.0, 0.3)]
    assert pairs[0].win_actions == ["a"] and pairs[0].lose_actions == ["c"]


def test_trajectory_pairs_need_distinct_rewards():
    tree = tree_with_root()
    visited(tree, 0, "a", 0.5, terminal=True)
    assert extract_trajectory_pairs(tree) == []
    visited(tree, 0, "b", 0.5, terminal=True)
    assert extract_trajectory_pairs(tree, k=3) == []


# -- JSONL --------------------------------------------------------------------------


pair_strategy = st.builds(
    PreferencePair,
    st.text(min_size=1),
    st.integers(0, 20),
    st.lists(st.tuples(st.text(), st.text()), max_size=4).map(tuple),
    st.text(),
    st.text(),
    st.floats(-1, 1),
    st.floats(-1, 1),
)


@given(st.lists(pair_strategy, max_size=20))
def test_step_dataset_roundtrip(tmp_path_factory, pairs):
    path = tmp_path_factory.mktemp("ds") / "pairs.jsonl"
    write_dataset(pairs, path)
    back = read_dataset(path)
    assert back == pairs
    first = path.read_bytes()
    write_dataset(back, path)
    assert path.read_bytes() == first


def test_large_roundtrip_is_byte_equal(tmp_path):
    pairs = [
        PreferencePair(f"chainqa-{i}", i % 5, (("search[x]", "obs ü"),), "a", "b", 1 / (i + 3), -1 / (i + 7))
        for i in range(1000)
    ]
    path = tmp_path / "pairs.jsonl"
    write_dataset(pairs, path)
    data = path.read_bytes()
    write_dataset(read_dataset(path), path)
    assert path.read_bytes() == data
    assert fingerprint(read_dataset(path)) == fingerprint(pairs)


def test_trajectory_dataset_roundtrip(tmp_path):
    pairs = [TrajectoryPair("treasureshop-1", (("a", "b"),), (("c", "d"), ("e", "f")), 1.0, 0.2)]
    path = tmp_path / "traj.jsonl"
    write_dataset(pairs, path)
    assert read_trajectory_dataset(path) == pairs


def test_empty_and_malformed_files(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    assert read_dataset(empty) == []
    bad = tmp_path / "bad.jsonl"
    good = PreferencePair("chainqa-1", 0, (), "a", "b", 1.0, 0.0)
    write_dataset([good, good], bad)
    lines = bad.read_text().splitlines()
    bad.write_text(lines[0] + "\n" + lines[1][:20] + "\n")
    with pytest.raises(DatasetError, match="line 2"):
        read_dataset(bad)
    bad.write_text(json.dumps({"task_id": "x"}) + "\n")
    with pytest.raises(DatasetError, match="line 1"):
        read_dataset(bad)


# -- invariants on real searches ---------------------------------------------------------


@given(st.sampled_from([TREASURE_SHOP, CHAIN_QA]), st.integers(0, 5000), st.floats(0.0, 1.0), st.integers(5, 40))
def test_pairs_from_searches_satisfy_invariants(kind, seed, eps, m):
    env = make_env(kind)
    tree = run_search(env.instruction(seed), env, ScriptedAgent(env, eps), SearchConfig(m=m, seed=seed))
    try:
        best = best_terminal(tree)
    except NoTerminalError:
        return
    path = tree.path_to(best)
    pairs = extract_pairs(tree)
    assert len(pairs) <= len(path) - 1
    for p in pairs:
        assert p.q_win > p.q_lose
        assert p.prefix == tree.prefix(path[p.depth])
        assert p.win_action == tree[path[p.depth + 1]].action


def test_dataset_deterministic(tmp_path):
    env = make_env(CHAIN_QA)
    agent = ScriptedAgent(env, 0.5)

    def collect(path):
        pairs = []
        for seed in range(15):
            pairs += extract_pairs(run_search(env.instruction(seed), env, agent, SearchConfig(seed=1)))
        write_dataset(pairs, path)
        return path.read_bytes()

    assert collect(tmp_path / "a.jsonl") == collect(tmp_path / "b.jsonl")
