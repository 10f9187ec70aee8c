"""Action proposal and log-probabilities over a state's finite candidate set.

``FeaturizedPolicy`` is a linear softmax over hashed n-gram features of
(instruction, latest observation, action).  It serves both as an agent policy
and as the trainable model behind the Q-value model.  ``ScriptedAgent`` is an
epsilon-noisy oracle agent used to collect search data.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from qsteer.env import EnvState, Instruction, TextEnv, canonicalize, parse_action

FEATURIZER_VERSION = "hashed-shape-v3"
DEFAULT_DIM = 1024

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_CLICKABLE_RE = re.compile(r"\[[^\]]*\]")


@dataclass(frozen=True)
class Context:
    """What a policy conditions on: instruction, history, and the candidate set.

    ``observation`` is the latest observation (the reset observation when the
    prefix is empty).  ``state`` is privileged and only read by scripted agents.
    """

    instruction: Instruction
    prefix: tuple[tuple[str, str], ...]
    candidates: tuple[str, ...]
    observation: str = ""
    state: Optional[EnvState] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("candidate set must be non-empty")

    def index(self, action: str) -> int:
        try:
            return self.candidates.index(canonicalize(action))
        except ValueError:
            raise KeyError(f"action {action!r} not in candidate set") from None


class Proposer(Protocol):
    def propose(self, context: Context, n: int, temperature: float, rng: np.random.Generator) -> list[str]: ...

    def greedy(self, context: Context, rng: np.random.Generator) -> str: ...


def dedup(actions: Sequence[str]) -> list[str]:
    seen: dict[str, None] = {}
    for a in actions:
        seen.setdefault(canonicalize(a), None)
    return list(seen)


def tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def _hash(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little")


def _bigrams(toks: Sequence[str]) -> set[tuple[str, str]]:
    return set(zip(toks, toks[1:]))


def _third(instr_toks: Sequence[str], targets: set, bigram: bool = False) -> str:
    """Which third of the instruction first matches ``targets`` ("x" if none)."""
    units = list(zip(instr_toks, instr_toks[1:])) if bigram else instr_toks
    for i, u in enumerate(units):
        if u in targets:
            return str(min(2, 3 * i // max(len(instr_toks), 1)))
    return "x"


class Featurizer:
    """Signed hashed features of ``(instruction, observation, action, history)``.

    Action words that also occur in the instruction are masked to ``<m>`` so
    the action's *shape* generalizes across tasks.  Bracketed spans in the
    observation are clickable labels and are dropped before measuring how
    well the page text matches the instruction.  Feature groups:

      * shape unigrams and bigrams (verb plus masked argument words)
      * argument/instruction overlap: matched count, matched fraction and
        unmatched count, keyed by verb
      * number of instruction word bigrams found in the page text (capped
        at 4), crossed with each shape token
      * alignment: which third of the instruction the action argument
        matches, crossed with which third the page text matches
      * how often the action was already taken in this episode (capped at 2)
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self._cache = lru_cache(maxsize=200_000)(self._sparse)

    @property
    def version(self) -> str:
        return FEATURIZER_VERSION

    def _named(self, instruction: str, observation: str, action: str,
               history: tuple[str, ...] = ()) -> dict[str, float]:
        verb, arg = parse_action(action)
        verb = verb or "none"
        arg_toks = tokens(arg)
        instr_toks = tokens(instruction)
        page_toks = tokens(_CLICKABLE_RE.sub(" ", observation))
        instr = set(instr_toks)
        args = set(arg_toks)
        shape = [verb] + ["<m>" if t in instr else t for t in arg_toks]
        feats: dict[str, float] = {}

        def add(key: str, v: float = 1.0):
            feats[key] = feats.get(key, 0.0) + v

        for t in shape:
            add("s:" + t)
        for t1, t2 in zip(shape, shape[1:]):
            add(f"sb:{t1} {t2}")
        matched = len(args & instr)
        add("ovi:" + verb, float(matched))
        add("miss:" + verb, float(len(args - instr)))
        if args:
            add("ovf:" + verb, matched / len(args))
        page_bigrams = _bigrams(page_toks)
        shared = min(4, len(_bigrams(instr_toks) & page_bigrams))
        for t in shape:
            add(f"iob:{shared}|{t}")
        add(f"al:{verb}|{_third(instr_toks, args)}|{_third(instr_toks, page_bigrams, bigram=True)}")
        add(f"rep:{verb}|{min(2, history.count(action))}")
        return feats

    def _sparse(self, instruction: str, observation: str, action: str,
                history: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray]:
        acc: dict[int, float] = {}
        for key, v in self._named(instruction, observation, action, history).items():
            if v == 0.0:
                continue
            h = _hash(key)
            idx = h % self.dim
            sign = 1.0 if (h >> 63) & 1 else -1.0
            acc[idx] = acc.get(idx, 0.0) + sign * v
        idx = np.array(sorted(acc), dtype=np.int64)
        return idx, np.array([acc[i] for i in idx], dtype=np.float64)

    def sparse(self, instruction: str, observation: str, action: str,
               history: Sequence[str] = ()) -> tuple[np.ndarray, np.ndarray]:
        return self._cache(instruction, observation, canonicalize(action), tuple(history))

    def vector(self, instruction: str, observation: str, action: str, history: Sequence[str] = ()) -> np.ndarray:
        out = np.zeros(self.dim)
        idx, val = self.sparse(instruction, observation, action, history)
        out[idx] = val
        return out

    def matrix(self, context: Context) -> np.ndarray:
        """Feature matrix with one row per candidate, in candidate order."""
        history = tuple(a for a, _ in context.prefix)
        out = np.zeros((len(context.candidates), self.dim))
        for row, a in enumerate(context.candidates):
            idx, val = self.sparse(context.instruction.text, context.observation, a, history)
            out[row, idx] = val
        return out


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - np.max(x)
    return z - np.log(np.sum(np.exp(z)))


@dataclass
class FeaturizedPolicy:
    weights: np.ndarray
    featurizer: Featurizer = field(default_factory=Featurizer)
    temperature: float = 1.0

    @classmethod
    def zeros(cls, dim: int = DEFAULT_DIM) -> "FeaturizedPolicy":
        return cls(np.zeros(dim), Featurizer(dim))

    @property
    def dim(self) -> int:
        return self.featurizer.dim

    def logits(self, context: Context) -> np.ndarray:
        return self.featurizer.matrix(context) @ self.weights

    def log_probs(self, context: Context, temperature: float = 1.0) -> np.ndarray:
        return log_softmax(self.logits(context) / temperature)

    def log_prob(self, context: Context, action: str) -> float:
        return float(self.log_probs(context)[context.index(action)])

    def propose(self, context: Context, n: int, temperature: float, rng: np.random.Generator) -> list[str]:
        if n < 1:
            raise ValueError("n must be >= 1")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        p = np.exp(self.log_probs(context, temperature))
        draws = rng.choice(len(p), size=n, p=p / p.sum())
        return dedup([context.candidates[i] for i in draws])

    def greedy(self, context: Context, rng: np.random.Generator) -> str:
        # ties resolve to the earliest candidate
        return context.candidates[int(np.argmax(self.logits(context)))]

    def to_json(self) -> dict:
        return {"dim": self.dim, "weights": [float(w) for w in self.weights], "featurizer_version": FEATURIZER_VERSION}

    @classmethod
    def from_json(cls, data: Mapping) -> "FeaturizedPolicy":
        if data.get("featurizer_version") != FEATURIZER_VERSION:
            raise ValueError(f"featurizer version mismatch: {data.get('featurizer_version')!r}")
        w = np.asarray(data["weights"], dtype=np.float64)
        if w.shape != (data["dim"],):
            raise ValueError("weights length does not match dim")
        return cls(w, Featurizer(int(data["dim"])))

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: Path) -> "FeaturizedPolicy":
        return cls.from_json(json.loads(Path(path).read_text()))


def log_prob(policy: FeaturizedPolicy, context: Context, action: str) -> float:
    return policy.log_prob(context, action)


def propose(policy: Proposer, context: Context, n: int, temperature: float, rng: np.random.Generator) -> list[str]:
    return policy.propose(context, n, temperature, rng)


@dataclass
class ScriptedAgent:
    """Takes the oracle-optimal action, except with probability ``epsilon`` a
    uniformly random valid action.

    Every draw is independent, including the single draw used for greedy
    decoding: ``epsilon`` models the agent's intrinsic error rate.
    """

    env: TextEnv
    epsilon: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")

    def _oracle(self, context: Context) -> str:
        if context.state is None:
            raise ValueError("scripted agents need the environment state in the context")
        return self.env.optimal_action(context.state)

    def propose(self, context: Context, n: int, temperature: float, rng: np.random.Generator) -> list[str]:
        oracle = self._oracle(context)
        draws = []
        for _ in range(n):
            if rng.random() < self.epsilon:
                draws.append(context.candidates[int(rng.integers(len(context.candidates)))])
            else:
                draws.append(oracle)
        return dedup(draws)

    def greedy(self, context: Context, rng: np.random.Generator) -> str:
        return self.propose(context, 1, 1.0, rng)[0]

    def state_probs(self, env: TextEnv, state: EnvState) -> dict[str, float]:
        actions = env.valid_actions(state)
        probs = {a: self.epsilon / len(actions) for a in actions}
        probs[env.optimal_action(state)] += 1.0 - self.epsilon
        return probs


def scripted_propose(agent: ScriptedAgent, context: Context, n: int, rng: np.random.Generator) -> list[str]:
    return agent.propose(context, n, 1.0, rng)
