"""Step- and trajectory-level DPO training of a Q-value model.

The Q-value model is a trained featurized policy ``pi_theta`` plus a frozen
reference ``pi_ref``; the value of an action is the scaled log-ratio
``beta * (log pi_theta(a|ctx) - log pi_ref(a|ctx))``.

Optimizer (``optimizer="adam"``): bias-corrected first/second moments with
b1=0.9, b2=0.999, eps=1e-8, no weight decay.  The learning rate ramps
linearly over the first ``ceil(warmup_ratio * total_steps)`` updates, then
stays constant.  Minibatch gradients are the mean over pairs, summed in
dataset order, so training is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from qsteer.env import TextEnv, make_env, parse_task_id
from qsteer.policy import FEATURIZER_VERSION, Context, Featurizer, FeaturizedPolicy, log_softmax
from qsteer.prefs import PreferencePair, TrajectoryPair

log = logging.getLogger(__name__)

EnvLookup = Callable[[str], TextEnv]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    warmup_ratio: float = 0.1
    epochs: int = 1
    seed: int = 0
    optimizer: str = "adam"
    beta: float = 0.1
    level: str = "step"

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("learning_rate >= 0, batch_size >= 1 and epochs >= 0 required")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.level not in ("step", "trajectory"):
            raise ValueError(f"unknown level {self.level!r}")
        return self


class QValueModel:
    def __init__(self, ref: np.ndarray, beta: float = 0.1, theta: Optional[np.ndarray] = None,
                 featurizer: Optional[Featurizer] = None):
        self.ref = np.array(ref, dtype=np.float64)
        self.ref.flags.writeable = False
        self.theta = self.ref.copy() if theta is None else np.array(theta, dtype=np.float64)
        self.beta = float(beta)
        self.featurizer = featurizer or Featurizer(len(self.ref))
        if self.featurizer.dim != len(self.ref) or self.theta.shape != self.ref.shape:
            raise ValueError("theta, ref and featurizer dimensions must agree")

    @classmethod
    def initial(cls, dim: int = 1024, beta: float = 0.1) -> "QValueModel":
        """Uniform reference policy, theta = ref."""
        return cls(np.zeros(dim), beta)

    def policy(self) -> FeaturizedPolicy:
        return FeaturizedPolicy(self.theta, self.featurizer)

    def reference(self) -> FeaturizedPolicy:
        return FeaturizedPolicy(self.ref, self.featurizer)

    def q_values(self, context: Context) -> np.ndarray:
        phi = self.featurizer.matrix(context)
        return self.beta * (log_softmax(phi @ self.theta) - log_softmax(phi @ self.ref))

    def ref_hash(self) -> str:
        return hashlib.sha256(self.ref.tobytes()).hexdigest()

    def to_json(self, train_config: Optional[TrainConfig] = None, dataset_fingerprint: str = "") -> dict:
        return {
            "beta": self.beta,
            "theta": [float(x) for x in self.theta],
            "ref": [float(x) for x in self.ref],
            "featurizer_version": FEATURIZER_VERSION,
            "train_config": asdict(train_config) if train_config else None,
            "dataset_fingerprint": dataset_fingerprint,
        }

    @classmethod
    def from_json(cls, data: dict) -> "QValueModel":
        if data.get("featurizer_version") != FEATURIZER_VERSION:
            raise ValueError(
                f"checkpoint featurizer {data.get('featurizer_version')!r} != {FEATURIZER_VERSION!r}"
            )
        return cls(np.asarray(data["ref"], dtype=np.float64), data["beta"], np.asarray(data["theta"], dtype=np.float64))

    def save(self, path: Union[str, Path], train_config: Optional[TrainConfig] = None, dataset_fingerprint: str = "") -> None:
        Path(path).write_text(json.dumps(self.to_json(train_config, dataset_fingerprint)) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "QValueModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def q_value(model: QValueModel, context: Context, action: str) -> float:
    return float(model.q_values(context)[context.index(action)])


# -- prepared examples ----------------------------------------------------------


@dataclass
class StepExample:
    """Candidate feature matrix at the pair's state plus win/lose row indices."""

    features: np.ndarray
    win: int
    lose: int
    pair: Optional[PreferencePair] = field(default=None, repr=False)


@dataclass
class TrajectoryExample:
    win: list[tuple[np.ndarray, int]]
    lose: list[tuple[np.ndarray, int]]
    pair: Optional[TrajectoryPair] = field(default=None, repr=False)


def _env_for(task_id: str, envs: Optional[EnvLookup]) -> tuple[TextEnv, int]:
    kind, seed = parse_task_id(task_id)
    return (envs(kind) if envs else make_env(kind)), seed


def replay_contexts(env: TextEnv, seed: int, actions: Sequence[str]) -> list[Context]:
    """Contexts before each action when replaying ``actions`` from reset.

    One extra context (after the last action) is appended if the final state
    is non-terminal.
    """
    state, instruction, obs = env.reset(seed)
    prefix: list[tuple[str, str]] = []
    out = [Context(instruction, (), tuple(env.valid_actions(state)), obs, state)]
    for a in actions:
        if state.terminal:
            raise ValueError("trajectory continues past a terminal state")
        state, obs, terminal, _ = env.step(state, a)
        prefix.append((a, obs))
        if not terminal:
            out.append(Context(instruction, tuple(prefix), tuple(env.valid_actions(state)), obs, state))
    return out


def prepare_step_examples(
    pairs: Sequence[PreferencePair], featurizer: Featurizer, envs: Optional[EnvLookup] = None
) -> tuple[list[StepExample], int]:
    """Replay each pair's prefix to rebuild its candidate set; returns (examples, skipped)."""
    out, skipped = [], 0
    for p in pairs:
        try:
            env, seed = _env_for(p.task_id, envs)
            ctx = replay_contexts(env, seed, [a for a, _ in p.prefix])[len(p.prefix)]
            out.append(StepExample(featurizer.matrix(ctx), ctx.index(p.win_action), ctx.index(p.lose_action), p))
        except (KeyError, ValueError, IndexError) as e:
            skipped += 1
            log.warning("skipping pair %s@%d: %s", p.task_id, p.depth, e)
    return out, skipped


def prepare_trajectory_examples(
    pairs: Sequence[TrajectoryPair], featurizer: Featurizer, envs: Optional[EnvLookup] = None
) -> tuple[list[TrajectoryExample], int]:
    out, skipped = [], 0
    for p in pairs:
        try:
            env, seed = _env_for(p.task_id, envs)
            sides = []
            for actions in (p.win_actions, p.lose_actions):
                ctxs = replay_contexts(env, seed, actions)
                sides.append([(featurizer.matrix(c), c.index(a)) for c, a in zip(ctxs, actions)])
            out.append(TrajectoryExample(sides[0], sides[1], p))
        except (KeyError, ValueError, IndexError) as e:
            skipped += 1
            log.warning("skipping trajectory pair %s: %s", p.task_id, e)
    return out, skipped


# -- losses and gradients -------------------------------------------------------


def _log_ratio(phi: np.ndarray, idx: int, theta: np.ndarray, ref: np.ndarray) -> float:
    return float(log_softmax(phi @ theta)[idx] - log_softmax(phi @ ref)[idx])


def _grad_log_prob(phi: np.ndarray, idx: int, theta: np.ndarray) -> np.ndarray:
    """phi(a) - E_{b ~ pi_theta}[phi(b)]."""
    p = np.exp(log_softmax(phi @ theta))
    return phi[idx] - p @ phi


def _margin(model: QValueModel, ex: Union[StepExample, TrajectoryExample], theta=None) -> float:
    theta = model.theta if theta is None else theta
    if isinstance(ex, StepExample):
        diff = _log_ratio(ex.features, ex.win, theta, model.ref) - _log_ratio(ex.features, ex.lose, theta, model.ref)
    else:
        diff = sum(_log_ratio(f, i, theta, model.ref) for f, i in ex.win) - sum(
            _log_ratio(f, i, theta, model.ref) for f, i in ex.lose
        )
    return model.beta * diff


def _neg_log_sigmoid(z: float) -> float:
    return float(np.logaddexp(0.0, -z))


def _sigmoid(z: float) -> float:
    return 0.5 * (1.0 + math.tanh(0.5 * z))


def step_dpo_loss(model: QValueModel, ex: StepExample, theta: Optional[np.ndarray] = None) -> float:
    return _neg_log_sigmoid(_margin(model, ex, theta))


def trajectory_dpo_loss(model: QValueModel, ex: TrajectoryExample, theta: Optional[np.ndarray] = None) -> float:
    return _neg_log_sigmoid(_margin(model, ex, theta))


def dpo_loss(model: QValueModel, ex, theta=None) -> float:
    return _neg_log_sigmoid(_margin(model, ex, theta))


def _example_grad(model: QValueModel, ex, theta: np.ndarray) -> tuple[np.ndarray, float]:
    z = _margin(model, ex, theta)
    if isinstance(ex, StepExample):
        g = _grad_log_prob(ex.features, ex.win, theta) - _grad_log_prob(ex.features, ex.lose, theta)
    else:
        g = np.zeros_like(theta)
        for f, i in ex.win:
            g += _grad_log_prob(f, i, theta)
        for f, i in ex.lose:
            g -= _grad_log_prob(f, i, theta)
    return -_sigmoid(-z) * model.beta * g, _neg_log_sigmoid(z)


def step_dpo_grad(model: QValueModel, batch: Sequence, theta: Optional[np.ndarray] = None) -> np.ndarray:
    """Mean gradient of the DPO loss over ``batch`` with respect to theta."""
    if not batch:
        raise ValueError("empty batch")
    theta = model.theta if theta is None else theta
    total = np.zeros_like(theta)
    for ex in batch:
        total += _example_grad(model, ex, theta)[0]
    return total / len(batch)


def preference_accuracy(model: QValueModel, examples: Sequence) -> float:
    """Fraction of pairs where the win action's Q strictly exceeds the lose action's."""
    if not examples:
        raise ValueError("empty dataset")
    return sum(_margin(model, ex) > 0.0 for ex in examples) / len(examples)


def mean_loss(model: QValueModel, examples: Sequence) -> float:
    return float(np.mean([dpo_loss(model, ex) for ex in examples]))


# -- training --------------------------------------------------------------------


@dataclass
class TrainResult:
    model: QValueModel
    history: list[dict]
    skipped: int = 0


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    warmup = math.ceil(config.warmup_ratio * total_steps)
    if warmup and step < warmup:
        return config.learning_rate * (step + 1) / warmup
    return config.learning_rate


def train(
    examples: Sequence,
    config: TrainConfig,
    model: Optional[QValueModel] = None,
    validation: Optional[Sequence] = None,
) -> TrainResult:
    """Minibatch DPO on prepared step or trajectory examples."""
    config.validate()
    if not examples:
        raise ValueError("dataset is empty")
    if model is None:
        dim = (examples[0].features if isinstance(examples[0], StepExample) else examples[0].win[0][0]).shape[1]
        model = QValueModel.initial(dim, config.beta)
    rng = np.random.default_rng(config.seed)
    batches_per_epoch = math.ceil(len(examples) / config.batch_size)
    total = batches_per_epoch * config.epochs
    m = np.zeros_like(model.theta)
    v = np.zeros_like(model.theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for b in range(batches_per_epoch):
            batch = [examples[i] for i in order[b * config.batch_size:(b + 1) * config.batch_size]]
            grad = np.zeros_like(model.theta)
            for ex in batch:
                g, loss = _example_grad(model, ex, model.theta)
                grad += g
                losses.append(loss)
            grad /= len(batch)
            if not np.all(np.isfinite(grad)) or not np.isfinite(losses[-1]):
                raise TrainingError(
                    f"non-finite loss/gradient at epoch {epoch} step {step}: last loss {losses[-1]}, "
                    f"|theta|={np.linalg.norm(model.theta):.3g}"
                )
            lr = lr_at(step, total, config)
            step += 1
            if config.optimizer == "sgd":
                model.theta -= lr * grad
            else:
                m = b1 * m + (1 - b1) * grad
                v = b2 * v + (1 - b2) * grad * grad
                m_hat = m / (1 - b1 ** step)
                v_hat = v / (1 - b2 ** step)
                model.theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "train_accuracy": preference_accuracy(model, examples)}
        if validation:
            row["validation_accuracy"] = preference_accuracy(model, validation)
        history.append(row)
    return TrainResult(model, history)


def behavior_clone(
    examples: Sequence[StepExample], dim: int, learning_rate: float = 0.1, epochs: int = 5, seed: int = 0
) -> np.ndarray:
    """Maximum-likelihood weights for the win actions (optional warm start)."""
    theta = np.zeros(dim)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        for i in rng.permutation(len(examples)):
            ex = examples[i]
            theta += learning_rate * _grad_log_prob(ex.features, ex.win, theta)
    return theta
