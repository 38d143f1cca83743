"""Offline dueling double-DQN training from a fixed transition set."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from morphine_rl import qnet, replay
from morphine_rl.mdp import Normalizer, TransitionSet


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, step: int, last_good: qnet.QParams, checkpoint: Path | None = None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    gamma: float = 0.99
    batch_size: int = 32
    target_sync_interval: int = 1000
    total_steps: int = 100_000
    lr: float = 1e-4
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    per_eps: float = 1e-3
    prioritized: bool = True
    importance_weights: bool = True
    huber_delta: float | None = 1.0
    hidden: int = 64
    stream_hidden: int = 32
    eval_interval: int = 5000
    seed: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.target_sync_interval < 1 or self.eval_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")

    def beta(self, step: int) -> float:
        if not self.importance_weights:
            return 0.0
        frac = min(1.0, step / self.total_steps) if self.total_steps else 1.0
        return self.per_beta_start + (self.per_beta_end - self.per_beta_start) * frac

    @classmethod
    def from_mapping(cls, cfg: dict) -> "TrainConfig":
        """Pick the known keys out of a flat string config."""
        kw = {}
        for f in fields(cls):
            if f.name not in cfg:
                continue
            raw = cfg[f.name]
            if f.name == "huber_delta":
                kw[f.name] = None if str(raw).lower() in ("none", "off", "") else float(raw)
            elif f.name == "checkpoint_dir":
                kw[f.name] = str(raw)
            elif f.type in ("int", int):
                kw[f.name] = int(raw)
            elif f.type in ("bool", bool):
                kw[f.name] = str(raw).lower() in ("1", "true", "yes", "on")
            else:
                kw[f.name] = float(raw)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("checkpoint_dir")
        return d


def compute_target(
    online: qnet.QParams,
    target: qnet.QParams,
    rewards: np.ndarray,
    next_states: np.ndarray,
    terminals: np.ndarray,
    gamma: float,
) -> np.ndarray:
    """Double-DQN targets ``r + gamma * Q_target(s', argmax_a Q_online(s', a))``,
    just ``r`` for terminal transitions. ``next_states`` must be normalized."""
    rewards = np.asarray(rewards, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=bool)
    y = rewards.copy()
    live = ~terminals
    if gamma == 0.0 or not live.any():
        return y
    s_next = np.asarray(next_states, dtype=np.float64)[live]
    a_star = np.argmax(qnet.forward(online, s_next).q_values, axis=1)
    q_eval = qnet.forward(target, s_next).q_values[np.arange(len(a_star)), a_star]
    y[live] += gamma * q_eval
    return y


def compute_target_batch(online, target, batch: TransitionSet, gamma: float) -> np.ndarray:
    return compute_target(online, target, batch.rewards, batch.next_states, batch.terminals, gamma)


@dataclass
class ValidationMetrics:
    td_error: float | None = None
    sim_return: float | None = None
    n_transitions: int = 0
    error: str | None = None


def validate(
    params: qnet.QParams,
    validation: TransitionSet | None,
    normalizer: Normalizer,
    gamma: float,
    simulator: Callable[[qnet.QParams, Normalizer], float] | None = None,
) -> ValidationMetrics:
    """Mean absolute TD error on held-out transitions (``params`` serving as
    both online and target network), plus simulator return when available."""
    m = ValidationMetrics()
    if validation is None or len(validation) == 0:
        m.error = "empty validation set"
    else:
        s = normalizer(validation.states)
        s_next = normalizer(validation.next_states)
        y = compute_target(params, params, validation.rewards, s_next, validation.terminals, gamma)
        q = qnet.forward(params, s).q_values[np.arange(len(validation)), validation.actions]
        m.td_error = float(np.mean(np.abs(y - q)))
        m.n_transitions = len(validation)
    if simulator is not None:
        m.sim_return = float(simulator(params, normalizer))
    return m


def _selection_score(m: ValidationMetrics) -> float | None:
    """Higher is better: simulator return, else negated TD error."""
    if m.sim_return is not None:
        return m.sim_return
    if m.td_error is not None:
        return -m.td_error
    return None


LOG_COLUMNS = ("step", "loss", "mean_q", "beta", "lr", "val_metric")


@dataclass
class TrainResult:
    best: qnet.QParams
    final: qnet.QParams
    normalizer: Normalizer
    config: TrainConfig
    log: list[tuple] = field(default_factory=list)
    best_step: int = 0
    best_metric: float | None = None
    target_syncs: list[int] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.log:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def checkpoint_meta(self) -> dict:
        return {"train_config": self.config.to_dict(), "best_step": self.best_step, "best_metric": self.best_metric}


def train(
    transitions: TransitionSet,
    config: TrainConfig,
    validation: TransitionSet | None = None,
    simulator: Callable[[qnet.QParams, Normalizer], float] | None = None,
    normalizer: Normalizer | None = None,
    on_sync: Callable[[int, qnet.QParams], None] | None = None,
) -> TrainResult:
    """Fill the replay buffer once from ``transitions`` and run
    ``config.total_steps`` double-DQN updates.

    Validation runs at step 0, every ``eval_interval`` steps and after the
    last step; the best-scoring parameters are kept.
    """
    if len(transitions) == 0:
        raise ValueError("empty transition set")
    rng = np.random.default_rng(config.seed)
    normalizer = normalizer or Normalizer.fit(transitions.states)
    states = normalizer(transitions.states)
    next_states = normalizer(transitions.next_states)
    next_states[transitions.terminals] = 0.0

    arch = qnet.Architecture(
        n_inputs=transitions.state_dim, hidden=config.hidden,
        stream_hidden=config.stream_hidden, n_actions=transitions.n_actions,
    )
    online = qnet.init_params(arch, rng)
    target = qnet.copy_params(online)

    tree = replay.SumTree(len(transitions))
    tree.extend(list(range(len(transitions))))
    batch_size = min(config.batch_size, len(transitions))

    result = TrainResult(best=qnet.copy_params(online), final=online, normalizer=normalizer, config=config)
    ckpt_dir = Path(config.checkpoint_dir) if config.checkpoint_dir else None

    def evaluate(step):
        if validation is None and simulator is None:
            return None
        m = validate(online, validation, normalizer, config.gamma, simulator)
        score = _selection_score(m)
        if score is not None and (result.best_metric is None or score > result.best_metric):
            result.best_metric = score
            result.best_step = step
            result.best = qnet.copy_params(online)
        return score

    evaluate(0)

    for step in range(1, config.total_steps + 1):
        beta = config.beta(step - 1)
        if config.prioritized:
            batch = replay.sample(tree, batch_size, beta, rng)
            rows = np.asarray(batch.transitions, dtype=np.int64)
            w = batch.is_weights if config.importance_weights else np.ones(batch_size)
        else:
            rows = rng.integers(len(transitions), size=batch_size)
            w = np.ones(batch_size)

        y = compute_target(online, target, transitions.rewards[rows], next_states[rows],
                           transitions.terminals[rows], config.gamma)
        out = qnet.forward(online, states[rows])
        a = transitions.actions[rows]
        q_taken = out.q_values[np.arange(batch_size), a]
        td = q_taken - y
        loss = float(np.mean(w * qnet.huber_loss(td, config.huber_delta)))
        if not math.isfinite(loss):
            path = None
            if ckpt_dir is not None:
                ckpt_dir.mkdir(parents=True, exist_ok=True)
                path = ckpt_dir / "last_good.ckpt"
                qnet.save_checkpoint(path, result.best, normalizer, result.checkpoint_meta())
            raise TrainingDiverged(f"non-finite loss at step {step}", step, result.best, path)
        grads = qnet.backward(online, out, a, td, w, config.huber_delta)
        try:
            qnet.adam_update(online, grads, config.lr)
        except qnet.NumericalError as exc:
            raise TrainingDiverged(str(exc), step, result.best) from exc
        if config.prioritized:
            replay.update_priorities(tree, batch.tree_indices, td, config.per_alpha, config.per_eps)

        if step % config.target_sync_interval == 0:
            target = qnet.copy_params(online)
            result.target_syncs.append(step)
            if on_sync is not None:
                on_sync(step, target)

        val = None
        if step % config.eval_interval == 0 or step == config.total_steps:
            val = evaluate(step)
        result.log.append((step, loss, float(q_taken.mean()), beta, config.lr, val))

    if validation is None and simulator is None:
        result.best = qnet.copy_params(online)
        result.best_step = config.total_steps
    result.final = online

    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        qnet.save_checkpoint(ckpt_dir / "best.ckpt", result.best, normalizer, result.checkpoint_meta())
        (ckpt_dir / "train_log.csv").write_text(result.log_csv())
    return result
