"""Hourly episodes -> MDP transitions.

State layout (19 channels, in this order)::

    pain, hr, rr, <16 co-analgesic doses in configured order>

Actions are 14 morphine dose bins; the reward combines a linear pain term
with soft logistic windows on heart rate (60-100) and respiration (12-20).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_ACTIONS = 14
STATE_DIM = 19

# Upper (closed) edges of the positive dose bins; action 13 is open-ended.
DOSE_BIN_EDGES: tuple[float, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 15, 20)

HR_WINDOW = (60.0, 100.0)
RR_WINDOW = (12.0, 20.0)
REWARD_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)  # pain, hr, rr

TRANSITIONS_FORMAT = "morphine-rl transitions v1"


class InvalidDoseError(ValueError):
    pass


class InvalidRangeError(ValueError):
    pass


def discretize_dose(dose_mg: float) -> int:
    """Map a summed hourly morphine dose to its action bin.

    0 -> 0, (k-1, k] -> k for k = 1..10, (10, 15] -> 11, (15, 20] -> 12,
    (20, inf) -> 13.
    """
    if not dose_mg >= 0:  # also rejects NaN
        raise InvalidDoseError(f"dose must be >= 0 mg, got {dose_mg!r}")
    if dose_mg == 0:
        return 0
    for k, upper in enumerate(DOSE_BIN_EDGES, start=1):
        if dose_mg <= upper:
            return k
    return N_ACTIONS - 1


def action_label(action: int) -> str:
    if action == 0:
        return "0 mg"
    if not 0 < action < N_ACTIONS:
        raise IndexError(f"action {action} outside 0..{N_ACTIONS - 1}")
    if action == N_ACTIONS - 1:
        return f"({DOSE_BIN_EDGES[-1]:g}, inf) mg"
    lower = 0 if action == 1 else DOSE_BIN_EDGES[action - 2]
    return f"({lower:g}, {DOSE_BIN_EDGES[action - 1]:g}] mg"


def representative_dose(action: int) -> float:
    """Dose actually delivered when a policy picks `action` in the simulator.

    Bin midpoints; the open top bin uses 25 mg.
    """
    if action == 0:
        return 0.0
    if action == N_ACTIONS - 1:
        return 25.0
    lower = 0.0 if action == 1 else float(DOSE_BIN_EDGES[action - 2])
    return (lower + DOSE_BIN_EDGES[action - 1]) / 2


def _logistic(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def window_score(x: float, lo: float, hi: float) -> float:
    """Soft indicator of ``lo <= x <= hi`` with range (-1, 1)."""
    if not lo < hi:
        raise InvalidRangeError(f"need lo < hi, got lo={lo}, hi={hi}")
    return 2.0 * _logistic(x - lo) - 2.0 * _logistic(x - hi) - 1.0


def pain_score(p: float) -> float:
    if p < 0 or p > 10:
        warnings.warn(f"pain {p} outside [0, 10]; clamped", RuntimeWarning, stacklevel=2)
        p = min(max(p, 0.0), 10.0)
    return 1.0 - 2.0 * p / 10.0


def reward(hr: float, rr: float, p: float) -> float:
    c_p, c_hr, c_rr = REWARD_WEIGHTS
    return (
        c_p * pain_score(p)
        + c_hr * window_score(hr, *HR_WINDOW)
        + c_rr * window_score(rr, *RR_WINDOW)
    )


def reward_components(hr: float, rr: float, p: float) -> tuple[float, float, float]:
    """(pain, hr-window, rr-window) terms before weighting."""
    return pain_score(p), window_score(hr, *HR_WINDOW), window_score(rr, *RR_WINDOW)


@dataclass(frozen=True)
class Transition:
    s_t: np.ndarray
    a_t: int
    r_t: float
    s_next: np.ndarray | None
    terminal: bool

    def __post_init__(self):
        if self.terminal != (self.s_next is None):
            raise ValueError("terminal transitions carry no next state, and vice versa")
        if not -1.0 <= self.r_t <= 1.0:
            raise ValueError(f"reward {self.r_t} outside [-1, 1]")


def state_vector(record) -> np.ndarray:
    """19-d raw state from an imputed HourlyRecord."""
    if record.pain is None or record.hr is None or record.rr is None:
        raise ValueError(f"hour {record.hour_index} has missing values; impute first")
    return np.concatenate(([record.pain, record.hr, record.rr], record.coanalgesics_mg)).astype(
        np.float64
    )


@dataclass
class EpisodeConversion:
    transitions: list[Transition]
    skipped_episodes: int = 0


def episode_to_transitions(episode, reward_on_next: bool = True) -> list[Transition]:
    """Consecutive-hour transitions for one imputed episode.

    With ``reward_on_next`` the reward for acting at hour t is scored on hour
    t+1's observations; otherwise on hour t's.
    """
    records = episode.records
    if len(records) < 2:
        return []
    states = [state_vector(r) for r in records]
    out = []
    last = len(records) - 2
    for t in range(len(records) - 1):
        scored = records[t + 1] if reward_on_next else records[t]
        terminal = t == last
        out.append(
            Transition(
                s_t=states[t],
                a_t=discretize_dose(records[t].morphine_mg),
                r_t=reward(scored.hr, scored.rr, scored.pain),
                s_next=None if terminal else states[t + 1],
                terminal=terminal,
            )
        )
    return out


def cohort_to_transitions(episodes: Iterable, reward_on_next: bool = True) -> EpisodeConversion:
    result = EpisodeConversion(transitions=[])
    for ep in episodes:
        if len(ep.records) < 2:
            result.skipped_episodes += 1
            continue
        result.transitions.extend(episode_to_transitions(ep, reward_on_next))
    return result


@dataclass
class Normalizer:
    """Per-channel z-score, fitted on training states."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray, min_std: float = 1e-6) -> "Normalizer":
        states = np.asarray(states, dtype=np.float64)
        std = states.std(axis=0)
        std = np.where(std < min_std, 1.0, std)
        return cls(mean=states.mean(axis=0), std=std)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    def __call__(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states, dtype=np.float64) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(mean=np.asarray(d["mean"], dtype=np.float64), std=np.asarray(d["std"], dtype=np.float64))


@dataclass
class TransitionSet:
    """Column-major transition storage used by the trainer.

    ``next_states`` rows for terminal transitions are zero and never read.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    n_actions: int = N_ACTIONS
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], n_actions: int = N_ACTIONS) -> "TransitionSet":
        if not transitions:
            raise ValueError("no transitions")
        dim = len(transitions[0].s_t)
        states = np.array([t.s_t for t in transitions], dtype=np.float64)
        next_states = np.array(
            [np.zeros(dim) if t.terminal else t.s_next for t in transitions], dtype=np.float64
        )
        return cls(
            states=states,
            actions=np.array([t.a_t for t in transitions], dtype=np.int64),
            rewards=np.array([t.r_t for t in transitions], dtype=np.float64),
            next_states=next_states,
            terminals=np.array([t.terminal for t in transitions], dtype=bool),
            n_actions=n_actions,
        )

    def subset(self, idx) -> "TransitionSet":
        return TransitionSet(
            self.states[idx], self.actions[idx], self.rewards[idx],
            self.next_states[idx], self.terminals[idx], self.n_actions, dict(self.meta),
        )


def save_transitions(path: str | Path, ts: TransitionSet, normalizer: Normalizer | None = None) -> None:
    """Text format: a ``#`` header line with JSON metadata, then one CSV row
    per transition: ``s_0..s_{d-1}, action, reward, terminal, s'_0..s'_{d-1}``
    (next-state fields empty on terminal rows). Floats use ``repr`` so the
    round trip is exact."""
    header = {
        "state_dim": ts.state_dim,
        "n_actions": ts.n_actions,
        "bin_edges_mg": list(DOSE_BIN_EDGES),
        "normalizer": normalizer.to_dict() if normalizer is not None else None,
        **ts.meta,
    }
    lines = [f"# {TRANSITIONS_FORMAT} {json.dumps(header, sort_keys=True)}"]
    for i in range(len(ts)):
        row = [repr(float(x)) for x in ts.states[i]]
        row += [str(int(ts.actions[i])), repr(float(ts.rewards[i])), str(int(ts.terminals[i]))]
        if ts.terminals[i]:
            row += [""] * ts.state_dim
        else:
            row += [repr(float(x)) for x in ts.next_states[i]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_transitions(path: str | Path) -> tuple[TransitionSet, Normalizer | None]:
    text = Path(path).read_text().splitlines()
    prefix = f"# {TRANSITIONS_FORMAT} "
    if not text or not text[0].startswith(prefix):
        raise ValueError(f"{path}: not a '{TRANSITIONS_FORMAT}' file")
    header = json.loads(text[0][len(prefix):])
    d = header["state_dim"]
    n = len(text) - 1
    states = np.zeros((n, d))
    next_states = np.zeros((n, d))
    actions = np.zeros(n, dtype=np.int64)
    rewards = np.zeros(n)
    terminals = np.zeros(n, dtype=bool)
    for i, line in enumerate(text[1:]):
        f = line.split(",")
        states[i] = [float(x) for x in f[:d]]
        actions[i] = int(f[d])
        rewards[i] = float(f[d + 1])
        terminals[i] = f[d + 2] == "1"
        if not terminals[i]:
            next_states[i] = [float(x) for x in f[d + 3:]]
    norm = header.get("normalizer")
    meta = {k: v for k, v in header.items() if k not in ("state_dim", "n_actions", "bin_edges_mg", "normalizer")}
    ts = TransitionSet(states, actions, rewards, next_states, terminals, header["n_actions"], meta)
    return ts, (Normalizer.from_dict(norm) if norm else None)
