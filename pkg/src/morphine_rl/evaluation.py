"""Greedy-policy extraction, clinician comparison and simulator returns."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from morphine_rl import cohort_synth, mdp, qnet
from morphine_rl.mdp import N_ACTIONS, Normalizer

REPORT_FORMAT = "morphine-rl report v1"
AGENTS = ("physician", "model")


def greedy_action(params: qnet.QParams, state: np.ndarray, normalizer: Normalizer | None = None) -> int:
    """argmax_a Q(s, a); exact ties go to the lower index (less morphine)."""
    x = normalizer(state) if normalizer is not None else np.asarray(state, dtype=np.float64)
    return int(np.argmax(qnet.forward(params, x).q_values))


def greedy_actions(params: qnet.QParams, states: np.ndarray, normalizer: Normalizer | None = None) -> np.ndarray:
    x = normalizer(states) if normalizer is not None else np.asarray(states, dtype=np.float64)
    return np.argmax(qnet.forward(params, np.atleast_2d(x)).q_values, axis=1)


# -- clinician vs model ----------------------------------------------------


def dose_intervals(hours: Sequence[int], actions: Sequence[int]) -> list[int]:
    """Hours between consecutive dosed hours of one admission."""
    dosed = sorted(h for h, a in zip(hours, actions) if a > 0)
    return [b - a for a, b in zip(dosed, dosed[1:])]


@dataclass
class PolicyReport:
    """Physician-vs-model comparison over decision hours.

    ``joint[i][j]`` counts hours where the physician's action was i and the
    model's j. Interval histograms map hours-between-doses to counts.
    """

    per_timestep: list[tuple[str, int, int, int]]
    physician_rate: float | None = None
    model_rate: float | None = None
    p_model_doses_given_physician_doses: float | None = None
    model_given_physician_withhold: list[int] = field(default_factory=lambda: [0] * N_ACTIONS)
    joint: list[list[int]] = field(default_factory=lambda: [[0] * N_ACTIONS for _ in range(N_ACTIONS)])
    dose_hist: dict[str, list[int]] = field(default_factory=lambda: {a: [0] * N_ACTIONS for a in AGENTS})
    interval_hist: dict[str, dict[int, int]] = field(default_factory=lambda: {a: {} for a in AGENTS})

    @classmethod
    def from_timesteps(cls, rows: Sequence[tuple[str, int, int, int]]) -> "PolicyReport":
        rows = sorted((str(a), int(h), int(p), int(m)) for a, h, p, m in rows)
        rep = cls(per_timestep=rows)
        if not rows:
            return rep
        phys = np.array([r[2] for r in rows])
        model = np.array([r[3] for r in rows])
        rep.physician_rate = float(np.mean(phys > 0))
        rep.model_rate = float(np.mean(model > 0))
        dosed = phys > 0
        if dosed.any():
            rep.p_model_doses_given_physician_doses = float(np.mean(model[dosed] > 0))
        rep.model_given_physician_withhold = np.bincount(model[~dosed], minlength=N_ACTIONS).tolist()
        joint = np.zeros((N_ACTIONS, N_ACTIONS), dtype=np.int64)
        np.add.at(joint, (phys, model), 1)
        rep.joint = joint.tolist()
        rep.dose_hist = {
            "physician": np.bincount(phys, minlength=N_ACTIONS).tolist(),
            "model": np.bincount(model, minlength=N_ACTIONS).tolist(),
        }
        by_adm: dict[str, list[tuple[int, int, int]]] = {}
        for adm, h, p, m in rows:
            by_adm.setdefault(adm, []).append((h, p, m))
        counts = {a: Counter() for a in AGENTS}
        for seq in by_adm.values():
            hours = [s[0] for s in seq]
            for agent, col in (("physician", 1), ("model", 2)):
                counts[agent].update(dose_intervals(hours, [s[col] for s in seq]))
        rep.interval_hist = {a: dict(sorted(counts[a].items())) for a in AGENTS}
        return rep

    @property
    def n_timesteps(self) -> int:
        return len(self.per_timestep)

    def redose_next_hour(self, agent: str) -> float | None:
        """Share of dose-to-dose intervals that are exactly one hour."""
        hist = self.interval_hist[agent]
        total = sum(hist.values())
        return hist.get(1, 0) / total if total else None

    def summary(self) -> dict[str, float]:
        stats = {
            "n_timesteps": self.n_timesteps,
            "physician_rate": self.physician_rate,
            "model_rate": self.model_rate,
            "p_model_doses_given_physician_doses": self.p_model_doses_given_physician_doses,
            "physician_redose_next_hour": self.redose_next_hour("physician"),
            "model_redose_next_hour": self.redose_next_hour("model"),
        }
        return {k: v for k, v in stats.items() if v is not None and self.n_timesteps}


def compare_policies(params: qnet.QParams, episodes, normalizer: Normalizer | None = None) -> PolicyReport:
    """Model recommendation vs logged physician action for every decision
    hour (all hours but each episode's last) of imputed episodes."""
    rows = []
    for ep in episodes:
        if len(ep.records) < 2:
            continue
        decision = ep.records[:-1]
        states = np.array([mdp.state_vector(r) for r in decision])
        model = greedy_actions(params, states, normalizer)
        for r, m in zip(decision, model):
            rows.append((ep.admission_id, r.hour_index, mdp.discretize_dose(r.morphine_mg), int(m)))
    if not rows:
        raise ValueError("no decision hours in the test episodes")
    return PolicyReport.from_timesteps(rows)


# -- report files ----------------------------------------------------------

_TABLES = {
    "timesteps": ("admission_id", "hour", "physician_action", "model_action"),
    "joint_histogram": ("physician_action", "model_action", "count"),
    "dose_histogram": ("agent", "action", "count"),
    "interval_histogram": ("agent", "interval_hours", "count"),
    "summary": ("statistic", "value"),
}


def _table_rows(report: PolicyReport) -> dict[str, list[tuple]]:
    """Sparse tables (zero counts omitted) so an empty report is header-only."""
    return {
        "timesteps": list(report.per_timestep),
        "joint_histogram": [
            (i, j, c) for i, row in enumerate(report.joint) for j, c in enumerate(row) if c
        ],
        "dose_histogram": [
            (agent, a, c) for agent in AGENTS for a, c in enumerate(report.dose_hist[agent]) if c
        ],
        "interval_histogram": [
            (agent, k, c) for agent in AGENTS for k, c in sorted(report.interval_hist[agent].items())
        ],
        "summary": [(k, repr(float(v)) if isinstance(v, float) else v) for k, v in report.summary().items()],
    }


def export_report(report: PolicyReport, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write the report as one CSV per table, or one ``report.jsonl``.

    Every CSV starts with ``# morphine-rl report v1 <table>``; the JSON-lines
    file starts with a ``{"format": ...}`` record and tags each row with its
    table name.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tables = _table_rows(report)
    if fmt == "csv":
        paths = []
        for name, cols in _TABLES.items():
            buf = io.StringIO()
            buf.write(f"# {REPORT_FORMAT} {name}\n")
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(cols)
            w.writerows(tables[name])
            path = out / f"{name}.csv"
            path.write_text(buf.getvalue())
            paths.append(path)
        return paths
    if fmt in ("jsonl", "json-lines"):
        lines = [json.dumps({"format": REPORT_FORMAT})]
        for name, cols in _TABLES.items():
            for row in tables[name]:
                lines.append(json.dumps({"table": name, **dict(zip(cols, row))}))
        path = out / "report.jsonl"
        path.write_text("\n".join(lines) + "\n")
        return [path]
    raise ValueError(f"unknown report format {fmt!r}; use 'csv' or 'jsonl'")


def _report_from_tables(tables: dict[str, list[dict]]) -> PolicyReport:
    rep = PolicyReport(
        per_timestep=[
            (r["admission_id"], int(r["hour"]), int(r["physician_action"]), int(r["model_action"]))
            for r in tables["timesteps"]
        ]
    )
    for r in tables["joint_histogram"]:
        rep.joint[int(r["physician_action"])][int(r["model_action"])] = int(r["count"])
    for r in tables["dose_histogram"]:
        rep.dose_hist[r["agent"]][int(r["action"])] = int(r["count"])
    for r in tables["interval_histogram"]:
        rep.interval_hist[r["agent"]][int(r["interval_hours"])] = int(r["count"])
    summary = {r["statistic"]: float(r["value"]) for r in tables["summary"]}
    rep.physician_rate = summary.get("physician_rate")
    rep.model_rate = summary.get("model_rate")
    rep.p_model_doses_given_physician_doses = summary.get("p_model_doses_given_physician_doses")
    withhold = [0] * N_ACTIONS
    for _, _, p, m in rep.per_timestep:
        if p == 0:
            withhold[m] += 1
    rep.model_given_physician_withhold = withhold
    return rep


def read_report(out_dir: str | Path, fmt: str = "csv") -> PolicyReport:
    out = Path(out_dir)
    tables: dict[str, list[dict]] = {name: [] for name in _TABLES}
    if fmt == "csv":
        for name, cols in _TABLES.items():
            lines = (out / f"{name}.csv").read_text().splitlines()
            if lines[0] != f"# {REPORT_FORMAT} {name}":
                raise ValueError(f"{name}.csv: unexpected header {lines[0]!r}")
            reader = csv.DictReader(lines[1:])
            if tuple(reader.fieldnames or ()) != cols:
                raise ValueError(f"{name}.csv: columns {reader.fieldnames}")
            tables[name] = list(reader)
    else:
        lines = (out / "report.jsonl").read_text().splitlines()
        if json.loads(lines[0]).get("format") != REPORT_FORMAT:
            raise ValueError("report.jsonl: unexpected format record")
        for line in lines[1:]:
            rec = json.loads(line)
            tables[rec.pop("table")].append(rec)
    return _report_from_tables(tables)


# -- simulator evaluation ------------------------------------------------------

ActionPolicy = Callable[[np.ndarray, np.random.Generator], int]


def q_policy(params: qnet.QParams, normalizer: Normalizer | None) -> ActionPolicy:
    def act(obs, rng):
        return greedy_action(params, obs, normalizer)

    return act


def constant_policy(action: int) -> ActionPolicy:
    return lambda obs, rng: action


def uniform_random_policy(obs, rng) -> int:
    return int(rng.integers(N_ACTIONS))


@dataclass
class SimStats:
    n_episodes: int
    horizon: int
    gamma: float
    discounted_return: tuple[float, float]  # mean, sd over episodes
    mean_reward: tuple[float, float]
    pain_component: tuple[float, float]
    hr_component: tuple[float, float]
    rr_component: tuple[float, float]
    dose_rate: float
    returns: list[float] = field(repr=False, default_factory=list)
    mean_rewards: list[float] = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_episodes": self.n_episodes, "horizon": self.horizon, "gamma": self.gamma,
            "discounted_return": list(self.discounted_return), "mean_reward": list(self.mean_reward),
            "pain_component": list(self.pain_component), "hr_component": list(self.hr_component),
            "rr_component": list(self.rr_component), "dose_rate": self.dose_rate,
        }


def _mean_sd(xs) -> tuple[float, float]:
    xs = np.asarray(xs, dtype=np.float64)
    return float(xs.mean()), float(xs.std(ddof=1)) if len(xs) > 1 else 0.0


def simulate_policy(
    policy: qnet.QParams | ActionPolicy | str,
    distribution: cohort_synth.PatientDistribution | None = None,
    n_episodes: int = 200,
    horizon: int = 72,
    seed: int = 0,
    gamma: float = 0.99,
    normalizer: Normalizer | None = None,
) -> SimStats:
    """Roll a policy through freshly sampled simulated patients.

    ``policy`` is a Q-network (acted on greedily), ``"withhold"``,
    ``"random"``, or a callable ``(obs, rng) -> action``. The action's bin
    midpoint dose is delivered. Episode i's patient and noise depend only on
    ``(seed, i)``, so different policies see the same patients.
    """
    if isinstance(policy, qnet.QParams):
        act = q_policy(policy, normalizer)
    elif policy == "withhold":
        act = constant_policy(0)
    elif policy == "random":
        act = uniform_random_policy
    elif callable(policy):
        act = policy
    else:
        raise ValueError(f"unknown policy {policy!r}")
    distribution = distribution or cohort_synth.PatientDistribution()

    def dose_policy(obs, rng):
        return mdp.representative_dose(act(obs, rng))

    discount = gamma ** np.arange(horizon)
    returns, means, comps, dosed = [], [], [], 0
    for i in range(n_episodes):
        rng = np.random.default_rng([seed, i])
        params = distribution.sample(rng)
        tr = cohort_synth.rollout(params, horizon, dose_policy, rng, policy_rng=np.random.default_rng([seed, i, 1]))
        c = np.array([mdp.reward_components(o[1], o[2], o[0]) for o in tr.obs[1:]]).reshape(-1, 3)
        r = c @ np.array(mdp.REWARD_WEIGHTS)
        returns.append(float(discount @ r) if horizon else 0.0)
        means.append(float(r.mean()) if horizon else math.nan)
        comps.append(c.mean(axis=0) if horizon else np.full(3, math.nan))
        dosed += int(np.count_nonzero(tr.doses[:-1]))
    comps = np.array(comps)
    return SimStats(
        n_episodes=n_episodes, horizon=horizon, gamma=gamma,
        discounted_return=_mean_sd(returns), mean_reward=_mean_sd(means),
        pain_component=_mean_sd(comps[:, 0]), hr_component=_mean_sd(comps[:, 1]),
        rr_component=_mean_sd(comps[:, 2]),
        dose_rate=dosed / (n_episodes * horizon) if horizon else 0.0,
        returns=returns, mean_rewards=means,
    )
