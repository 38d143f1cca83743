"""Synthetic morphine cohort: one-compartment PK with linear PD.

Hourly dynamics, for a dose ``D`` given during hour t::

    E[t+1]     = E[t] * 2**(-1 / half_life) + D                  (effect-site mg)
    drive[t+1] = clip(b_p + phi * (drive[t] - b_p) + sd_drive * z1, 0, 10)
    pain[t+1]  = clip(drive[t+1] - sensitivity * E[t+1] + sd_pain * z2, 0, 10)
    rr[t+1]    = max(rr_floor, b_rr - resp_depression * E[t+1] + sd_rr * z3)
    hr[t+1]    = max(hr_floor, b_hr + hr_pain_coupling * pain[t+1] + sd_hr * z4)

with z1..z4 standard normal draws, always taken in that order. A bolus is
fully absorbed within its hour (onset is minutes, the grid is hours).
``drive`` is the untreated pain level; with zero noise it stays at the
baseline ``b_p``.

Co-analgesics are logged at random with no modeled effect: they populate the
corresponding state channels only.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timedelta
from typing import Callable

import numpy as np

from morphine_rl import mdp
from morphine_rl.ingestion import COANALGESICS, Channel, EpisodeLog, HourlyRecord, RawEvent


class InvalidParameterError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSD:
    pain_drive: float = 0.8
    pain: float = 0.3
    hr: float = 3.0
    rr: float = 0.8

    @classmethod
    def zero(cls) -> "NoiseSD":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class PatientParams:
    baseline_pain: float
    baseline_hr: float
    baseline_rr: float
    pk_half_life_hours: float = 3.5
    analgesic_sensitivity: float = 0.3
    resp_depression_coeff: float = 0.15
    hr_pain_coupling: float = 2.0
    pain_persistence: float = 0.9
    noise_sd: NoiseSD = field(default_factory=NoiseSD)
    rr_floor: float = 4.0
    hr_floor: float = 30.0

    def __post_init__(self):
        if not 0 <= self.baseline_pain <= 10:
            raise InvalidParameterError(f"baseline_pain {self.baseline_pain} outside [0, 10]")
        if self.baseline_hr <= 0 or self.baseline_rr <= 0:
            raise InvalidParameterError("baseline vitals must be positive")
        if self.pk_half_life_hours <= 0:
            raise InvalidParameterError(f"half-life must be > 0, got {self.pk_half_life_hours}")
        if self.analgesic_sensitivity <= 0 or self.resp_depression_coeff < 0:
            raise InvalidParameterError("sensitivity must be > 0 and respiratory coefficient >= 0")


@dataclass(frozen=True)
class SimState:
    effect_site_mg: float
    pain: float
    hr: float
    rr: float
    hour: int = 0
    pain_drive: float = 0.0


def decay_step(effect_site_mg: float, half_life_hours: float) -> float:
    """One hour of first-order elimination."""
    if not half_life_hours > 0:
        raise InvalidParameterError(f"half-life must be > 0, got {half_life_hours}")
    if effect_site_mg < 0:
        raise InvalidParameterError(f"effect-site amount must be >= 0, got {effect_site_mg}")
    return effect_site_mg * 2.0 ** (-1.0 / half_life_hours)


def initial_state(params: PatientParams) -> SimState:
    p = params.baseline_pain
    return SimState(
        effect_site_mg=0.0,
        pain=p,
        hr=params.baseline_hr + params.hr_pain_coupling * p,
        rr=params.baseline_rr,
        hour=0,
        pain_drive=p,
    )


def sim_step(state: SimState, params: PatientParams, dose_mg: float, rng: np.random.Generator) -> SimState:
    if not dose_mg >= 0:
        raise InvalidParameterError(f"dose must be >= 0 mg, got {dose_mg}")
    z = rng.standard_normal(4)
    sd = params.noise_sd
    effect = decay_step(state.effect_site_mg, params.pk_half_life_hours) + dose_mg
    b = params.baseline_pain
    drive = min(max(b + params.pain_persistence * (state.pain_drive - b) + sd.pain_drive * z[0], 0.0), 10.0)
    pain = min(max(drive - params.analgesic_sensitivity * effect + sd.pain * z[1], 0.0), 10.0)
    rr = max(params.rr_floor, params.baseline_rr - params.resp_depression_coeff * effect + sd.rr * z[2])
    hr = max(params.hr_floor, params.baseline_hr + params.hr_pain_coupling * pain + sd.hr * z[3])
    return SimState(effect, pain, hr, rr, state.hour + 1, drive)


@dataclass(frozen=True)
class PatientDistribution:
    """Uniform ranges the cohort's patient parameters are drawn from."""

    pain: tuple[float, float] = (2.0, 7.0)
    hr: tuple[float, float] = (65.0, 85.0)
    rr: tuple[float, float] = (14.0, 18.0)
    half_life: tuple[float, float] = (3.0, 4.0)
    sensitivity: tuple[float, float] = (0.2, 0.45)
    resp_depression: tuple[float, float] = (0.08, 0.2)
    hr_pain_coupling: float = 2.0
    pain_persistence: float = 0.9
    noise_sd: NoiseSD = field(default_factory=NoiseSD)

    def sample(self, rng: np.random.Generator) -> PatientParams:
        u = rng.random(6)

        def pick(rng_, lo_hi):
            lo, hi = lo_hi
            return lo + (hi - lo) * rng_

        return PatientParams(
            baseline_pain=pick(u[0], self.pain),
            baseline_hr=pick(u[1], self.hr),
            baseline_rr=pick(u[2], self.rr),
            pk_half_life_hours=pick(u[3], self.half_life),
            analgesic_sensitivity=pick(u[4], self.sensitivity),
            resp_depression_coeff=pick(u[5], self.resp_depression),
            hr_pain_coupling=self.hr_pain_coupling,
            pain_persistence=self.pain_persistence,
            noise_sd=self.noise_sd,
        )

    @classmethod
    def from_mapping(cls, cfg: dict) -> "PatientDistribution":
        """Build from flat config keys such as ``pain_min``/``pain_max``."""
        kw = {}
        for name in ("pain", "hr", "rr", "half_life", "sensitivity", "resp_depression"):
            lo, hi = cfg.get(f"{name}_min"), cfg.get(f"{name}_max")
            if (lo is None) != (hi is None):
                raise ConfigurationError(f"{name}_min and {name}_max must be given together")
            if lo is not None:
                if float(lo) > float(hi):
                    raise ConfigurationError(f"{name}_min > {name}_max")
                kw[name] = (float(lo), float(hi))
        for name in ("hr_pain_coupling", "pain_persistence"):
            if name in cfg:
                kw[name] = float(cfg[name])
        noise = {k: float(cfg[f"noise_{k}"]) for k in ("pain_drive", "pain", "hr", "rr") if f"noise_{k}" in cfg}
        if noise:
            kw["noise_sd"] = replace(NoiseSD(), **noise)
        return cls(**kw)


# -- behavior policies ----------------------------------------------------

# Typical single doses (mg) logged for each co-analgesic channel.
COANALGESIC_DOSES = (1000, 15, 400, 200, 500, 300, 75, 20, 100, 0.4, 0.1, 750, 0.5, 5, 0.05, 50)


@dataclass(frozen=True)
class ClinicianPolicy:
    """Rule-based clinician: when observed pain exceeds ``threshold``, give
    ``base_dose + dose_per_point * (pain - threshold)`` mg (rounded to 0.5 mg,
    capped at ``max_dose``), but withhold with probability ``withhold_prob``.
    With probability ``explore_prob`` an arbitrary bolus is given instead.
    """

    threshold: float = 6.0
    base_dose: float = 2.0
    dose_per_point: float = 1.5
    max_dose: float = 10.0
    withhold_prob: float = 0.5
    explore_prob: float = 0.1

    def __call__(self, obs: np.ndarray, rng: np.random.Generator) -> float:
        u_explore, u_withhold, u_action = rng.random(3)
        if u_explore < self.explore_prob:
            return mdp.representative_dose(1 + int(u_action * (mdp.N_ACTIONS - 1)))
        pain = obs[0]
        if pain <= self.threshold or u_withhold < self.withhold_prob:
            return 0.0
        dose = min(self.base_dose + self.dose_per_point * (pain - self.threshold), self.max_dose)
        return round(dose * 2) / 2


def withhold_policy(obs: np.ndarray, rng: np.random.Generator) -> float:
    return 0.0


def random_policy(obs: np.ndarray, rng: np.random.Generator) -> float:
    return mdp.representative_dose(int(rng.integers(mdp.N_ACTIONS)))


def make_policy(descriptor: str | Callable) -> Callable[[np.ndarray, np.random.Generator], float]:
    """``"clinician"`` (alias ``"default"``), ``"withhold"``, ``"random"``, or a callable."""
    if callable(descriptor):
        return descriptor
    policies = {
        "default": ClinicianPolicy(),
        "clinician": ClinicianPolicy(),
        "withhold": withhold_policy,
        "random": random_policy,
    }
    try:
        return policies[descriptor]
    except KeyError:
        raise ConfigurationError(
            f"unknown behavior policy {descriptor!r}; choose from {sorted(policies)}"
        ) from None


# -- rollouts ------------------------------------------------------------


@dataclass
class Rollout:
    """Hour-by-hour trace; ``obs[t]`` is the 19-d state at hour t and
    ``doses[t]`` the morphine given during hour t (0 at the last hour)."""

    params: PatientParams
    obs: np.ndarray
    doses: np.ndarray
    effect_site: np.ndarray
    pain_observed: np.ndarray


COANALGESIC_RATE = 0.03
PAIN_OBS_PROB = 0.85


def rollout(
    params: PatientParams,
    horizon_hours: int,
    policy: Callable[[np.ndarray, np.random.Generator], float],
    rng: np.random.Generator,
    policy_rng: np.random.Generator | None = None,
) -> Rollout:
    """Run ``policy`` for ``horizon_hours`` steps. A separate ``policy_rng``
    keeps patient noise identical across policies (paired comparisons)."""
    policy_rng = rng if policy_rng is None else policy_rng
    state = initial_state(params)
    obs = np.zeros((horizon_hours + 1, mdp.STATE_DIM))
    doses = np.zeros(horizon_hours + 1)
    effect = np.zeros(horizon_hours + 1)
    pain_seen = np.ones(horizon_hours + 1, dtype=bool)
    n_drugs = len(COANALGESIC_DOSES)
    for t in range(horizon_hours + 1):
        obs[t, :3] = (state.pain, state.hr, state.rr)
        effect[t] = state.effect_site_mg
        u_co, u_drug, u_pain = rng.random(3)
        if u_co < COANALGESIC_RATE:
            k = int(u_drug * n_drugs)
            obs[t, 3 + k] = COANALGESIC_DOSES[k]
        # pain charting is skipped some hours; hour 0 is always charted
        pain_seen[t] = t == 0 or u_pain < PAIN_OBS_PROB
        if t == horizon_hours:
            break
        doses[t] = policy(obs[t], policy_rng)
        state = sim_step(state, params, doses[t], rng)
    return Rollout(params, obs, doses, effect, pain_seen)


# -- cohort generation --------------------------------------------------

PAIN_LABELS = {
    0: "No Pain", 1: "Mild", 2: "Mild", 3: "Mild to Mod", 4: "Moderate", 5: "Moderate",
    6: "Mod to Severe", 7: "Severe", 8: "Severe", 9: "Very Severe", 10: "Worst",
}
TEXT_PAIN_PROB = 0.3
EPOCH = datetime(2100, 1, 1)


@dataclass
class SyntheticEpisode:
    admission_id: str
    params: PatientParams
    events: list[RawEvent]
    truth: EpisodeLog  # hourly values exactly as simulated, before charting

    @property
    def n_hours(self) -> int:
        return len(self.truth.records)


def _chart(admission_id: str, tr: Rollout, start: datetime, rng: np.random.Generator) -> list[RawEvent]:
    events = []
    for t in range(len(tr.doses)):
        hour = start + timedelta(hours=t)
        pain, hr, rr = tr.obs[t, :3]
        events.append(RawEvent(admission_id, hour + timedelta(minutes=5), Channel.HEART_RATE, f"{hr:.1f}"))
        events.append(RawEvent(admission_id, hour + timedelta(minutes=5), Channel.RESP_RATE, f"{rr:.1f}"))
        text = rng.random() < TEXT_PAIN_PROB
        if tr.pain_observed[t]:
            when = hour + timedelta(minutes=10)
            if text:
                score = int(round(pain))
                events.append(RawEvent(admission_id, when, Channel.PAIN_TEXT, f"{score}-{PAIN_LABELS[score]}"))
            else:
                events.append(RawEvent(admission_id, when, Channel.PAIN_NUMERIC, f"{pain:.1f}"))
        if tr.doses[t] > 0:
            events.append(RawEvent(admission_id, hour + timedelta(minutes=30), Channel.MORPHINE, f"{tr.doses[t]:g}"))
        for k in np.flatnonzero(tr.obs[t, 3:]):
            events.append(
                RawEvent(admission_id, hour + timedelta(minutes=45), Channel.COANALGESIC,
                         f"{tr.obs[t, 3 + k]:g}", COANALGESICS[k])
            )
    return events


def generate_patient(
    index: int,
    horizon_hours: int,
    behavior_policy: str | Callable = "clinician",
    master_seed: int = 0,
    distribution: PatientDistribution | None = None,
) -> SyntheticEpisode:
    """Patient ``index`` of a cohort; depends only on (index, master_seed)."""
    policy = make_policy(behavior_policy)
    rng = np.random.default_rng([master_seed, index])
    params = (distribution or PatientDistribution()).sample(rng)
    tr = rollout(params, horizon_hours, policy, rng)
    adm = f"P{index:05d}"
    events = _chart(adm, tr, EPOCH + timedelta(days=index), rng)
    truth = EpisodeLog(
        adm,
        [
            HourlyRecord(t, *map(float, tr.obs[t, :3]), float(tr.doses[t]), tuple(map(float, tr.obs[t, 3:])))
            for t in range(horizon_hours + 1)
        ],
    )
    return SyntheticEpisode(adm, params, events, truth)


def _generate_star(args):
    return generate_patient(*args)


def generate_cohort(
    n_patients: int,
    horizon_hours: int,
    behavior_policy: str | Callable = "clinician",
    master_seed: int = 0,
    distribution: PatientDistribution | None = None,
    jobs: int = 1,
) -> list[SyntheticEpisode]:
    if n_patients <= 0:
        raise InvalidParameterError(f"n_patients must be > 0, got {n_patients}")
    if horizon_hours < 0:
        raise InvalidParameterError(f"horizon_hours must be >= 0, got {horizon_hours}")
    make_policy(behavior_policy)  # fail fast on unknown descriptors
    tasks = [(i, horizon_hours, behavior_policy, master_seed, distribution) for i in range(n_patients)]
    if jobs > 1 and not callable(behavior_policy):
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_generate_star, tasks, chunksize=max(1, n_patients // (4 * jobs))))
    return [_generate_star(t) for t in tasks]


def dose_rate(cohort: list[SyntheticEpisode]) -> float:
    """Fraction of decision hours (all but each episode's last) with a bolus."""
    hours = sum(max(ep.n_hours - 1, 0) for ep in cohort)
    dosed = sum(1 for ep in cohort for r in ep.truth.records[:-1] if r.morphine_mg > 0)
    return dosed / hours if hours else 0.0


def params_dict(params: PatientParams) -> dict:
    return asdict(params)


def effect_after(initial_mg: float, hours: int, half_life_hours: float) -> float:
    """Closed-form drug remaining after ``hours`` hours without dosing."""
    return initial_mg * math.pow(2.0, -hours / half_life_hours)
