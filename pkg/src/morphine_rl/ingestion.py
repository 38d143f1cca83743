"""Raw ICU event logs -> hourly, imputed episodes.

Event CSV (one event per row, after a version line)::

    # morphine-rl events v1
    admission_id,timestamp,channel,drug_name,value
    A001,2130-04-02T07:05:00,heart_rate,,88.0
    A001,2130-04-02T07:30:00,morphine_bolus_mg,,2.0
    A001,2130-04-02T07:40:00,coanalgesic_mg,ketorolac,15
    A001,2130-04-02T08:05:00,pain_text,,3-Mild to Mod

Hour windows are anchored at the admission's first event, truncated to the
hour. Events that cannot be used (bad timestamp, unknown channel or drug,
unparseable value) are dropped and counted in :class:`IngestStats`.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import re
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EVENTS_FORMAT = "morphine-rl events v1"
EPISODE_FORMAT = "morphine-rl episode v1"
EVENT_COLUMNS = ("admission_id", "timestamp", "channel", "drug_name", "value")

DEFAULT_IMPUTE = {"pain": 0.0, "hr": 80.0, "rr": 16.0}
MEAN_CHANNELS = ("pain", "hr", "rr")


class Channel(str, enum.Enum):
    PAIN_NUMERIC = "pain_numeric"
    PAIN_TEXT = "pain_text"
    MORPHINE = "morphine_bolus_mg"
    COANALGESIC = "coanalgesic_mg"
    HEART_RATE = "heart_rate"
    RESP_RATE = "respiration_rate"


class UnparseablePainError(ValueError):
    pass


class EmptyEpisodeError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


class FormatError(ValueError):
    pass


def load_coanalgesics(path: str | Path | None = None) -> tuple[str, ...]:
    if path is None:
        text = resources.files("morphine_rl").joinpath("data/coanalgesics.txt").read_text()
    else:
        text = Path(path).read_text()
    names = tuple(
        line.strip().lower() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )
    if len(names) != 16 or len(set(names)) != 16:
        raise FormatError(f"co-analgesic list must name 16 distinct drugs, got {len(names)}")
    return names


COANALGESICS = load_coanalgesics()


@dataclass(frozen=True)
class RawEvent:
    admission_id: str
    timestamp: datetime
    channel: Channel
    value: float | str
    drug_name: str = ""


@dataclass(frozen=True)
class HourlyRecord:
    hour_index: int
    pain: float | None
    hr: float | None
    rr: float | None
    morphine_mg: float = 0.0
    coanalgesics_mg: tuple[float, ...] = (0.0,) * 16

    def missing(self) -> bool:
        return self.pain is None or self.hr is None or self.rr is None


@dataclass
class EpisodeLog:
    admission_id: str
    records: list[HourlyRecord]

    def __post_init__(self):
        for i, r in enumerate(self.records):
            if r.hour_index != i:
                raise ValueError(
                    f"{self.admission_id}: hour_index {r.hour_index} at position {i}; must be consecutive from 0"
                )

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class IngestStats:
    events_read: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


_LEADING_INT = re.compile(r"\s*(\d+)")


def parse_pain_text(text: str) -> int:
    """Leading integer of a charted pain label, e.g. ``"3-Mild to Mod" -> 3``."""
    m = _LEADING_INT.match(text)
    if m is None:
        raise UnparseablePainError(f"no leading integer in pain text {text!r}")
    value = int(m.group(1))
    if value > 10:
        raise UnparseablePainError(f"pain {value} outside 0..10 in {text!r}")
    return value


def _event_value(ev: RawEvent) -> float:
    """Numeric value of an event; raises ValueError when unusable."""
    if ev.channel is Channel.PAIN_TEXT:
        return float(parse_pain_text(str(ev.value)))
    v = float(ev.value)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {ev.value!r}")
    if ev.channel is Channel.PAIN_NUMERIC and not 0 <= v <= 10:
        raise UnparseablePainError(f"pain {v} outside [0, 10]")
    if ev.channel in (Channel.MORPHINE, Channel.COANALGESIC) and v < 0:
        raise ValueError(f"negative dose {v}")
    if ev.channel in (Channel.HEART_RATE, Channel.RESP_RATE) and v <= 0:
        raise ValueError(f"non-positive vital {v}")
    return v


def aggregate_hourly(
    events: Sequence[RawEvent],
    coanalgesics: Sequence[str] = COANALGESICS,
    stats: IngestStats | None = None,
) -> list[HourlyRecord]:
    """Bin one admission's events into consecutive one-hour records.

    Pain and vitals are averaged within a window, doses are summed. Hours
    with no reading for a mean channel are left as None.
    """
    if not events:
        raise EmptyEpisodeError("no events")
    ids = {ev.admission_id for ev in events}
    if len(ids) != 1:
        raise ValueError(f"events span several admissions: {sorted(ids)}")
    stats = stats if stats is not None else IngestStats()
    drug_pos = {name: i for i, name in enumerate(coanalgesics)}

    anchor = min(ev.timestamp for ev in events).replace(minute=0, second=0, microsecond=0)
    values: dict[int, dict[str, list[float]]] = {}
    for ev in events:
        try:
            v = _event_value(ev)
        except (ValueError, TypeError):
            stats.drop(f"bad_value:{ev.channel.value}")
            continue
        if ev.channel is Channel.COANALGESIC and ev.drug_name not in drug_pos:
            stats.drop("unknown_drug")
            continue
        hour = int((ev.timestamp - anchor) // timedelta(hours=1))
        bucket = values.setdefault(hour, {})
        if ev.channel in (Channel.PAIN_NUMERIC, Channel.PAIN_TEXT):
            key = "pain"
        elif ev.channel is Channel.HEART_RATE:
            key = "hr"
        elif ev.channel is Channel.RESP_RATE:
            key = "rr"
        elif ev.channel is Channel.MORPHINE:
            key = "morphine"
        else:
            key = ev.drug_name
        bucket.setdefault(key, []).append(v)

    if not values:
        raise EmptyEpisodeError(f"{ids.pop()}: every event was dropped")

    def mean(xs):
        return math.fsum(xs) / len(xs) if xs else None

    records = []
    for h in range(max(values) + 1):
        b = values.get(h, {})
        records.append(
            HourlyRecord(
                hour_index=h,
                pain=mean(b.get("pain")),
                hr=mean(b.get("hr")),
                rr=mean(b.get("rr")),
                morphine_mg=math.fsum(b.get("morphine", ())),
                coanalgesics_mg=tuple(math.fsum(b.get(name, ())) for name in coanalgesics),
            )
        )
    return records


def impute(records: Sequence[HourlyRecord], cohort_defaults: dict[str, float] | None = None) -> list[HourlyRecord]:
    """Sample-and-hold each mean channel; hours before a channel's first
    reading get the cohort default for that channel."""
    if not records:
        raise EmptyEpisodeError("no records to impute")
    defaults = {**DEFAULT_IMPUTE, **(cohort_defaults or {})}
    held = {ch: defaults[ch] for ch in MEAN_CHANNELS}
    out = []
    for r in records:
        filled = {}
        for ch in MEAN_CHANNELS:
            v = getattr(r, ch)
            if v is None:
                v = held[ch]
            held[ch] = v
            filled[ch] = v
        out.append(
            HourlyRecord(r.hour_index, filled["pain"], filled["hr"], filled["rr"], r.morphine_mg, r.coanalgesics_mg)
        )
    return out


def cohort_defaults(episodes: Iterable[EpisodeLog]) -> dict[str, float]:
    """Median of every observed value per mean channel across the cohort."""
    seen: dict[str, list[float]] = {ch: [] for ch in MEAN_CHANNELS}
    for ep in episodes:
        for r in ep.records:
            for ch in MEAN_CHANNELS:
                v = getattr(r, ch)
                if v is not None:
                    seen[ch].append(v)
    return {ch: statistics.median(xs) if xs else DEFAULT_IMPUTE[ch] for ch, xs in seen.items()}


def split_sizes(n: int, fractions: Sequence[float] = (0.7, 0.2, 0.1)) -> tuple[int, int, int]:
    """Floor allocation for validation and test; the remainder goes to train."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    # the 1e-9 guards products like 0.1 * 30 = 3.0000000000000004 from the other side
    n_val = math.floor(n * fractions[1] + 1e-9)
    n_test = math.floor(n * fractions[2] + 1e-9)
    return n - n_val - n_test, n_val, n_test


def split_cohort(
    episodes: Sequence[EpisodeLog], fractions: Sequence[float] = (0.7, 0.2, 0.1), seed: int = 0
) -> tuple[list[EpisodeLog], list[EpisodeLog], list[EpisodeLog]]:
    if len(episodes) < 10:
        raise InsufficientDataError(f"need at least 10 episodes to split, got {len(episodes)}")
    n_train, n_val, _ = split_sizes(len(episodes), fractions)
    order = np.random.default_rng(seed).permutation(len(episodes))
    shuffled = [episodes[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# -- file formats ---------------------------------------------------------


def parse_events(text: str, stats: IngestStats | None = None) -> dict[str, list[RawEvent]]:
    """Group the rows of an event CSV by admission, keeping file order."""
    stats = stats if stats is not None else IngestStats()
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {EVENTS_FORMAT}":
        raise FormatError(f"missing '# {EVENTS_FORMAT}' header line")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != EVENT_COLUMNS:
        raise FormatError(f"expected columns {','.join(EVENT_COLUMNS)}, got {header}")
    by_admission: dict[str, list[RawEvent]] = {}
    for row in reader:
        if not row:
            continue
        stats.events_read += 1
        if len(row) != 5:
            stats.drop("malformed_row")
            continue
        adm, ts, channel, drug, value = (x.strip() for x in row)
        try:
            when = datetime.fromisoformat(ts)
        except ValueError:
            stats.drop("bad_timestamp")
            continue
        try:
            ch = Channel(channel)
        except ValueError:
            stats.drop("unknown_channel")
            continue
        by_admission.setdefault(adm, []).append(RawEvent(adm, when, ch, value, drug.lower()))
    return by_admission


def read_events(path: str | Path, stats: IngestStats | None = None) -> dict[str, list[RawEvent]]:
    return parse_events(Path(path).read_text(), stats)


def format_events(events: Iterable[RawEvent]) -> str:
    buf = io.StringIO()
    buf.write(f"# {EVENTS_FORMAT}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for ev in events:
        w.writerow([ev.admission_id, ev.timestamp.isoformat(timespec="minutes"), ev.channel.value, ev.drug_name, ev.value])
    return buf.getvalue()


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def format_episode(ep: EpisodeLog, coanalgesics: Sequence[str] = COANALGESICS) -> str:
    """One HourlyRecord per line; missing mean-channel values are empty."""
    lines = [
        f"# {EPISODE_FORMAT}",
        f"# admission_id={ep.admission_id}",
        ",".join(("hour", "pain", "hr", "rr", "morphine_mg", *coanalgesics)),
    ]
    for r in ep.records:
        lines.append(
            ",".join(
                [str(r.hour_index), _fmt(r.pain), _fmt(r.hr), _fmt(r.rr), _fmt(r.morphine_mg)]
                + [_fmt(x) for x in r.coanalgesics_mg]
            )
        )
    return "\n".join(lines) + "\n"


def parse_episode(text: str) -> EpisodeLog:
    lines = text.splitlines()
    if len(lines) < 3 or lines[0] != f"# {EPISODE_FORMAT}" or not lines[1].startswith("# admission_id="):
        raise FormatError(f"not a '{EPISODE_FORMAT}' file")
    adm = lines[1][len("# admission_id="):]
    cols = lines[2].split(",")
    if len(cols) != 21:
        raise FormatError(f"expected 21 columns, got {len(cols)}")
    records = []
    for line in lines[3:]:
        f = line.split(",")
        opt = [float(x) if x else None for x in f[1:4]]
        records.append(HourlyRecord(int(f[0]), *opt, float(f[4]), tuple(float(x) for x in f[5:])))
    return EpisodeLog(adm, records)


def write_episode(path: str | Path, ep: EpisodeLog) -> None:
    Path(path).write_text(format_episode(ep))


def read_episode(path: str | Path) -> EpisodeLog:
    return parse_episode(Path(path).read_text())


def episode_filename(admission_id: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", admission_id)
    return f"{safe}.episode.csv"


def read_events_path(path: str | Path, stats: IngestStats | None = None) -> dict[str, list[RawEvent]]:
    """Events from one CSV file or every ``*.csv`` in a directory (sorted)."""
    path = Path(path)
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    merged: dict[str, list[RawEvent]] = {}
    for f in files:
        for adm, evs in read_events(f, stats).items():
            merged.setdefault(adm, []).extend(evs)
    return merged


def read_episode_dir(directory: str | Path) -> list[EpisodeLog]:
    """All episode files in a directory, sorted by admission id."""
    eps = [read_episode(p) for p in sorted(Path(directory).glob("*.episode.csv"))]
    return sorted(eps, key=lambda e: e.admission_id)


def ingest_events(
    by_admission: dict[str, list[RawEvent]],
    defaults: dict[str, float] | str | None = None,
    stats: IngestStats | None = None,
    coanalgesics: Sequence[str] = COANALGESICS,
) -> list[EpisodeLog]:
    """Aggregate and impute every admission, sorted by admission id.

    ``defaults="cohort"`` fills leading gaps with cohort medians computed in a
    first pass over the aggregated records. Admissions left with no usable
    events are counted under ``empty_episode`` and skipped.
    """
    stats = stats if stats is not None else IngestStats()
    raw = []
    for adm in sorted(by_admission):
        try:
            raw.append(EpisodeLog(adm, aggregate_hourly(by_admission[adm], coanalgesics, stats)))
        except EmptyEpisodeError:
            stats.drop("empty_episode")
    if defaults == "cohort":
        defaults = cohort_defaults(raw)
    return [EpisodeLog(ep.admission_id, impute(ep.records, defaults)) for ep in raw]
