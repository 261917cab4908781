"""Cohort selection, event matching, episode assembly, per-task sample
extraction, and a deterministic synthetic cohort generator.

Input tables are plain CSV (stays.csv, events.csv, optional phenotypes.csv
with precomputed label columns); the variable dictionary is JSON. All
timestamps are ISO-8601 UTC. The pipeline itself is deterministic: no
randomness outside the seeded generator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from .metrics import los_bucket


class PipelineError(Exception):
    pass


class SchemaError(PipelineError):
    """A row or value violates the declared schema."""


# ---------------------------------------------------------------------------
# variable dictionary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariableSpec:
    name: str
    kind: str  # "continuous" | "categorical"
    normal_value: float | str
    categories: tuple[str, ...] = ()
    plausible_range: tuple[float, float] | None = None
    mean: float | None = None
    std: float | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("continuous", "categorical"):
            raise SchemaError(f"variable {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == "categorical":
            if not self.categories:
                raise SchemaError(f"categorical variable {self.name!r} "
                                  f"has no categories")
            if str(self.normal_value) not in self.categories:
                raise SchemaError(f"variable {self.name!r}: normal value "
                                  f"{self.normal_value!r} not a category")
        else:
            if self.std is not None and self.std <= 0:
                raise SchemaError(f"variable {self.name!r}: std must be positive")

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1


class VariableDictionary:
    """Ordered variable definitions; fixes the one-hot layout of episodes."""

    def __init__(self, entries, name: str = "custom") -> None:
        self.entries: list[VariableSpec] = list(entries)
        self.name = name
        seen = set()
        for e in self.entries:
            if e.name in seen:
                raise SchemaError(f"duplicate variable name {e.name!r}")
            seen.add(e.name)
        self.index = {e.name: i for i, e in enumerate(self.entries)}
        self.columns: list[str] = []
        self.slices: dict[str, slice] = {}
        for e in self.entries:
            start = len(self.columns)
            if e.kind == "categorical":
                self.columns.extend(f"{e.name}={c}" for c in e.categories)
            else:
                self.columns.append(e.name)
            self.slices[e.name] = slice(start, len(self.columns))

    @property
    def d(self) -> int:
        return len(self.columns)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def spec(self, name: str) -> VariableSpec:
        try:
            return self.entries[self.index[name]]
        except KeyError:
            raise SchemaError(f"unknown variable name {name!r}") from None

    @classmethod
    def from_json_dict(cls, payload: dict) -> "VariableDictionary":
        entries = []
        for raw in payload["entries"]:
            entries.append(VariableSpec(
                name=raw["name"],
                kind=raw["kind"],
                normal_value=raw["normal_value"],
                categories=tuple(raw.get("categories", ())),
                plausible_range=(tuple(raw["plausible_range"])
                                 if raw.get("plausible_range") else None),
                mean=raw.get("mean"),
                std=raw.get("std"),
            ))
        return cls(entries, name=payload.get("name", "custom"))

    @classmethod
    def from_json(cls, path) -> "VariableDictionary":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def load_dictionary(spec: str) -> VariableDictionary:
    """Load a dictionary by builtin alias ("24" or "155") or file path."""
    if spec in ("24", "155"):
        data = resources.files("tscan.data").joinpath(f"variables_{spec}.json")
        return VariableDictionary.from_json_dict(json.loads(data.read_text()))
    return VariableDictionary.from_json(spec)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

UTC = timezone.utc


def parse_timestamp(text: str) -> datetime:
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError as exc:
        raise SchemaError(f"bad timestamp {text!r}: {exc}") from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=UTC)
    return ts.astimezone(UTC)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(UTC).isoformat()


@dataclass(frozen=True)
class StayRecord:
    subject_id: int
    hadm_id: int
    icustay_id: int
    age_years: float
    intime: datetime
    outtime: datetime
    transfers: int
    mortality_in_hospital: bool
    deathtime: datetime | None = None

    def __post_init__(self) -> None:
        if self.outtime < self.intime:
            raise SchemaError(f"stay {self.icustay_id}: outtime before intime")
        if self.mortality_in_hospital != (self.deathtime is not None):
            raise SchemaError(f"stay {self.icustay_id}: deathtime must be present "
                              f"iff the mortality flag is set")

    @property
    def los_hours(self) -> float:
        return (self.outtime - self.intime).total_seconds() / 3600.0


@dataclass(frozen=True)
class EventRecord:
    subject_id: int
    hadm_id: int | None
    icustay_id: int | None
    charttime: datetime
    variable: str
    value: float | str


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

STAYS_HEADER = ["subject_id", "hadm_id", "icustay_id", "age", "intime",
                "outtime", "transfers", "mortality", "deathtime"]
EVENTS_HEADER = ["subject_id", "hadm_id", "icustay_id", "charttime",
                 "variable", "value"]


def read_stays_csv(path) -> list[StayRecord]:
    stays = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line_no, row in enumerate(reader, start=2):
            try:
                deathtime = (parse_timestamp(row["deathtime"])
                             if row.get("deathtime") else None)
                stays.append(StayRecord(
                    subject_id=int(row["subject_id"]),
                    hadm_id=int(row["hadm_id"]),
                    icustay_id=int(row["icustay_id"]),
                    age_years=float(row["age"]),
                    intime=parse_timestamp(row["intime"]),
                    outtime=parse_timestamp(row["outtime"]),
                    transfers=int(row["transfers"]),
                    mortality_in_hospital=row["mortality"].strip() in ("1", "true", "True"),
                    deathtime=deathtime,
                ))
            except (SchemaError, KeyError, ValueError) as exc:
                raise SchemaError(f"stays.csv row {line_no}: {exc}") from None
    return stays


def write_stays_csv(stays, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STAYS_HEADER)
        for s in stays:
            writer.writerow([
                s.subject_id, s.hadm_id, s.icustay_id, repr(float(s.age_years)),
                format_timestamp(s.intime), format_timestamp(s.outtime),
                s.transfers, int(s.mortality_in_hospital),
                format_timestamp(s.deathtime) if s.deathtime else "",
            ])


def read_events_csv(path) -> list[EventRecord]:
    events = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for line_no, row in enumerate(reader, start=2):
            try:
                events.append(EventRecord(
                    subject_id=int(row["subject_id"]),
                    hadm_id=int(row["hadm_id"]) if row.get("hadm_id") else None,
                    icustay_id=(int(row["icustay_id"])
                                if row.get("icustay_id") else None),
                    charttime=parse_timestamp(row["charttime"]),
                    variable=row["variable"],
                    value=row["value"],
                ))
            except (SchemaError, KeyError, ValueError) as exc:
                raise SchemaError(f"events.csv row {line_no}: {exc}") from None
    return events


def write_events_csv(events, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVENTS_HEADER)
        for e in events:
            writer.writerow([
                e.subject_id,
                e.hadm_id if e.hadm_id is not None else "",
                e.icustay_id if e.icustay_id is not None else "",
                format_timestamp(e.charttime), e.variable, e.value,
            ])


def read_phenotypes_csv(path) -> dict[int, np.ndarray]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = [c for c in reader.fieldnames if c != "icustay_id"]
        for row in reader:
            out[int(row["icustay_id"])] = np.array([int(row[c]) for c in names],
                                                   dtype=np.int64)
    return out


def write_phenotypes_csv(phenotypes: dict[int, np.ndarray], names, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["icustay_id", *names])
        for icustay_id in sorted(phenotypes):
            writer.writerow([icustay_id, *map(int, phenotypes[icustay_id])])


# ---------------------------------------------------------------------------
# stage 1: stay filtering
# ---------------------------------------------------------------------------

@dataclass
class FilterResult:
    stays: list[StayRecord]
    dropped: dict[str, int]


def filter_stays(stays) -> FilterResult:
    """Keep adult, single-stay, non-transferred stays.

    Drop reasons are disjoint and assigned in order: minor, multiple
    stays for the subject, transfers. Output is ordered by
    (subject_id, intime).
    """
    stays = list(stays)
    stay_counts: dict[int, int] = {}
    for s in stays:
        stay_counts[s.subject_id] = stay_counts.get(s.subject_id, 0) + 1
    kept = []
    dropped = {"minor": 0, "multi_stay": 0, "transferred": 0}
    for s in stays:
        if s.age_years <= 18:
            dropped["minor"] += 1
        elif stay_counts[s.subject_id] > 1:
            dropped["multi_stay"] += 1
        elif s.transfers > 0:
            dropped["transferred"] += 1
        else:
            kept.append(s)
    kept.sort(key=lambda s: (s.subject_id, s.intime))
    return FilterResult(stays=kept, dropped=dropped)


# ---------------------------------------------------------------------------
# stage 2: event matching
# ---------------------------------------------------------------------------

@dataclass
class MatchResult:
    events: list[EventRecord]
    dropped: dict[str, int]
    recovered: int


def match_events(events, stays) -> MatchResult:
    """Keep events that can be tied to a known stay.

    Events without an admission id are dropped; unknown admission ids are
    dropped; a missing stay id is recovered when the admission maps to
    exactly one stay; events whose stay id is unknown (or inconsistent
    with the admission) are dropped. Drop reasons are disjoint and
    kept + dropped equals the input count.
    """
    by_hadm: dict[int, list[StayRecord]] = {}
    stay_hadm: dict[int, int] = {}
    for s in stays:
        by_hadm.setdefault(s.hadm_id, []).append(s)
        stay_hadm[s.icustay_id] = s.hadm_id
    kept = []
    dropped = {"no_hadm": 0, "unknown_hadm": 0, "unknown_stay": 0}
    recovered = 0
    for e in events:
        if e.hadm_id is None:
            dropped["no_hadm"] += 1
            continue
        candidates = by_hadm.get(e.hadm_id)
        if candidates is None:
            dropped["unknown_hadm"] += 1
            continue
        if e.icustay_id is None:
            if len(candidates) == 1:
                e = replace(e, icustay_id=candidates[0].icustay_id)
                recovered += 1
            else:
                dropped["unknown_stay"] += 1
                continue
        if stay_hadm.get(e.icustay_id) != e.hadm_id:
            dropped["unknown_stay"] += 1
            continue
        kept.append(e)
    return MatchResult(events=kept, dropped=dropped, recovered=recovered)


# ---------------------------------------------------------------------------
# stage 3: episode assembly
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    icustay_id: int
    subject_id: int
    matrix: np.ndarray  # (hours, d) imputed, z-normalized, one-hot
    mask: np.ndarray    # (hours, d) raw observation flags, group-marked
    los_hours: float
    labels: dict
    stats: dict = field(default_factory=dict)

    @property
    def n_hours(self) -> int:
        return self.matrix.shape[0]


def assemble_episode(events, vdict: VariableDictionary, stay: StayRecord,
                     phenotype: np.ndarray | None = None) -> Episode:
    """Build the hourly grid for one stay.

    Events land in 1-hour bins from intime; per bin and variable the
    latest observation wins, then continuous winners outside the plausible
    range are discarded as outliers. Gaps are forward-filled, remaining
    leading gaps take the dictionary's normal value, continuous columns
    are z-normalized by the dictionary statistics, and categoricals are
    one-hot encoded. The mask records raw observation presence.
    """
    n_hours = max(1, math.ceil(stay.los_hours))
    n_vars = len(vdict)
    win_time = np.full((n_hours, n_vars), -np.inf)
    cont = np.full((n_hours, n_vars), np.nan)
    cat = np.full((n_hours, n_vars), -1, dtype=np.int64)
    stats = {"events": 0, "out_of_window": 0, "outliers": 0}

    for e in events:
        if e.icustay_id != stay.icustay_id:
            raise PipelineError(f"event for stay {e.icustay_id} passed to "
                                f"assembly of stay {stay.icustay_id}")
        stats["events"] += 1
        spec = vdict.spec(e.variable)
        j = vdict.index[e.variable]
        offset = (e.charttime - stay.intime).total_seconds() / 3600.0
        h = math.floor(offset)
        if h < 0 or h >= n_hours:
            stats["out_of_window"] += 1
            continue
        t_key = offset
        if t_key < win_time[h, j]:
            continue
        win_time[h, j] = t_key
        if spec.kind == "continuous":
            try:
                cont[h, j] = float(e.value)
            except ValueError:
                raise SchemaError(f"variable {e.variable!r}: value {e.value!r} "
                                  f"is not numeric") from None
            cat[h, j] = 0
        else:
            token = str(e.value)
            if token not in spec.categories:
                raise SchemaError(f"variable {e.variable!r}: unknown category "
                                  f"token {token!r}")
            cat[h, j] = spec.categories.index(token)

    observed = np.isfinite(win_time)
    for j, spec in enumerate(vdict.entries):
        if spec.kind != "continuous" or spec.plausible_range is None:
            continue
        lo, hi = spec.plausible_range
        col = cont[:, j]
        bad = observed[:, j] & ((col < lo) | (col > hi))
        stats["outliers"] += int(bad.sum())
        observed[bad, j] = False

    matrix = np.zeros((n_hours, vdict.d))
    mask = np.zeros((n_hours, vdict.d))
    for j, spec in enumerate(vdict.entries):
        sl = vdict.slices[spec.name]
        obs_col = observed[:, j]
        mask[:, sl] = obs_col[:, None]
        if spec.kind == "continuous":
            filled = _forward_fill(cont[:, j], obs_col, float(spec.normal_value))
            mu = spec.mean if spec.mean is not None else float(spec.normal_value)
            sd = spec.std if spec.std is not None else 1.0
            matrix[:, sl.start] = (filled - mu) / sd
        else:
            idx = _forward_fill_int(cat[:, j], obs_col,
                                    spec.categories.index(str(spec.normal_value)))
            matrix[np.arange(n_hours), sl.start + idx] = 1.0

    labels = {
        "mortality": int(stay.mortality_in_hospital),
        "death_hour": ((stay.deathtime - stay.intime).total_seconds() / 3600.0
                       if stay.deathtime else None),
        "phenotype": (np.asarray(phenotype, dtype=np.int64)
                      if phenotype is not None else None),
    }
    return Episode(icustay_id=stay.icustay_id, subject_id=stay.subject_id,
                   matrix=matrix, mask=mask, los_hours=stay.los_hours,
                   labels=labels, stats=stats)


def _forward_fill(values: np.ndarray, observed: np.ndarray,
                  default: float) -> np.ndarray:
    out = np.empty_like(values)
    last = default
    for h in range(values.size):
        if observed[h]:
            last = values[h]
        out[h] = last
    return out


def _forward_fill_int(values: np.ndarray, observed: np.ndarray,
                      default: int) -> np.ndarray:
    out = np.empty_like(values)
    last = default
    for h in range(values.size):
        if observed[h]:
            last = values[h]
        out[h] = last
    return out


# ---------------------------------------------------------------------------
# stage 4: per-task sample extraction
# ---------------------------------------------------------------------------

DEFAULT_T = {"ihm": 48, "los": 320, "decompensation": 320, "phenotype": 320}
DEFAULT_STRIDE = {"los": 12, "decompensation": 1}
TASK_START_HOUR = 4
IHM_PREDICTION_HOUR = 48
DECOMP_WINDOW_HOURS = 24.0


@dataclass
class Sample:
    """One (t x d) window plus its label, the unit of training."""

    x: np.ndarray
    y: int | np.ndarray
    prediction_time: float
    icustay_id: int
    subject_id: int
    remaining_hours: float | None = None


def sample_window(matrix: np.ndarray, end_hour: int, t: int) -> np.ndarray:
    """The last t hourly rows before ``end_hour``, zero-padded at the front."""
    end = int(end_hour)
    if end < 0 or end > matrix.shape[0]:
        raise ValueError(f"end hour {end} outside episode of "
                         f"{matrix.shape[0]} hours")
    window = matrix[max(0, end - t):end]
    if window.shape[0] < t:
        pad = np.zeros((t - window.shape[0], matrix.shape[1]))
        window = np.concatenate([pad, window], axis=0)
    return window


def extract_samples(episode: Episode, task: str, t: int | None = None,
                    stride: int | None = None) -> list[Sample]:
    """Cut task-specific prediction windows out of one episode.

    ihm: one sample at hour 48, stays shorter than 48h excluded.
    los: samples every ``stride`` hours from hour 4 until discharge/death,
    labeled with the remaining-stay bucket. decompensation: hourly samples
    from hour 4, labeled with death within the next 24 hours. phenotype:
    one sample at stay end, padded/truncated to t.
    """
    t = DEFAULT_T[task] if t is None else t
    stride = DEFAULT_STRIDE.get(task, 1) if stride is None else stride
    if t <= 0 or stride <= 0:
        raise ValueError(f"t and stride must be positive, got t={t} "
                         f"stride={stride}")
    common = {"icustay_id": episode.icustay_id, "subject_id": episode.subject_id}
    death_hour = episode.labels.get("death_hour")
    samples: list[Sample] = []
    if task == "ihm":
        if episode.los_hours < IHM_PREDICTION_HOUR:
            return []
        x = sample_window(episode.matrix, IHM_PREDICTION_HOUR, t)
        samples.append(Sample(x=x, y=episode.labels["mortality"],
                              prediction_time=float(IHM_PREDICTION_HOUR),
                              **common))
    elif task == "los":
        hour = TASK_START_HOUR
        while hour < episode.los_hours:
            remaining = episode.los_hours - hour
            samples.append(Sample(x=sample_window(episode.matrix, hour, t),
                                  y=los_bucket(remaining),
                                  prediction_time=float(hour),
                                  remaining_hours=remaining, **common))
            hour += stride
    elif task == "decompensation":
        hour = TASK_START_HOUR
        while hour < episode.los_hours:
            label = int(death_hour is not None
                        and hour <= death_hour <= hour + DECOMP_WINDOW_HOURS)
            samples.append(Sample(x=sample_window(episode.matrix, hour, t),
                                  y=label, prediction_time=float(hour), **common))
            hour += stride
    elif task == "phenotype":
        phenotype = episode.labels.get("phenotype")
        if phenotype is None:
            raise PipelineError(f"stay {episode.icustay_id}: phenotype task "
                                f"needs phenotype label columns")
        x = sample_window(episode.matrix, episode.n_hours, t)
        samples.append(Sample(x=x, y=phenotype,
                              prediction_time=episode.los_hours, **common))
    else:
        raise ValueError(f"unknown task {task!r}")
    return samples


# ---------------------------------------------------------------------------
# patient-level splitting
# ---------------------------------------------------------------------------

def split_patients(subject_ids, seed: int, test_frac: float = 0.15,
                   val_frac: float = 0.15,
                   labels: dict[int, int] | None = None) -> dict[str, list[int]]:
    """Deterministic patient-level train/val/test split.

    ``test_frac`` of patients are held out, then ``val_frac`` of the
    remainder form the validation set. When per-subject labels are given,
    both held-out sets are drawn per label group so small cohorts keep
    both classes where possible.
    """
    subjects = sorted(set(subject_ids))
    rng = np.random.default_rng(seed)

    def draw(pool: list[int], frac: float) -> list[int]:
        if labels is None:
            pool = list(pool)
            rng.shuffle(pool)
            k = int(round(len(pool) * frac))
            return sorted(pool[:k])
        groups: dict[int, list[int]] = {}
        for s in pool:
            groups.setdefault(labels.get(s, 0), []).append(s)
        picked: list[int] = []
        for g in sorted(groups):
            members = groups[g]
            rng.shuffle(members)
            k = int(round(len(members) * frac))
            if frac > 0 and k == 0 and len(members) > 1:
                k = 1
            picked.extend(members[:k])
        return sorted(picked)

    test = draw(subjects, test_frac)
    train_pool = [s for s in subjects if s not in set(test)]
    val = draw(train_pool, val_frac)
    train = [s for s in train_pool if s not in set(val)]
    return {"train": train, "val": val, "test": test}


# ---------------------------------------------------------------------------
# synthetic cohort generator
# ---------------------------------------------------------------------------

PHENOTYPE_NAMES = (
    "Acute and unspecified renal failure", "Acute cerebrovascular disease",
    "Acute myocardial infarction", "Cardiac dysrhythmias",
    "Chronic kidney disease", "Chronic obstructive pulmonary disease",
    "Complications of surgical/medical care", "Conduction disorders",
    "Congestive heart failure; nonhypertensive",
    "Coronary atherosclerosis and related",
    "Diabetes mellitus with complications",
    "Diabetes mellitus without complication",
    "Disorders of lipid metabolism", "Essential hypertension",
    "Fluid and electrolyte disorders", "Gastrointestinal hemorrhage",
    "Hypertension with complications", "Other liver diseases",
    "Other lower respiratory disease", "Other upper respiratory disease",
    "Pleurisy; pneumothorax; pulmonary collapse", "Pneumonia",
    "Respiratory failure; insufficiency; arrest",
    "Septicemia (except in labor)", "Shock",
)

# Planted trajectories: value = base + coeff * severity * ramp(hour) + noise,
# where ramp saturates at hour 48. Deceased patients have high severity, so
# late-window vitals separate the classes by construction.
SIGNAL_PROFILES = {
    "Heart Rate": (75.0, 45.0, 4.0),
    "Systolic blood pressure": (125.0, -50.0, 6.0),
    "Mean blood pressure": (88.0, -35.0, 5.0),
    "Diastolic blood pressure": (68.0, -25.0, 5.0),
    "Oxygen saturation": (97.5, -9.0, 1.2),
    "Respiratory rate": (16.0, 14.0, 2.0),
    "Temperature": (36.8, 1.6, 0.3),
}

# Worst-first index ramp for ordinal categoricals: best category at no
# severity, sliding toward the worst as severity * ramp grows.
_GCS_SIGNAL = {
    "Glascow coma scale eye opening": 3,
    "Glascow coma scale motor response": 5,
    "Glascow coma scale verbal response": 4,
    "Glascow coma scale total": 12,
}

VITAL_NAMES = set(SIGNAL_PROFILES) | set(_GCS_SIGNAL) | {"Capillary refill rate"}

MORTALITY_SEVERITY_THRESHOLD = 0.6

# Per-phenotype (base rate, severity lift); severe conditions ride severity.
_PHENO_BASE = 0.12
_PHENO_SEVERITY_LIFT = {
    "Shock": 0.65, "Septicemia (except in labor)": 0.6,
    "Respiratory failure; insufficiency; arrest": 0.55,
    "Acute and unspecified renal failure": 0.5,
    "Fluid and electrolyte disorders": 0.4, "Pneumonia": 0.35,
}


@dataclass
class SynthCohort:
    stays: list[StayRecord]
    events: list[EventRecord]
    phenotypes: dict[int, np.ndarray]


def synth_cohort(seed: int, n_patients: int,
                 vdict: VariableDictionary) -> SynthCohort:
    """Generate stays and events with a planted, documented signal.

    A latent severity in [0, 1] drives selected vitals up or down over the
    first 48 hours, decides mortality (severity above
    ``MORTALITY_SEVERITY_THRESHOLD``), stretches the stay length, and
    lifts the severe phenotype rates, so models can provably learn.
    Deterministic under the seed.
    """
    if n_patients < 1:
        raise ValueError(f"n_patients must be >= 1, got {n_patients}")
    rng = np.random.default_rng(seed)
    base_time = datetime(2140, 1, 1, tzinfo=UTC)
    stays: list[StayRecord] = []
    events: list[EventRecord] = []
    phenotypes: dict[int, np.ndarray] = {}
    for i in range(n_patients):
        severity = float(rng.uniform())
        deceased = severity > MORTALITY_SEVERITY_THRESHOLD
        if rng.uniform() < 0.05:
            los = float(rng.uniform(26.0, 46.0))
        else:
            los = float(np.clip(58.0 + 190.0 * severity + rng.normal(0.0, 10.0),
                                50.0, 500.0))
        subject_id, hadm_id, icustay_id = 1000 + i, 5000 + i, 9000 + i
        intime = base_time + timedelta(hours=13 * i)
        outtime = intime + timedelta(hours=los)
        stays.append(StayRecord(
            subject_id=subject_id, hadm_id=hadm_id, icustay_id=icustay_id,
            age_years=round(float(rng.uniform(19.0, 92.0)), 1),
            intime=intime, outtime=outtime, transfers=0,
            mortality_in_hospital=deceased,
            deathtime=outtime if deceased else None,
        ))
        events.extend(_patient_events(rng, vdict, subject_id, hadm_id,
                                      icustay_id, intime, los, severity))
        phenotypes[icustay_id] = _patient_phenotypes(rng, severity)
    events.sort(key=lambda e: (e.subject_id, e.charttime, e.variable))
    return SynthCohort(stays=stays, events=events, phenotypes=phenotypes)


def _patient_events(rng, vdict, subject_id, hadm_id, icustay_id, intime,
                    los, severity):
    n_hours = math.ceil(los)
    ramp = np.minimum(1.0, np.arange(n_hours) / 48.0)
    out = []
    for spec in vdict.entries:
        p_obs = 0.85 if spec.name in VITAL_NAMES else 0.2
        seen = rng.random(n_hours) < p_obs
        offsets = rng.integers(0, 3600, size=n_hours)
        noise = rng.normal(0.0, 1.0, size=n_hours)
        coin = rng.random(n_hours)
        for h in np.nonzero(seen)[0]:
            h = int(h)
            charttime = intime + timedelta(hours=h, seconds=int(offsets[h]))
            value = _draw_value(spec, severity, float(ramp[h]),
                                float(noise[h]), float(coin[h]))
            out.append(EventRecord(subject_id=subject_id, hadm_id=hadm_id,
                                   icustay_id=icustay_id, charttime=charttime,
                                   variable=spec.name, value=value))
    return out


def _draw_value(spec: VariableSpec, severity: float, ramp: float,
                noise: float, coin: float) -> str:
    if spec.name == "Capillary refill rate":
        return spec.categories[1 if coin < 0.85 * severity * ramp else 0]
    if spec.name in _GCS_SIGNAL and spec.kind == "categorical":
        top = len(spec.categories) - 1
        drop = _GCS_SIGNAL[spec.name]
        idx = int(np.clip(round(top - drop * severity * ramp + 0.4 * noise),
                          0, top))
        return spec.categories[idx]
    if spec.kind == "categorical":
        idx = int(np.clip(round((len(spec.categories) - 1) * coin), 0,
                          len(spec.categories) - 1))
        return spec.categories[idx]
    if spec.name in SIGNAL_PROFILES:
        base, coeff, sd = SIGNAL_PROFILES[spec.name]
        value = base + coeff * severity * ramp + sd * noise
    else:
        mu = spec.mean if spec.mean is not None else float(spec.normal_value)
        sd = spec.std if spec.std is not None else 1.0
        value = mu + sd * noise
    if spec.plausible_range is not None:
        value = float(np.clip(value, *spec.plausible_range))
    return repr(round(float(value), 2))


def _patient_phenotypes(rng, severity: float) -> np.ndarray:
    labels = np.zeros(len(PHENOTYPE_NAMES), dtype=np.int64)
    for k, name in enumerate(PHENOTYPE_NAMES):
        p = _PHENO_BASE + _PHENO_SEVERITY_LIFT.get(name, 0.0) * severity
        labels[k] = int(rng.uniform() < min(p, 0.95))
    return labels


# ---------------------------------------------------------------------------
# prepared-dataset persistence
# ---------------------------------------------------------------------------

def write_episode_csv(episode: Episode, columns, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["hour", *columns, *[f"mask:{c}" for c in columns]])
        for h in range(episode.n_hours):
            writer.writerow([h, *[repr(float(v)) for v in episode.matrix[h]],
                             *[int(v) for v in episode.mask[h]]])


def read_episode_csv(path, d: int) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            rows.append([float(v) for v in row[1:]])
    grid = np.asarray(rows, dtype=np.float64)
    return grid[:, :d], grid[:, d:]


def prepare_dataset(stays, events, phenotypes, vdict: VariableDictionary,
                    task: str, out_dir, t: int | None = None,
                    stride: int | None = None, split_seed: int = 0,
                    jobs: int = 1) -> dict:
    """Run filter, match, assemble, and extract; persist episodes and the
    sample index under ``out_dir`` and return the manifest."""
    t = DEFAULT_T[task] if t is None else t
    stride = DEFAULT_STRIDE.get(task, 1) if stride is None else stride
    out_dir = Path(out_dir)
    episodes_dir = out_dir / "episodes"
    episodes_dir.mkdir(parents=True, exist_ok=True)

    filtered = filter_stays(stays)
    matched = match_events(events, filtered.stays)
    by_stay: dict[int, list[EventRecord]] = {}
    for e in matched.events:
        by_stay.setdefault(e.icustay_id, []).append(e)

    def build(stay: StayRecord) -> Episode:
        return assemble_episode(by_stay.get(stay.icustay_id, ()), vdict, stay,
                                phenotype=phenotypes.get(stay.icustay_id)
                                if phenotypes else None)

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            episodes = list(pool.map(build, filtered.stays))
    else:
        episodes = [build(s) for s in filtered.stays]

    sample_index = []
    stay_meta = {}
    mortality_by_subject: dict[int, int] = {}
    assembly = {"events": 0, "out_of_window": 0, "outliers": 0}
    for stay, episode in zip(filtered.stays, episodes):
        write_episode_csv(episode, vdict.columns,
                          episodes_dir / f"{episode.icustay_id}.csv")
        for key in assembly:
            assembly[key] += episode.stats[key]
        stay_meta[str(episode.icustay_id)] = {
            "subject_id": episode.subject_id,
            "los_hours": episode.los_hours,
            "mortality": episode.labels["mortality"],
            "death_hour": episode.labels["death_hour"],
        }
        mortality_by_subject[episode.subject_id] = max(
            mortality_by_subject.get(episode.subject_id, 0),
            episode.labels["mortality"])
        for s in extract_samples(episode, task, t, stride):
            sample_index.append({
                "icustay_id": s.icustay_id,
                "subject_id": s.subject_id,
                "end_hour": int(s.prediction_time) if task != "phenotype"
                            else episode.n_hours,
                "prediction_time": s.prediction_time,
                "y": s.y.tolist() if isinstance(s.y, np.ndarray) else int(s.y),
                "remaining_hours": s.remaining_hours,
            })

    split = split_patients([s.subject_id for s in filtered.stays], split_seed,
                           labels=mortality_by_subject
                           if task in ("ihm", "decompensation") else None)
    manifest = {
        "task": task,
        "t": t,
        "stride": stride,
        "d": vdict.d,
        "dictionary": vdict.name,
        "columns": vdict.columns,
        "counts": {
            "stays_in": len(stays),
            "stays_kept": len(filtered.stays),
            "stay_drops": filtered.dropped,
            "events_in": len(events),
            "events_kept": len(matched.events),
            "event_drops": matched.dropped,
            "events_recovered": matched.recovered,
            "episodes": len(episodes),
            "assembly": assembly,
            "samples": len(sample_index),
        },
        "split_seed": split_seed,
        "split": split,
        "stays": stay_meta,
        "samples": sample_index,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_manifest(data_dir) -> dict:
    return json.loads((Path(data_dir) / "manifest.json").read_text())


def load_prepared_samples(data_dir, split: str | None = None,
                          manifest: dict | None = None) -> list[Sample]:
    """Rebuild Sample windows from persisted episodes and the manifest."""
    data_dir = Path(data_dir)
    manifest = manifest if manifest is not None else load_manifest(data_dir)
    subjects = set(manifest["split"][split]) if split else None
    t, d = manifest["t"], manifest["d"]
    matrices: dict[int, np.ndarray] = {}
    samples = []
    for rec in manifest["samples"]:
        if subjects is not None and rec["subject_id"] not in subjects:
            continue
        icustay_id = rec["icustay_id"]
        if icustay_id not in matrices:
            matrices[icustay_id], _ = read_episode_csv(
                data_dir / "episodes" / f"{icustay_id}.csv", d)
        y = rec["y"]
        samples.append(Sample(
            x=sample_window(matrices[icustay_id], rec["end_hour"], t),
            y=np.asarray(y, dtype=np.int64) if isinstance(y, list) else int(y),
            prediction_time=rec["prediction_time"],
            icustay_id=icustay_id,
            subject_id=rec["subject_id"],
            remaining_hours=rec["remaining_hours"],
        ))
    return samples
