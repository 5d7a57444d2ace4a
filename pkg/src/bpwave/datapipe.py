"""Episode extraction, binning/subsampling, storage, and synthetic data.

An episode is an aligned pair of 1024-sample PPG and ABP windows at 125 Hz
(8.192 s). Stores are immutable-by-convention collections of episodes with
a binary on-disk format ("P2ABPDATA") and a CSV import path for converting
externally prepared signals.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import container

STORE_MAGIC = b"P2ABPDATA"
STORE_VERSION = 1
EPISODE_SAMPLES = 1024
STORE_FS = 125.0
ABP_SANITY_MMHG = (20.0, 300.0)
BIN_WIDTH_MMHG = 10.0


@dataclass
class EpisodeRecord:
    ppg: np.ndarray
    abp: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        self.ppg = np.asarray(self.ppg, dtype=np.float64)
        self.abp = np.asarray(self.abp, dtype=np.float64)

    def validate(self):
        for name, x in (("ppg", self.ppg), ("abp", self.abp)):
            if x.shape != (EPISODE_SAMPLES,):
                raise ValueError(f"{name} must have exactly {EPISODE_SAMPLES} samples, got {x.shape}")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"{name} contains non-finite samples")
        lo, hi = ABP_SANITY_MMHG
        if self.abp.min() < lo or self.abp.max() > hi:
            raise ValueError(
                f"abp outside the sanity window [{lo}, {hi}] mmHg: "
                f"[{self.abp.min():.1f}, {self.abp.max():.1f}]"
            )
        return self

    def bp_triple(self):
        """Ground-truth (sbp, dbp, map) via the whole-window extraction rules."""
        return float(self.abp.max()), float(self.abp.min()), float(self.abp.mean())


@dataclass
class EpisodeStore:
    records: list = field(default_factory=list)
    fs: float = STORE_FS
    version: int = STORE_VERSION

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def validate(self):
        if self.fs != STORE_FS:
            raise ValueError(f"store sampling rate must be {STORE_FS} Hz, got {self.fs}")
        for r in self.records:
            r.validate()
        return self

    def subset(self, indices):
        return EpisodeStore([self.records[i] for i in indices], fs=self.fs, version=self.version)

    def equals(self, other):
        if len(self) != len(other) or self.fs != other.fs:
            return False
        return all(
            a.subject_id == b.subject_id
            and np.array_equal(a.ppg, b.ppg)
            and np.array_equal(a.abp, b.abp)
            for a, b in zip(self.records, other.records)
        )


def segment_episodes(ppg, abp, subject_id, window=EPISODE_SAMPLES):
    """Cut aligned signals into consecutive non-overlapping episodes.

    The trailing remainder is discarded; windows violating the ABP sanity
    bounds (or containing non-finite samples) are dropped and counted.
    Returns (records, dropped_count).
    """
    ppg = np.asarray(ppg, dtype=np.float64)
    abp = np.asarray(abp, dtype=np.float64)
    if ppg.shape != abp.shape or ppg.ndim != 1:
        raise ValueError(f"ppg and abp must be aligned 1-D signals, got {ppg.shape} vs {abp.shape}")
    records = []
    dropped = 0
    for start in range(0, ppg.size - window + 1, window):
        rec = EpisodeRecord(ppg[start : start + window], abp[start : start + window], subject_id)
        try:
            rec.validate()
        except ValueError:
            dropped += 1
            continue
        records.append(rec)
    return records, dropped


def bin_key(sbp, dbp, width=BIN_WIDTH_MMHG):
    """2D grid index over (SBP, DBP) with 10 mmHg bins."""
    return int(math.floor(sbp / width)), int(math.floor(dbp / width))


def bin_and_subsample(store, fraction=0.25, cap=2500, seed=0):
    """Per (SBP, DBP) bin, keep round(fraction*n) episodes, at most cap."""
    bins = {}
    for i, rec in enumerate(store):
        sbp, dbp, _ = rec.bp_triple()
        bins.setdefault(bin_key(sbp, dbp), []).append(i)
    rng = np.random.default_rng(seed)
    chosen = []
    for key in sorted(bins):
        members = bins[key]
        take = min(round(fraction * len(members)), cap)
        if take > 0:
            chosen.extend(rng.choice(members, size=take, replace=False))
    return store.subset(sorted(int(i) for i in chosen))


def split_train_test(store, train_count, seed=0):
    """Disjoint uniform split whose union is the input store."""
    n = len(store)
    if train_count > n:
        raise ValueError(f"cannot take {train_count} training episodes from {n}")
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = sorted(int(i) for i in perm[:train_count])
    test_idx = sorted(int(i) for i in perm[train_count:])
    return store.subset(train_idx), store.subset(test_idx)


def split_by_subject(store, train_fraction, seed=0):
    """Subject-level split: whole subjects go to one side or the other."""
    subjects = sorted({r.subject_id for r in store})
    perm = np.random.default_rng(seed).permutation(len(subjects))
    target = train_fraction * len(store)
    train_subjects = set()
    count = 0
    per_subject = {s: sum(1 for r in store if r.subject_id == s) for s in subjects}
    for i in perm:
        if count >= target:
            break
        train_subjects.add(subjects[i])
        count += per_subject[subjects[i]]
    train_idx = [i for i, r in enumerate(store) if r.subject_id in train_subjects]
    test_idx = [i for i, r in enumerate(store) if r.subject_id not in train_subjects]
    return store.subset(train_idx), store.subset(test_idx)


# -------------------------------------------------------------------- storage

def write_store(path, store):
    store.validate()
    with open(path, "wb") as fh:
        container.write_header(fh, STORE_MAGIC, STORE_VERSION)
        container.write_u32(fh, len(store))
        container.write_f64_block(fh, np.array([store.fs]))
        for rec in store:
            container.write_string(fh, rec.subject_id)
            container.write_f64_block(fh, rec.ppg)
            container.write_f64_block(fh, rec.abp)


def read_store(path):
    with open(path, "rb") as fh:
        container.read_header(fh, STORE_MAGIC, STORE_VERSION)
        count = container.read_u32(fh, "episode count")
        fs = float(container.read_f64_block(fh, 1, "sampling rate")[0])
        records = []
        for i in range(count):
            subject = container.read_string(fh, f"record {i} subject id")
            ppg = container.read_f64_block(fh, EPISODE_SAMPLES, f"record {i} ppg")
            abp = container.read_f64_block(fh, EPISODE_SAMPLES, f"record {i} abp")
            records.append(EpisodeRecord(ppg, abp, subject))
        if fh.read(1) != b"":
            raise container.ContainerFormatError("trailing bytes after the last record")
    return EpisodeStore(records, fs=fs).validate()


def read_signal_csv(path):
    """Import per-sample CSV (columns ppg, abp, subject_id) into a store.

    Consecutive rows sharing a subject id form one continuous recording,
    which is segmented into episodes. Returns (store, dropped_count).
    """
    runs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"ppg", "abp", "subject_id"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"signal CSV needs columns {sorted(required)}, got {reader.fieldnames}")
        current = None
        for line, row in enumerate(reader, start=2):
            try:
                ppg_v = float(row["ppg"])
                abp_v = float(row["abp"])
            except ValueError as exc:
                raise ValueError(f"line {line}: {exc}") from None
            subject = row["subject_id"]
            if current is None or subject != current[0]:
                current = (subject, [], [])
                runs.append(current)
            current[1].append(ppg_v)
            current[2].append(abp_v)
    records = []
    dropped = 0
    for subject, ppg, abp in runs:
        recs, d = segment_episodes(np.array(ppg), np.array(abp), subject)
        records.extend(recs)
        dropped += d
    return EpisodeStore(records), dropped


# ------------------------------------------------------------------ synthesis

def _pulse_shape(phase, sys_center, sys_width, dicrotic_center, dicrotic_height):
    """Smooth periodic pulse: systolic peak plus a dicrotic bump."""
    # evaluate the wrapped Gaussian over neighbouring periods for continuity
    value = np.zeros_like(phase)
    for k in (-1, 0, 1):
        value += np.exp(-0.5 * ((phase - sys_center + k) / sys_width) ** 2)
        value += dicrotic_height * np.exp(-0.5 * ((phase - dicrotic_center + k) / (2 * sys_width)) ** 2)
    return value


def synth_generate(n, seed=0, episodes_per_subject=8):
    """Paired pseudo-physiological PPG/ABP episodes for desk-scale work.

    Heart rate is drawn from 50-120 bpm, SBP from [80, 180], DBP from
    [50, 110] with DBP < SBP - 10. The ABP window is rescaled so its max and
    min hit the drawn SBP/DBP exactly; the PPG channel shares the beat phase
    (fixed lag) and carries additive noise.
    """
    if n < 1:
        raise ValueError("need at least one episode")
    rng = np.random.default_rng(seed)
    t = np.arange(EPISODE_SAMPLES) / STORE_FS
    records = []
    for i in range(n):
        hr = rng.uniform(50.0, 120.0)
        sbp = rng.uniform(80.0, 180.0)
        dbp = rng.uniform(50.0, min(110.0, sbp - 10.0))
        phase0 = rng.uniform(0.0, 1.0)
        beat = (hr / 60.0 * t + phase0) % 1.0

        abp_shape = _pulse_shape(beat, 0.20, 0.085, 0.55, 0.42)
        lo, hi = abp_shape.min(), abp_shape.max()
        abp = dbp + (sbp - dbp) * (abp_shape - lo) / (hi - lo)

        ppg_beat = (beat - 0.12) % 1.0  # fixed phase lag behind the pressure wave
        ppg_shape = _pulse_shape(ppg_beat, 0.24, 0.11, 0.58, 0.30)
        ppg = ppg_shape / ppg_shape.max() + 0.02 * rng.normal(size=EPISODE_SAMPLES)

        records.append(EpisodeRecord(ppg, abp, f"synth-{i // episodes_per_subject:05d}"))
    return EpisodeStore(records).validate()


# ------------------------------------------------------------------ statistics

@dataclass
class QuantityStats:
    minimum: float
    maximum: float
    mean: float
    std: float


@dataclass
class DatasetStats:
    dbp: QuantityStats
    map: QuantityStats
    sbp: QuantityStats
    episodes: int
    subjects: int

    def format(self):
        lines = [
            f"episodes: {self.episodes}   subjects: {self.subjects}",
            f"{'':<6} {'Min':>8} {'Max':>8} {'Mean':>8} {'Std':>8}",
        ]
        for name in ("dbp", "map", "sbp"):
            q = getattr(self, name)
            lines.append(
                f"{name.upper():<6} {q.minimum:>8.2f} {q.maximum:>8.2f} {q.mean:>8.2f} {q.std:>8.2f}"
            )
        return "\n".join(lines)


def dataset_stats(store):
    """Min/max/mean/std of ground-truth SBP, DBP and MAP over the store."""
    if len(store) == 0:
        raise ValueError("cannot compute statistics of an empty store")
    triples = np.array([rec.bp_triple() for rec in store])  # columns: sbp, dbp, map
    columns = {"sbp": triples[:, 0], "dbp": triples[:, 1], "map": triples[:, 2]}
    stats = {
        name: QuantityStats(
            minimum=float(v.min()),
            maximum=float(v.max()),
            mean=float(v.mean()),
            std=float(v.std()),
        )
        for name, v in columns.items()
    }
    return DatasetStats(
        dbp=stats["dbp"],
        map=stats["map"],
        sbp=stats["sbp"],
        episodes=len(store),
        subjects=len({r.subject_id for r in store}),
    )
