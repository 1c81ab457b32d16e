"""Synthetic ad impressions with an audio-dominated inventory.

Every impression's feature row is laid out as::

    [in_focus, latent_0 .. latent_{d-1}]

where the latent block is standard normal. The slot itself is not a feature;
models learn it only through which task head an impression is routed to.
The click probability is

    logistic(intercept[slot, focus] + signal_strength * h_modality(latent))

with ``h`` mixing a linear score and a sparse sum of products of
``cross_order`` distinct latents (unit variance each). Intercepts are solved numerically so that,
averaged over the latent distribution, each slot's out-of-focus and in-focus
CTRs hit their targets exactly.
"""
from __future__ import annotations

import csv
import enum
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np
from scipy.optimize import brentq


class AdSlot(enum.Enum):
    StreamAudio = 0
    Podcast = 1
    StreamVideo = 2
    EmbeddedMusic = 3
    PodcastVideo = 4
    StreamAudioLeavebehind = 5
    PodcastLeavebehind = 6

    @property
    def modality(self) -> str:
        return "video" if self in VIDEO_SLOTS else "audio"

    @property
    def content(self) -> str:
        return "music" if self in MUSIC_SLOTS else "podcast"

    @property
    def is_leavebehind(self) -> bool:
        return self in (AdSlot.StreamAudioLeavebehind, AdSlot.PodcastLeavebehind)


SLOTS = tuple(AdSlot)
VIDEO_SLOTS = frozenset({AdSlot.StreamVideo, AdSlot.EmbeddedMusic, AdSlot.PodcastVideo})
MUSIC_SLOTS = frozenset({AdSlot.StreamAudio, AdSlot.StreamVideo, AdSlot.EmbeddedMusic,
                         AdSlot.StreamAudioLeavebehind})
N_CONTEXT_COLUMNS = 1

DEFAULT_SLOT_MIX = {
    AdSlot.StreamAudio: 0.70,
    AdSlot.Podcast: 0.10,
    AdSlot.StreamVideo: 0.08,
    AdSlot.EmbeddedMusic: 0.04,
    AdSlot.PodcastVideo: 0.02,
    AdSlot.StreamAudioLeavebehind: 0.04,
    AdSlot.PodcastLeavebehind: 0.02,
}

# Marginal (focus-averaged) CTR per slot; video roughly an order above audio.
DEFAULT_BASE_CTR = {
    AdSlot.StreamAudio: 0.010,
    AdSlot.Podcast: 0.008,
    AdSlot.StreamVideo: 0.080,
    AdSlot.EmbeddedMusic: 0.060,
    AdSlot.PodcastVideo: 0.070,
    AdSlot.StreamAudioLeavebehind: 0.015,
    AdSlot.PodcastLeavebehind: 0.012,
}

MAX_CTR = 0.95
_MC_DRAWS = 20000


class DataError(ValueError):
    pass


def parse_slot(name: str) -> AdSlot:
    try:
        return AdSlot[name]
    except KeyError:
        raise DataError(f"unknown slot {name!r}") from None


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 100_000
    slot_mix: Mapping[AdSlot, float] = field(default_factory=lambda: dict(DEFAULT_SLOT_MIX))
    base_ctr: Mapping[AdSlot, float] = field(default_factory=lambda: dict(DEFAULT_BASE_CTR))
    focus_ctr_multiplier: float = 10.0
    out_of_focus_fraction: float = 0.7
    feature_dim: int = 8
    signal_strength: float = 2.5
    # share of signal variance carried by sparse feature products
    cross_fraction: float = 0.95
    cross_terms: int = 12
    cross_order: int = 3
    modality_correlation: float = 0.2
    leavebehind_in_focus: bool = True
    world_seed: int = 7
    seed: int = 0

    def validate(self) -> None:
        if self.n < 0:
            raise DataError("n must be >= 0")
        total = math.fsum(self.slot_mix.get(s, 0.0) for s in SLOTS)
        if abs(total - 1.0) > 1e-9:
            raise DataError(f"slot_mix sums to {total!r}, expected 1")
        if any(self.slot_mix.get(s, 0.0) < 0 for s in SLOTS):
            raise DataError("slot_mix has negative entries")
        for s in SLOTS:
            b = self.base_ctr.get(s)
            if b is None or not 0.0 < b < 1.0:
                raise DataError(f"base_ctr for {s.name} must lie in (0, 1)")
        if not 0.0 <= self.out_of_focus_fraction < 1.0:
            raise DataError("out_of_focus_fraction must lie in [0, 1)")
        if self.focus_ctr_multiplier <= 0:
            raise DataError("focus_ctr_multiplier must be positive")
        if self.feature_dim < 2:
            raise DataError("feature_dim must be >= 2")
        if not 0.0 <= self.cross_fraction <= 1.0:
            raise DataError("cross_fraction must lie in [0, 1]")
        if not 2 <= self.cross_order <= self.feature_dim:
            raise DataError("cross_order must lie in [2, feature_dim]")
        if self.cross_terms < 0:
            raise DataError("cross_terms must be >= 0")
        if not -1.0 <= self.modality_correlation <= 1.0:
            raise DataError("modality_correlation must lie in [-1, 1]")

    def with_seed(self, seed: int) -> "GeneratorConfig":
        return replace(self, seed=seed)

    def focus_ctrs(self, slot: AdSlot) -> tuple[float, float]:
        """(out-of-focus, in-focus) target CTRs whose focus-weighted mean is the base CTR."""
        base = self.base_ctr[slot]
        if slot.is_leavebehind and self.leavebehind_in_focus:
            return base, base
        f_in = 1.0 - self.out_of_focus_fraction
        m = self.focus_ctr_multiplier
        out = base / ((1.0 - f_in) + f_in * m)
        return min(out, MAX_CTR), min(out * m, MAX_CTR)


@dataclass(frozen=True)
class Impression:
    features: tuple[float, ...]
    slot: AdSlot
    focus: str
    label: int
    true_ctr: float


class Dataset:
    """Immutable columnar store of impressions."""

    def __init__(self, features: np.ndarray, slots: np.ndarray, in_focus: np.ndarray,
                 labels: np.ndarray, true_ctr: np.ndarray, provenance=None):
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise DataError("features must be a 2-d array")
        n = features.shape[0]
        cols = [np.asarray(slots, dtype=np.int64), np.asarray(in_focus, dtype=bool),
                np.asarray(labels, dtype=np.int64), np.asarray(true_ctr, dtype=np.float64)]
        if any(c.shape != (n,) for c in cols):
            raise DataError("column lengths disagree")
        self.features = features
        self.slots, self.in_focus, self.labels, self.true_ctr = cols
        for arr in (self.features, *cols):
            arr.flags.writeable = False
        self.provenance = provenance

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def modalities(self) -> np.ndarray:
        """1 for video impressions, 0 for audio (leavebehinds count as audio)."""
        return np.isin(self.slots, [s.value for s in VIDEO_SLOTS]).astype(np.int64)

    def slot_mask(self, slot: AdSlot) -> np.ndarray:
        return self.slots == slot.value

    def subset(self, idx: np.ndarray) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.slots[idx], self.in_focus[idx],
                       self.labels[idx], self.true_ctr[idx], provenance=self.provenance)

    def __iter__(self) -> Iterator[Impression]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> Impression:
        return Impression(tuple(self.features[i].tolist()), SLOTS[self.slots[i]],
                          "in" if self.in_focus[i] else "out", int(self.labels[i]),
                          float(self.true_ctr[i]))

    @property
    def impressions(self) -> list[Impression]:
        return list(self)

    def equals(self, other: "Dataset") -> bool:
        return (len(self) == len(other)
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.slots, other.slots)
                and np.array_equal(self.in_focus, other.in_focus)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.true_ctr, other.true_ctr))

    @staticmethod
    def concat(parts: list["Dataset"]) -> "Dataset":
        return Dataset(np.concatenate([p.features for p in parts]),
                       np.concatenate([p.slots for p in parts]),
                       np.concatenate([p.in_focus for p in parts]),
                       np.concatenate([p.labels for p in parts]),
                       np.concatenate([p.true_ctr for p in parts]))


def _logistic(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ClickWorld:
    """Ground-truth CTR function shared by the data generator and the auction simulator."""

    def __init__(self, config: GeneratorConfig):
        config.validate()
        self.config = config
        d = config.feature_dim
        rng = np.random.default_rng(config.world_seed)
        shared = rng.standard_normal(d)
        own = rng.standard_normal((2, d))
        rho = config.modality_correlation
        self.linear = []
        for k in range(2):
            w = rho * shared + math.sqrt(max(0.0, 1.0 - rho * rho)) * own[k]
            self.linear.append(w / np.linalg.norm(w))
        all_terms = list(itertools.combinations(range(d), config.cross_order))
        n_terms = min(config.cross_terms, len(all_terms))
        self.crosses = []
        for _ in range(2):
            chosen = rng.choice(len(all_terms), size=n_terms, replace=False)
            idx = np.array([all_terms[c] for c in sorted(chosen)], dtype=np.int64)
            idx = idx.reshape(-1, config.cross_order)
            coef = rng.choice([-1.0, 1.0], size=n_terms) / math.sqrt(max(n_terms, 1))
            self.crosses.append((idx, coef))
        mc = np.random.default_rng(config.world_seed + 1).standard_normal((_MC_DRAWS, d))
        self.intercepts = np.zeros((len(SLOTS), 2))
        self._solve_intercepts(mc)

    def score(self, latent: np.ndarray, modality: np.ndarray | int) -> np.ndarray:
        """Unit-variance signal h_modality(latent) for each row."""
        latent = np.atleast_2d(latent)
        modality = np.broadcast_to(np.asarray(modality), (latent.shape[0],))
        kappa = self.config.cross_fraction
        out = np.zeros(latent.shape[0])
        for k in (0, 1):
            rows = modality == k
            if not rows.any():
                continue
            x = latent[rows]
            lin = x @ self.linear[k]
            idx, coef = self.crosses[k]
            cross = np.prod(x[:, idx], axis=2) @ coef if len(coef) else 0.0
            out[rows] = math.sqrt(1.0 - kappa) * lin + math.sqrt(kappa) * cross
        return out

    def _solve_intercepts(self, mc: np.ndarray) -> None:
        s = self.config.signal_strength
        for slot in SLOTS:
            h = s * self.score(mc, int(slot.modality == "video"))
            for focus, target in enumerate(self.config.focus_ctrs(slot)):
                if s == 0.0:
                    self.intercepts[slot.value, focus] = math.log(target / (1.0 - target))
                    continue
                f = lambda a: float(_logistic(a + h).mean()) - target  # noqa: E731
                self.intercepts[slot.value, focus] = brentq(f, -40.0, 40.0, xtol=1e-12)

    def ctr(self, slots: np.ndarray, in_focus: np.ndarray, latent: np.ndarray) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.int64)
        in_focus = np.asarray(in_focus, dtype=bool)
        modality = np.isin(slots, [v.value for v in VIDEO_SLOTS]).astype(np.int64)
        logit = (self.intercepts[slots, in_focus.astype(np.int64)]
                 + self.config.signal_strength * self.score(latent, modality))
        return np.clip(_logistic(logit), 1e-9, MAX_CTR)

    def feature_rows(self, slots: np.ndarray, in_focus: np.ndarray,
                     latent: np.ndarray) -> np.ndarray:
        n = latent.shape[0]
        out = np.zeros((n, N_CONTEXT_COLUMNS + latent.shape[1]))
        out[:, 0] = in_focus
        out[:, N_CONTEXT_COLUMNS:] = latent
        return out


def sample_focus(config: GeneratorConfig, slots: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    in_focus = rng.random(len(slots)) >= config.out_of_focus_fraction
    if config.leavebehind_in_focus:
        lb = np.isin(slots, [AdSlot.StreamAudioLeavebehind.value, AdSlot.PodcastLeavebehind.value])
        in_focus = in_focus | lb
    return in_focus


def generate(config: GeneratorConfig, world: ClickWorld | None = None) -> Dataset:
    config.validate()
    world = world or ClickWorld(config)
    rng = np.random.default_rng(config.seed)
    n, d = config.n, config.feature_dim
    probs = np.array([config.slot_mix.get(s, 0.0) for s in SLOTS])
    slots = rng.choice(len(SLOTS), size=n, p=probs / probs.sum())
    in_focus = sample_focus(config, slots, rng)
    latent = rng.standard_normal((n, d))
    true_ctr = world.ctr(slots, in_focus, latent)
    labels = (rng.random(n) < true_ctr).astype(np.int64)
    return Dataset(world.feature_rows(slots, in_focus, latent), slots, in_focus, labels,
                   true_ctr, provenance=config)


def downsample_majority(d: Dataset, target_ratio: float, seed: int) -> Dataset:
    """Drop random audio impressions until audio:video <= ``target_ratio``."""
    if not target_ratio > 0:
        raise DataError("target_ratio must be positive")
    video = d.modalities == 1
    n_video = int(video.sum())
    if n_video == 0:
        raise DataError("dataset has no video impressions; audio:video ratio undefined")
    audio_idx = np.flatnonzero(~video)
    if math.isinf(target_ratio) or len(audio_idx) <= target_ratio * n_video:
        return d
    keep_audio = int(math.floor(target_ratio * n_video))
    rng = np.random.default_rng(seed)
    kept = rng.choice(audio_idx, size=keep_audio, replace=False)
    idx = np.sort(np.concatenate([kept, np.flatnonzero(video)]))
    out = d.subset(idx)
    out.provenance = d.provenance
    return out


def split(d: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Slot-stratified random partition into (train, held-out)."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError("train_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for slot in SLOTS:
        idx = np.flatnonzero(d.slots == slot.value)
        if len(idx) == 0:
            continue
        if len(idx) < 2:
            raise DataError(f"slot {slot.name} has fewer than 2 impressions; cannot stratify")
        idx = rng.permutation(idx)
        k = min(max(int(round(train_fraction * len(idx))), 1), len(idx) - 1)
        train_idx.append(idx[:k])
        test_idx.append(idx[k:])
    if not train_idx:
        raise DataError("cannot split an empty dataset")
    return d.subset(np.sort(np.concatenate(train_idx))), d.subset(np.sort(np.concatenate(test_idx)))


def csv_header(n_features: int) -> list[str]:
    return ["slot", "focus", "label", "true_ctr"] + [f"f{i}" for i in range(n_features)]


def save_csv(d: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(d.feature_dim))
        for i in range(len(d)):
            w.writerow([SLOTS[d.slots[i]].name, "in" if d.in_focus[i] else "out",
                        int(d.labels[i]), format(d.true_ctr[i], ".17g")]
                       + [format(v, ".17g") for v in d.features[i]])


def load_csv(path) -> Dataset:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        n_feat = len(header) - 4
        if n_feat < 0 or header != csv_header(n_feat):
            raise DataError(f"{path}:1: bad header {header!r}")
        feats, slots, focus, labels, ctrs = [], [], [], [], []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                slot = parse_slot(row[0])
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if row[1] not in ("in", "out"):
                raise DataError(f"{path}:{lineno}: focus must be 'in' or 'out', got {row[1]!r}")
            if row[2] not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: label must be 0 or 1, got {row[2]!r}")
            try:
                values = [float(v) for v in row[3:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            slots.append(slot.value)
            focus.append(row[1] == "in")
            labels.append(int(row[2]))
            ctrs.append(values[0])
            feats.append(values[1:])
    features = np.array(feats, dtype=np.float64).reshape(len(feats), n_feat)
    return Dataset(features, np.array(slots, dtype=np.int64), np.array(focus, dtype=bool),
                   np.array(labels, dtype=np.int64), np.array(ctrs), provenance=str(path))
