"""Bid computation, second-price ranking, focus-based pod serving and a traffic simulator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .datagen import AdSlot, ClickWorld, GeneratorConfig

RESERVE_PRICE = 1
MIN_TRAILING_CTR = 1e-6
MODALITIES = ("audio", "video")

# pod slot served for (content, modality)
POD_SLOT = {
    ("music", "audio"): AdSlot.StreamAudio,
    ("podcast", "audio"): AdSlot.Podcast,
    ("music", "video"): AdSlot.StreamVideo,
    ("podcast", "video"): AdSlot.PodcastVideo,
}


class AuctionError(ValueError):
    pass


class SimulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# bids and auctions


def compute_bid(o: int, p: float, c: float, b: float) -> int:
    """min(ceil(o / (1 + p) * c / b), o) on integer micro-currency.

    The float product is exact enough almost everywhere; when it lands close
    to an integer the ceiling is taken on the exact rational value instead.
    """
    if not (isinstance(o, (int, np.integer)) and o > 0):
        raise AuctionError(f"max bid must be a positive integer, got {o!r}")
    if not p >= 0:
        raise AuctionError(f"pacing multiplier must be >= 0, got {p!r}")
    if not 0.0 <= c <= 1.0:
        raise AuctionError(f"pCTR must lie in [0, 1], got {c!r}")
    if not b > 0:
        raise AuctionError(f"trailing CTR must be positive, got {b!r}")
    o = int(o)
    v = (o / (1.0 + p)) * (c / b)
    if v >= o + 1:
        return o
    r = round(v)
    if abs(v - r) <= 1e-9 * max(1.0, abs(v)):
        exact = Fraction(o) / (1 + Fraction(p)) * Fraction(c) / Fraction(b)
        return min(math.ceil(exact), o)
    return min(math.ceil(v), o)


@dataclass(frozen=True)
class Campaign:
    id: str
    modality: str
    max_bid: int
    pacing: float = 0.0
    trailing_ctr: float = 0.01
    budget: int = 10**12
    # creative latent mixed into the user's latent when this ad is shown
    creative: tuple[float, ...] = ()

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise AuctionError(f"campaign {self.id}: modality must be audio or video")
        if self.max_bid <= 0:
            raise AuctionError(f"campaign {self.id}: max bid must be positive")
        if self.pacing < 0:
            raise AuctionError(f"campaign {self.id}: pacing must be >= 0")
        if not 0.0 < self.trailing_ctr <= 1.0:
            raise AuctionError(f"campaign {self.id}: trailing CTR must lie in (0, 1]")
        if self.budget < 0:
            raise AuctionError(f"campaign {self.id}: budget must be >= 0")


@dataclass(frozen=True)
class ServingRequest:
    step: int
    features: np.ndarray
    focus: str
    content: str
    eligible: tuple[str, ...]


@dataclass
class AuctionOutcome:
    ranked: list[tuple[str, int]]
    winner: str
    price: int
    slot: AdSlot | None = None
    click: int | None = None

    @property
    def winning_bid(self) -> int:
        return self.ranked[0][1]


def rank_bids(bids: Sequence[tuple[str, int]]) -> list[tuple[str, int]]:
    return sorted(bids, key=lambda cb: (-cb[1], cb[0]))


def run_auction(bids: Sequence[tuple[str, int]], reserve: int = RESERVE_PRICE) -> AuctionOutcome:
    """Generalized second-price auction with one position."""
    if not bids:
        raise AuctionError("an auction needs at least one bid")
    ranked = rank_bids(bids)
    winner, top = ranked[0]
    runner_up = ranked[1][1] if len(ranked) > 1 else 0
    return AuctionOutcome(ranked, winner, min(max(runner_up, reserve), top))


def gsp_prices(ranked: Sequence[tuple[str, int]], positions: int,
               reserve: int = RESERVE_PRICE) -> list[tuple[str, int, int]]:
    """(campaign, bid, price) for the top ``positions`` entries of a ranked list."""
    out = []
    for j in range(min(positions, len(ranked))):
        cid, bid = ranked[j]
        below = ranked[j + 1][1] if j + 1 < len(ranked) else 0
        # the next bid down, floored at the reserve and never above the bid itself
        out.append((cid, bid, min(max(below, reserve), bid)))
    return out


def pod_modality(focus: str) -> str:
    return "video" if focus == "in" else "audio"


def serve(request: ServingRequest, audio: AuctionOutcome | None,
          video: AuctionOutcome | None) -> AuctionOutcome | None:
    """The video pod goes to in-focus users, the audio pod to everyone else.

    ``None`` means no fill: the pod the focus state asks for had no bids.
    """
    modality = pod_modality(request.focus)
    chosen = video if modality == "video" else audio
    if chosen is None:
        return None
    chosen.slot = POD_SLOT[(request.content, modality)]
    return chosen


# --------------------------------------------------------------------------
# campaigns and traffic


def default_campaigns(traffic: GeneratorConfig, per_modality: int = 4,
                      seed: int = 0, creative_weight: float = 0.5) -> list[Campaign]:
    """A small campaign book; trailing CTRs start at each modality's main-slot base CTR."""
    rng = np.random.default_rng([seed, 17])
    out = []
    for modality, slot in (("audio", AdSlot.StreamAudio), ("video", AdSlot.StreamVideo)):
        for k in range(per_modality):
            creative = math.sqrt(creative_weight) * rng.standard_normal(traffic.feature_dim)
            out.append(Campaign(
                id=f"{modality}-{k}",
                modality=modality,
                max_bid=int(rng.integers(50, 201)),
                pacing=float(rng.choice([0.0, 0.25, 0.5, 1.0])),
                trailing_ctr=float(traffic.base_ctr[slot]),
                creative=tuple(float(v) for v in creative),
            ))
    return out


@dataclass
class Traffic:
    """A fixed request stream with every (request, campaign) impression precomputed.

    Row ``s * K + k`` of ``features``/``slots``/``true_ctr`` is campaign ``k``
    shown on request ``s``.
    """
    campaigns: list[Campaign]
    in_focus: np.ndarray
    music: np.ndarray
    eligible: np.ndarray
    uniforms: np.ndarray
    features: np.ndarray
    slots: np.ndarray
    true_ctr: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.in_focus)

    def request(self, s: int) -> ServingRequest:
        K = len(self.campaigns)
        ids = tuple(c.id for c, e in zip(self.campaigns, self.eligible[s]) if e)
        return ServingRequest(s, self.features[s * K:(s + 1) * K], "in" if self.in_focus[s] else "out",
                              "music" if self.music[s] else "podcast", ids)


def make_traffic(config: GeneratorConfig, campaigns: Sequence[Campaign], steps: int,
                 seed: int, eligibility: float = 0.75, pod_size: int = 1,
                 world: ClickWorld | None = None) -> Traffic:
    if steps < 0:
        raise SimulationError("steps must be >= 0")
    if not campaigns:
        raise SimulationError("need at least one campaign")
    world = world or ClickWorld(config)
    rng = np.random.default_rng([seed, 29])
    K, d = len(campaigns), config.feature_dim
    mix = config.slot_mix
    p_music = sum(mix.get(s, 0.0) for s in AdSlot if s.content == "music")
    music = rng.random(steps) < p_music
    in_focus = rng.random(steps) >= config.out_of_focus_fraction
    eligible = rng.random((steps, K)) < eligibility
    uniforms = rng.random((steps, pod_size))
    user = rng.standard_normal((steps, d))
    creative = np.zeros((K, d))
    w = np.zeros(K)
    for k, c in enumerate(campaigns):
        if c.creative:
            if len(c.creative) != d:
                raise SimulationError(f"campaign {c.id}: creative has {len(c.creative)} dims, "
                                      f"traffic has {d}")
            creative[k] = c.creative
            w[k] = min(float(np.dot(creative[k], creative[k])) / d, 1.0)
    # shrinking the user part keeps per-coordinate variance near one across campaigns
    latent = (np.sqrt(1.0 - w)[None, :, None] * user[:, None, :]
              + creative[None, :, :]).reshape(steps * K, d)
    video = np.array([c.modality == "video" for c in campaigns])
    slot_of = {(m, v): POD_SLOT[("music" if m else "podcast", "video" if v else "audio")].value
               for m in (True, False) for v in (True, False)}
    slots = np.array([[slot_of[(bool(m), bool(v))] for v in video] for m in music],
                     dtype=np.int64).reshape(steps * K)
    focus_rows = np.repeat(in_focus, K)
    true_ctr = world.ctr(slots, focus_rows, latent)
    features = world.feature_rows(slots, focus_rows, latent)
    return Traffic(list(campaigns), in_focus, music, eligible, uniforms, features, slots, true_ctr)


# --------------------------------------------------------------------------
# scorers: (features, slots, true_ctr) -> pCTR per impression row

Scorer = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def oracle_scorer(features, slots, true_ctr):
    return np.asarray(true_ctr, dtype=np.float64)


def constant_scorer(value: float) -> Scorer:
    def score(features, slots, true_ctr):
        return np.full(len(slots), float(value))
    return score


def model_scorer(model, calibrated: bool = True) -> Scorer:
    """Scores each impression row with the head of the task its slot belongs to."""
    from .model import forward

    def score(features, slots, true_ctr):
        probs = np.stack(forward(model, features, calibrated=calibrated), axis=1)
        return probs[np.arange(len(slots)), model.grouping.slot_to_task[slots]]
    return score


# --------------------------------------------------------------------------
# simulation


@dataclass
class ModalityStats:
    impressions: int = 0
    clicks: int = 0
    spend: int = 0
    expected_clicks: float = 0.0
    no_fill: int = 0

    @property
    def ctr(self) -> float | None:
        return self.clicks / self.impressions if self.impressions else None

    @property
    def ecpc(self) -> float | None:
        return self.spend / self.clicks if self.clicks else None

    @property
    def true_ctr(self) -> float | None:
        """Mean true click probability of the impressions actually served."""
        return self.expected_clicks / self.impressions if self.impressions else None

    def to_dict(self) -> dict:
        return {"impressions": self.impressions, "clicks": self.clicks, "spend": self.spend,
                "ctr": self.ctr, "ecpc": self.ecpc, "true_ctr": self.true_ctr,
                "no_fill": self.no_fill}


@dataclass
class SimReport:
    arms: dict[str, dict[str, ModalityStats]] = field(default_factory=dict)
    steps: int = 0

    def stats(self, arm: str, modality: str) -> ModalityStats:
        return self.arms[arm][modality]

    def to_dict(self) -> dict:
        return {"steps": self.steps,
                "arms": {a: {m: st.to_dict() for m, st in per.items()}
                         for a, per in self.arms.items()}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _ema_alpha(half_life: float) -> float:
    if not half_life > 0:
        raise SimulationError("half-life must be positive")
    return 1.0 - 0.5 ** (1.0 / half_life)


def _run_arm(name: str, pctr: np.ndarray, traffic: Traffic, pod_size: int,
             alpha: float, reserve: int, log) -> dict[str, ModalityStats]:
    campaigns = traffic.campaigns
    K = len(campaigns)
    trailing = [c.trailing_ctr for c in campaigns]
    budget = [c.budget for c in campaigns]
    by_modality = {m: [k for k, c in enumerate(campaigns) if c.modality == m] for m in MODALITIES}
    stats = {m: ModalityStats() for m in MODALITIES}
    ids = [c.id for c in campaigns]
    for s in range(traffic.steps):
        focus = "in" if traffic.in_focus[s] else "out"
        modality = pod_modality(focus)
        row0 = s * K
        bids = []
        for k in by_modality[modality]:
            if traffic.eligible[s, k] and budget[k] > 0:
                c = campaigns[k]
                bids.append((k, compute_bid(c.max_bid, c.pacing, float(pctr[row0 + k]), trailing[k])))
        st = stats[modality]
        slot = AdSlot(int(traffic.slots[row0 + by_modality[modality][0]])) if by_modality[modality] else None
        if not bids:
            st.no_fill += 1
            if log is not None:
                log.write(json.dumps({"step": s, "arm": name, "focus": focus,
                                      "slot": slot.name if slot else None, "winner": None,
                                      "bid": None, "price": None, "click": None}) + "\n")
            continue
        ranked = sorted(bids, key=lambda kb: (-kb[1], ids[kb[0]]))
        for j, (k, bid, price) in enumerate(gsp_prices(ranked, pod_size, reserve)):
            ctr = float(traffic.true_ctr[row0 + k])
            click = int(traffic.uniforms[s, j] < ctr)
            st.impressions += 1
            st.clicks += click
            st.expected_clicks += ctr
            if click:
                charge = min(price, budget[k])
                budget[k] -= charge
                st.spend += charge
            trailing[k] = max((1.0 - alpha) * trailing[k] + alpha * click, MIN_TRAILING_CTR)
            if log is not None:
                log.write(json.dumps({"step": s, "arm": name, "focus": focus,
                                      "slot": slot.name, "winner": ids[k], "bid": bid,
                                      "price": price, "click": click}) + "\n")
    return stats


def simulate(arms: Mapping[str, Scorer], traffic: GeneratorConfig, steps: int, seed: int,
             campaigns: Sequence[Campaign] | None = None, pod_size: int = 1,
             half_life: float = 2000.0, eligibility: float = 0.75,
             reserve: int = RESERVE_PRICE, event_log=None,
             world: ClickWorld | None = None) -> SimReport:
    """Replay one request stream through every arm.

    Each arm keeps its own trailing CTRs and budgets; the stream, targeting
    draws and click uniforms are shared, so arms differ only through their
    scorers. ``event_log`` is an open text file receiving one JSON line per
    served or unfilled pod.
    """
    if not arms:
        raise SimulationError("need at least one arm")
    if pod_size < 1:
        raise SimulationError("pod size must be >= 1")
    campaigns = list(campaigns) if campaigns is not None else default_campaigns(traffic, seed=seed)
    stream = make_traffic(traffic, campaigns, steps, seed, eligibility, pod_size, world)
    alpha = _ema_alpha(half_life)
    report = SimReport(steps=steps)
    for name, scorer in arms.items():
        if steps:
            pctr = np.asarray(scorer(stream.features, stream.slots, stream.true_ctr), dtype=np.float64)
            if pctr.shape != (len(stream.slots),):
                raise SimulationError(f"arm {name!r}: scorer returned shape {pctr.shape}")
            bad = np.flatnonzero(~np.isfinite(pctr))
            if bad.size:
                raise SimulationError(f"arm {name!r}: non-finite pCTR at step "
                                      f"{int(bad[0]) // len(campaigns)}")
            pctr = np.clip(pctr, 0.0, 1.0)
        else:
            pctr = np.zeros(0)
        report.arms[name] = _run_arm(name, pctr, stream, pod_size, alpha, reserve, event_log)
    return report
