"""Synthesized collision slots: delay draws, transmission and the receiver verdict.

Shared by the phy-mode MAC simulator, link-probability calibration and the
BER experiments.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_positive_int
from .channel import SYMBOL_RATE, FrameLayout, UserProfile, encode_packet, transmit_slot
from .coding import DEFAULT_USER_IDS, CodeBook
from .mac_analytic import LinkProbs
from .receiver import MODES, receive_slot


@dataclass(frozen=True)
class PhyConfig:
    """Radio conditions of a synthesized slot.

    Delays are in symbol intervals.  Each user gets an intentional delay on the
    sample grid of ``[0, intentional_spread]`` plus a gaussian natural delay;
    ``natural_sigma`` is the spread of the *difference* of two users' natural
    delays.  ``natural_offset`` keeps every delay non-negative.
    """

    snr_db: float = 25.0
    receiver_mode: str = "blind"
    intentional_spread: float = 1.0
    natural_sigma: float = 1 / 20
    natural_offset: float = 0.25
    cfo_std: float = 0.0  # Hz

    def __post_init__(self):
        if self.receiver_mode not in MODES:
            raise ValueError(f"receiver_mode must be one of {MODES}")
        if self.intentional_spread < 0 or self.natural_sigma < 0 or self.natural_offset < 0:
            raise ValueError("delay parameters must be non-negative")


@dataclass(eq=False)
class CollisionTrial:
    user_ids: list[int]
    packets: list
    delivered: list[int]  # ids recovered with zero bit errors
    delays: np.ndarray  # samples
    report: object


def draw_delays(
    phy: PhyConfig,
    n_users: int,
    rng: np.random.Generator,
    difference_range: tuple[float, float] | None = None,
    layout: FrameLayout | None = None,
    max_draws: int = 10_000,
) -> np.ndarray:
    """Per-user delays in whole samples.

    ``difference_range`` (in symbol intervals) rejects draws whose pairwise
    delay difference falls outside it.
    """
    layout = FrameLayout() if layout is None else layout
    sps = layout.samples_per_symbol
    top = int(round(phy.intentional_spread * sps))
    for _ in range(max_draws):
        intentional = rng.integers(0, top + 1, n_users)
        natural = phy.natural_offset * sps + rng.normal(0.0, phy.natural_sigma * sps / np.sqrt(2), n_users)
        d = np.round(np.maximum(intentional + natural, 0.0)).astype(int)
        if d.max() > layout.max_delay:
            continue
        if difference_range is None or n_users < 2:
            return d
        diff = abs(d[1] - d[0]) / sps
        if difference_range[0] <= diff <= difference_range[1]:
            return d
    raise RuntimeError("could not draw delays inside the requested difference range")


def run_collision(
    user_ids,
    phy: PhyConfig,
    rng: np.random.Generator,
    codebook: CodeBook | None = None,
    difference_range: tuple[float, float] | None = None,
    mode: str | None = None,
) -> CollisionTrial:
    """Transmit fresh packets from ``user_ids`` in one slot and run the receiver."""
    layout = FrameLayout()
    sps = layout.samples_per_symbol
    Ts = 1.0 / SYMBOL_RATE
    user_ids = [int(u) for u in user_ids]
    packets = [
        encode_packet(u, codebook=codebook, rng_seed=int(rng.integers(1 << 62))) for u in user_ids
    ]
    delays = draw_delays(phy, len(user_ids), rng, difference_range, layout)
    profiles = [
        UserProfile(
            u,
            gain=np.exp(2j * np.pi * rng.random()),
            delay=d * Ts / sps,
            cfo=phy.cfo_std * rng.standard_normal() if phy.cfo_std else 0.0,
        )
        for u, d in zip(user_ids, delays)
    ]
    signal = transmit_slot(packets, profiles, phy.snr_db, rng, layout)
    report = receive_slot(signal, codebook, mode or phy.receiver_mode, truth=packets)
    delivered = [
        r.user_id for r in report.recovered if r.user_id in user_ids and r.bit_errors == 0
    ]
    return CollisionTrial(user_ids, packets, delivered, delays, report)


def calibrate_link_probs(
    phy: PhyConfig,
    n_slots: int = 2000,
    rng: np.random.Generator | None = None,
    user_ids=DEFAULT_USER_IDS,
) -> LinkProbs:
    """Measure ``P0`` from lone transmissions and ``P1``/``P2`` from pairs."""
    n_slots = check_positive_int(n_slots, "n_slots")
    rng = np.random.default_rng() if rng is None else rng
    ids = np.asarray(user_ids)
    single = 0
    both = one = 0
    for _ in range(n_slots):
        single += len(run_collision(rng.choice(ids, 1), phy, rng).delivered)
        got = len(run_collision(rng.choice(ids, 2, replace=False), phy, rng).delivered)
        both += got == 2
        one += got == 1
    return LinkProbs(single / n_slots, both / n_slots, one / n_slots)
