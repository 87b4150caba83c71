"""Buffered slotted-ALOHA simulator with resolvable two-user collisions.

Per slot: Bernoulli arrivals, then every non-empty queue contends with
probability ``p``, then the outcome is drawn (abstract mode) or decided by the
receiver on a synthesized collision (phy mode).  Queues are FIFO.

Delays are in slots and count the departure slot, so a packet that arrives
and leaves in the same slot has total delay 1.  Only packets departing during
the measurement window enter the delay statistics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import product

import numba
import numpy as np

from ._validation import check_positive_int, check_probability
from .coding import DEFAULT_USER_IDS
from .mac_analytic import LinkProbs
from .phy_link import PhyConfig, run_collision

CLASSES = ("empty", "single_ok", "single_fail", "pair_both", "pair_one", "pair_none", "collision")
_EMPTY, _SINGLE_OK, _SINGLE_FAIL, _PAIR_BOTH, _PAIR_ONE, _PAIR_NONE, _COLLISION = range(7)
N_BATCHES = 20


@dataclass(eq=False)
class QueueState:
    """FIFO queues stored as per-user arrival-time buffers.

    Row ``k`` of ``arrivals`` holds user ``k``'s timestamps; entries
    ``head[k]:tail[k]`` are still queued.  ``hol[k]`` is the slot in which the
    current head-of-line packet started service.
    """

    arrivals: np.ndarray
    head: np.ndarray
    tail: np.ndarray
    hol: np.ndarray
    slot: int = 0
    n_arrivals: int = 0
    n_departures: int = 0

    @classmethod
    def empty(cls, J: int, capacity: int = 1024) -> "QueueState":
        z = np.zeros(J, dtype=np.int64)
        return cls(np.zeros((J, max(capacity, 1)), dtype=np.int64), z.copy(), z.copy(), z.copy())

    @property
    def J(self) -> int:
        return self.arrivals.shape[0]

    @property
    def backlog(self) -> np.ndarray:
        return self.tail - self.head

    def ensure_capacity(self, extra: int):
        """Room for ``extra`` more arrivals per user."""
        need = int(self.tail.max()) + extra
        if need <= self.arrivals.shape[1]:
            return
        # compact, then grow geometrically
        n = self.backlog
        cap = max(2 * self.arrivals.shape[1], int(n.max()) + extra)
        new = np.zeros((self.J, cap), dtype=np.int64)
        for k in range(self.J):
            new[k, : n[k]] = self.arrivals[k, self.head[k] : self.tail[k]]
        self.arrivals = new
        self.head = np.zeros(self.J, dtype=np.int64)
        self.tail = n.astype(np.int64)

    def timestamps(self, k: int) -> np.ndarray:
        return self.arrivals[k, self.head[k] : self.tail[k]]


@dataclass(frozen=True)
class SimConfig:
    J: int
    r: float
    p: float
    probs: LinkProbs | None = None
    mode: str = "abstract"
    warmup_slots: int = 100_000
    measure_slots: int | None = None  # 3000 in phy mode, 100000 abstract
    seed: int = 0
    phy: PhyConfig = field(default_factory=PhyConfig)

    def __post_init__(self):
        check_positive_int(self.J, "J")
        check_probability(self.r, "r")
        check_probability(self.p, "p")
        if self.mode not in ("abstract", "phy"):
            raise ValueError("mode must be 'abstract' or 'phy'")
        check_positive_int(self.warmup_slots, "warmup_slots")
        if self.measure_slots is not None:
            check_positive_int(self.measure_slots, "measure_slots")
        if self.probs is None:
            raise ValueError("probs are required (phy mode uses them for the warm-up)")
        if self.mode == "phy" and self.J > len(DEFAULT_USER_IDS):
            raise ValueError(f"phy mode supports at most {len(DEFAULT_USER_IDS)} users")

    @property
    def n_measure(self) -> int:
        if self.measure_slots is not None:
            return self.measure_slots
        return 3000 if self.mode == "phy" else 100_000


@dataclass(frozen=True)
class SlotOutcome:
    contenders: tuple[int, ...]
    delivered: tuple[int, ...]
    classification: str

    def __post_init__(self):
        if not set(self.delivered) <= set(self.contenders) or len(self.delivered) > 2:
            raise ValueError("delivered packets must come from contenders, at most two")
        if classify(len(self.contenders), len(self.delivered)) != self.classification:
            raise ValueError("classification does not match the counts")


def classify(n_contenders: int, n_delivered: int) -> str:
    if n_contenders == 0:
        return "empty"
    if n_contenders == 1:
        return "single_ok" if n_delivered else "single_fail"
    if n_contenders == 2:
        return ("pair_none", "pair_one", "pair_both")[n_delivered]
    return "collision"


@dataclass(eq=False)
class SimStats:
    q_measured: float
    throughput: float  # deliveries per slot
    mean_total_delay: float
    mean_service_delay: float
    q_per_user: np.ndarray
    throughput_per_user: np.ndarray
    total_delay_per_user: np.ndarray
    service_delay_per_user: np.ndarray
    histogram: dict
    q_se: float
    throughput_se: float
    total_delay_se: float
    service_delay_se: float
    n_slots: int
    arrivals: int  # over the whole run, warm-up included
    departures: int
    final_backlog: int


# -- abstract-mode kernel ----------------------------------------------------


@numba.njit(cache=True)
def _seed_kernel(seed):
    np.random.seed(seed)


@numba.njit(cache=True)
def _abstract_kernel(arrivals, head, tail, hol, t0, n_slots, r, p, P0, P1, P2, measure, acc):
    """Advance the queues ``n_slots`` slots.

    ``acc`` columns per batch row: active user-slots, deliveries, total-delay
    sum, service-delay sum, departures; then per-user blocks of the same four
    quantities (active, deliveries, total, service) and the 7 outcome counts.
    Returns the number of arrivals.
    """
    J = head.shape[0]
    n_batches = acc.shape[0]
    batch_len = max(n_slots // n_batches, 1)
    contend = np.empty(J, dtype=np.int64)
    n_arr = 0
    for i in range(n_slots):
        t = t0 + i
        b = min(i // batch_len, n_batches - 1)
        for k in range(J):
            if np.random.random() < r:
                if tail[k] == head[k]:
                    hol[k] = t
                arrivals[k, tail[k]] = t
                tail[k] += 1
                n_arr += 1
        n = 0
        for k in range(J):
            if tail[k] > head[k]:
                if measure:
                    acc[b, 0] += 1
                    acc[b, 5 + 4 * k] += 1
                if np.random.random() < p:
                    contend[n] = k
                    n += 1
        n_del = 0
        d0 = -1
        d1 = -1
        if n == 1:
            if np.random.random() < P0:
                d0 = contend[0]
                n_del = 1
            cls = 1 if n_del else 2
        elif n == 2:
            u = np.random.random()
            if u < P1:
                d0 = contend[0]
                d1 = contend[1]
                n_del = 2
                cls = 3
            elif u < P1 + P2:
                d0 = contend[0] if np.random.random() < 0.5 else contend[1]
                n_del = 1
                cls = 4
            else:
                cls = 5
        elif n == 0:
            cls = 0
        else:
            cls = 6
        if measure:
            acc[b, 5 + 4 * J + cls] += 1
        for j in range(n_del):
            k = d0 if j == 0 else d1
            a = arrivals[k, head[k]]
            if measure:
                tot = t - a + 1
                srv = t - hol[k] + 1
                acc[b, 1] += 1
                acc[b, 2] += tot
                acc[b, 3] += srv
                acc[b, 4] += 1
                acc[b, 6 + 4 * k] += 1
                acc[b, 7 + 4 * k] += tot
                acc[b, 8 + 4 * k] += srv
            head[k] += 1
            if tail[k] > head[k]:
                hol[k] = max(arrivals[k, head[k]], t + 1)
    return n_arr


def _stream_seeds(seed: int) -> tuple[int, int, np.random.SeedSequence]:
    """Disjoint streams for warm-up, abstract measurement and phy measurement."""
    warm, meas, phy = np.random.SeedSequence(seed).spawn(3)
    return int(warm.generate_state(1)[0]), int(meas.generate_state(1)[0]), phy


def _advance_abstract(state: QueueState, config: SimConfig, n_slots: int, seed: int, acc=None):
    state.ensure_capacity(n_slots)
    pr = config.probs
    _seed_kernel(seed)
    measure = acc is not None
    if acc is None:
        acc = np.zeros((1, 1))
    n_arr = _abstract_kernel(
        state.arrivals, state.head, state.tail, state.hol, state.slot, n_slots,
        config.r, config.p, pr.P0, pr.P1, pr.P2, measure, acc,
    )
    state.n_arrivals += int(n_arr)
    state.slot += n_slots
    state.n_departures = state.n_arrivals - int(state.backlog.sum())


# -- generic step (Python) ---------------------------------------------------


def step_slot(state: QueueState, config: SimConfig, rng: np.random.Generator):
    """Advance one slot in place and return ``(state, SlotOutcome)``.

    The users holding packets at contention time land in ``state.last_active``
    and delivered ``(user, total_delay, service_delay)`` in ``state.last_delays``.
    """
    J = state.J
    t = state.slot
    state.ensure_capacity(1)
    for k in np.flatnonzero(rng.random(J) < config.r):
        if state.tail[k] == state.head[k]:
            state.hol[k] = t
        state.arrivals[k, state.tail[k]] = t
        state.tail[k] += 1
        state.n_arrivals += 1
    active = np.flatnonzero(state.backlog > 0)
    contenders = tuple(int(k) for k in active[rng.random(len(active)) < config.p])
    n = len(contenders)
    if config.mode == "phy" and n in (1, 2):
        ids = [DEFAULT_USER_IDS[k] for k in contenders]
        trial = run_collision(ids, config.phy, rng)
        delivered = tuple(k for k, u in zip(contenders, ids) if u in trial.delivered)
    elif n == 1:
        delivered = contenders if rng.random() < config.probs.P0 else ()
    elif n == 2:
        u = rng.random()
        if u < config.probs.P1:
            delivered = contenders
        elif u < config.probs.P1 + config.probs.P2:
            delivered = (contenders[int(rng.random() < 0.5)],)
        else:
            delivered = ()
    else:
        delivered = ()
    delays = []
    for k in delivered:
        a = state.arrivals[k, state.head[k]]
        delays.append((k, t - a + 1, t - state.hol[k] + 1))
        state.head[k] += 1
        state.n_departures += 1
        if state.tail[k] > state.head[k]:
            state.hol[k] = max(state.arrivals[k, state.head[k]], t + 1)
    state.last_active = active
    state.last_delays = delays
    state.slot += 1
    return state, SlotOutcome(contenders, tuple(sorted(delivered)), classify(n, len(delivered)))


# -- runs --------------------------------------------------------------------


def _batch_se(num: np.ndarray, den: np.ndarray) -> float:
    """Standard error of a ratio estimate from batch means."""
    ok = den > 0
    if ok.sum() < 2:
        return float("nan")
    x = num[ok] / den[ok]
    return float(x.std(ddof=1) / np.sqrt(ok.sum()))


def _ratio(a, b):
    return float(a / b) if b else float("nan")


def _stats_from_acc(acc: np.ndarray, J: int, n_slots: int, state: QueueState) -> SimStats:
    tot = acc.sum(axis=0)
    per = tot[5 : 5 + 4 * J].reshape(J, 4)
    hist = {c: int(v) for c, v in zip(CLASSES, tot[5 + 4 * J :])}
    batch_slots = acc[:, 5 + 4 * J :].sum(axis=1)
    return SimStats(
        q_measured=tot[0] / (J * n_slots),
        throughput=tot[1] / n_slots,
        mean_total_delay=_ratio(tot[2], tot[4]),
        mean_service_delay=_ratio(tot[3], tot[4]),
        q_per_user=per[:, 0] / n_slots,
        throughput_per_user=per[:, 1] / n_slots,
        total_delay_per_user=np.array([_ratio(per[k, 2], per[k, 1]) for k in range(J)]),
        service_delay_per_user=np.array([_ratio(per[k, 3], per[k, 1]) for k in range(J)]),
        histogram=hist,
        q_se=_batch_se(acc[:, 0], J * batch_slots),
        throughput_se=_batch_se(acc[:, 1], batch_slots),
        total_delay_se=_batch_se(acc[:, 2], acc[:, 4]),
        service_delay_se=_batch_se(acc[:, 3], acc[:, 4]),
        n_slots=n_slots,
        arrivals=state.n_arrivals,
        departures=state.n_departures,
        final_backlog=int(state.backlog.sum()),
    )


def run(config: SimConfig, state: QueueState | None = None) -> SimStats:
    """Warm up (always abstract) and then measure in the configured mode."""
    J = config.J
    n = config.n_measure
    warm_seed, meas_seed, phy_seq = _stream_seeds(config.seed)
    state = QueueState.empty(J, config.warmup_slots + n + 1) if state is None else state
    _advance_abstract(state, config, config.warmup_slots, warm_seed)
    n_batches = min(N_BATCHES, n)
    acc = np.zeros((n_batches, 5 + 4 * J + len(CLASSES)))
    if config.mode == "abstract":
        _advance_abstract(state, config, n, meas_seed, acc)
        return _stats_from_acc(acc, J, n, state)
    rng = np.random.default_rng(phy_seq)
    batch_len = max(n // n_batches, 1)
    for i in range(n):
        b = min(i // batch_len, n_batches - 1)
        _, out = step_slot(state, config, rng)
        active = state.last_active
        acc[b, 0] += len(active)
        acc[b, 5 + 4 * active] += 1
        acc[b, 5 + 4 * J + CLASSES.index(out.classification)] += 1
        for k, tot, srv in state.last_delays:
            acc[b, 1:5] += (1, tot, srv, 1)
            acc[b, 6 + 4 * k : 9 + 4 * k] += (1, tot, srv)
    return _stats_from_acc(acc, J, n, state)


@dataclass(eq=False)
class SweepRow:
    r: float
    p: float
    stats: SimStats


def cell_seed(seed: int, r: float, p: float) -> int:
    """Seed of one sweep cell, independent of evaluation order."""
    key = [int(seed), int(round(r * 1e9)), int(round(p * 1e9))]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def sweep(base: SimConfig, r_grid, p_grid) -> list[SweepRow]:
    """Cartesian product of arrival rates and contention probabilities."""
    rows = []
    for r, p in product(r_grid, p_grid):
        cfg = replace(base, r=float(r), p=float(p), seed=cell_seed(base.seed, r, p))
        rows.append(SweepRow(float(r), float(p), run(cfg)))
    return rows
