"""Channel coding and pilot sequences.

Rate-1/2 convolutional code (K=7, generators 133/171 octal) with a batched
hard-decision Viterbi decoder, a 23 x 36 block interleaver, DQPSK mapping,
and length-31 m-sequence pilots padded to 32 chips.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import combinations

import numpy as np

CONSTRAINT_LENGTH = 7
GENERATORS = (0o133, 0o171)
N_STATES = 1 << (CONSTRAINT_LENGTH - 1)

INTERLEAVER_ROWS = 23
INTERLEAVER_COLS = 36

DQPSK_REFERENCE = np.exp(1j * np.pi / 4)
# Gray-coded dibit -> number of quarter turns
_DIBIT_TO_TURNS = {(0, 0): 0, (0, 1): 1, (1, 1): 2, (1, 0): 3}
_TURNS_TO_DIBIT = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=np.uint8)

PILOT_LENGTH = 32
# primitive degree-5 polynomials, bit k = coefficient of x^k
PRIMITIVE_POLYS_DEG5 = (0x25, 0x29, 0x2F, 0x37, 0x3B, 0x3D)


def _parity(x: np.ndarray) -> np.ndarray:
    x = x.copy()
    out = np.zeros_like(x)
    while np.any(x):
        out ^= x & 1
        x >>= 1
    return out


@lru_cache(maxsize=None)
def _trellis():
    """next_state[s, b], outputs[s, b, 2] for the K=7 encoder."""
    states = np.arange(N_STATES)
    next_state = np.empty((N_STATES, 2), dtype=np.int64)
    outputs = np.empty((N_STATES, 2, 2), dtype=np.uint8)
    for b in (0, 1):
        reg = (b << (CONSTRAINT_LENGTH - 1)) | states
        next_state[:, b] = reg >> 1
        for g, poly in enumerate(GENERATORS):
            outputs[:, b, g] = _parity(reg & poly)
    return next_state, outputs


def conv_encode(bits: np.ndarray) -> np.ndarray:
    """Encode without tail bits: n input bits -> 2n coded bits."""
    bits = np.asarray(bits, dtype=np.uint8)
    next_state, outputs = _trellis()
    out = np.empty((len(bits), 2), dtype=np.uint8)
    s = 0
    for i, b in enumerate(bits):
        out[i] = outputs[s, b]
        s = next_state[s, b]
    return out.ravel()


def viterbi_decode(coded: np.ndarray) -> np.ndarray:
    """Hard-decision Viterbi decoding.

    Accepts one coded sequence (shape ``(2n,)``) or a batch ``(B, 2n)``;
    the encoder starts in the zero state and the best final state is taken.
    """
    coded = np.asarray(coded, dtype=np.int32)
    single = coded.ndim == 1
    if single:
        coded = coded[None, :]
    B, L = coded.shape
    if L % 2:
        raise ValueError("coded length must be even")
    T = L // 2
    next_state, outputs = _trellis()

    # predecessors of each next state: ns = (b << 5) | (ps >> 1)
    ns = np.arange(N_STATES)
    b_in = ns >> (CONSTRAINT_LENGTH - 2)
    preds = np.stack([((ns << 1) & (N_STATES - 1)) | x for x in (0, 1)], axis=1)
    pred_out = outputs[preds, b_in[:, None]].astype(np.int32)  # (64, 2, 2)

    big = np.int32(1 << 28)
    metric = np.full((B, N_STATES), big, dtype=np.int32)
    metric[:, 0] = 0
    choice = np.empty((T, B, N_STATES), dtype=np.uint8)
    r = coded.reshape(B, T, 2)
    for t in range(T):
        rt = r[:, t, :]  # (B, 2)
        bm = (pred_out[None, :, :, 0] != rt[:, None, None, 0]).astype(np.int32) + (
            pred_out[None, :, :, 1] != rt[:, None, None, 1]
        )
        cand = metric[:, preds] + bm  # (B, 64, 2)
        pick = cand[:, :, 1] < cand[:, :, 0]
        choice[t] = pick
        metric = np.where(pick, cand[:, :, 1], cand[:, :, 0])
        metric -= metric.min(axis=1, keepdims=True)

    state = metric.argmin(axis=1)
    bits = np.empty((B, T), dtype=np.uint8)
    rows = np.arange(B)
    for t in range(T - 1, -1, -1):
        bits[:, t] = state >> (CONSTRAINT_LENGTH - 2)
        x = choice[t, rows, state]
        state = preds[state, x]
    return bits[0] if single else bits


def interleave(bits: np.ndarray) -> np.ndarray:
    """Write row-wise into a 23 x 36 matrix, read column-wise."""
    bits = np.asarray(bits)
    return bits.reshape(INTERLEAVER_ROWS, INTERLEAVER_COLS).T.reshape(bits.shape)


def deinterleave(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits)
    lead = bits.shape[:-1]
    m = bits.reshape(*lead, INTERLEAVER_COLS, INTERLEAVER_ROWS)
    return np.swapaxes(m, -1, -2).reshape(bits.shape)


def dqpsk_modulate(bits: np.ndarray) -> np.ndarray:
    """Differentially encode bit pairs; returns the symbols *after* the reference."""
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1, 2)
    turns = np.array([_DIBIT_TO_TURNS[tuple(b)] for b in bits])
    return DQPSK_REFERENCE * np.exp(1j * np.pi / 2 * np.cumsum(turns))


def dqpsk_demodulate(symbols: np.ndarray) -> np.ndarray:
    """Hard differential detection of a burst that starts with its reference symbol.

    Works on the last axis, so a batch of bursts can be demodulated at once.
    """
    symbols = np.asarray(symbols)
    diff = symbols[..., 1:] * np.conj(symbols[..., :-1])
    turns = np.mod(np.round(np.angle(diff) / (np.pi / 2)).astype(np.int64), 4)
    return _TURNS_TO_DIBIT[turns].reshape(*symbols.shape[:-1], -1)


def int_to_bits(value: int, width: int = 32) -> np.ndarray:
    return np.array([(value >> (width - 1 - k)) & 1 for k in range(width)], dtype=np.uint8)


def bits_to_int(bits: np.ndarray) -> int:
    out = 0
    for b in np.asarray(bits, dtype=np.uint8):
        out = (out << 1) | int(b)
    return out


def m_sequence(poly: int, seed: int = 1) -> np.ndarray:
    """One period of the binary m-sequence of a degree-5 Fibonacci LFSR, as 0/1."""
    degree = poly.bit_length() - 1
    state = seed & ((1 << degree) - 1)
    if state == 0:
        raise ValueError("LFSR seed must be nonzero")
    taps = [k for k in range(degree) if (poly >> k) & 1]
    out = []
    for _ in range((1 << degree) - 1):
        out.append(state & 1)
        fb = 0
        for k in taps:
            fb ^= (state >> k) & 1
        state = (state >> 1) | (fb << (degree - 1))
    return np.array(out, dtype=np.uint8)


def pilot_chips(poly: int, shift: int = 0) -> np.ndarray:
    """+-1 chips: cyclically shifted m-sequence plus one repeated chip."""
    seq = np.roll(m_sequence(poly), -shift)
    seq = np.append(seq, seq[0])
    return 1.0 - 2.0 * seq


def aperiodic_xcorr_peak(a: np.ndarray, b: np.ndarray) -> float:
    """Largest |aperiodic cross-correlation| over all lags, normalised by length."""
    return float(np.max(np.abs(np.correlate(a, b, mode="full")))) / len(a)


def aperiodic_acorr_sidelobe(a: np.ndarray) -> float:
    c = np.abs(np.correlate(a, a, mode="full"))
    c[len(a) - 1] = 0
    return float(c.max()) / len(a)


def _raised_cosine(t: np.ndarray, beta: float = 0.25) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    den = 1 - (2 * beta * t) ** 2
    sing = np.isclose(den, 0)
    out = np.sinc(t) * np.cos(np.pi * beta * t)
    out[~sing] /= den[~sing]
    out[sing] = np.pi / 4 * np.sinc(1 / (2 * beta))
    return out


def shaped_xcorr_near(a: np.ndarray, b: np.ndarray, max_lag: float = 1.5) -> float:
    """Peak |cross-correlation| of two pulse-shaped chip sequences for |lag| <= max_lag chips.

    After RRC shaping and matched filtering the chip-rate correlation is
    interpolated by a raised cosine, so fractional-chip lags are covered.
    """
    n = len(a)
    lags = np.arange(-(n - 1), n)
    taus = np.arange(-max_lag, max_lag + 1e-9, 1 / 8)
    xc = np.correlate(a, b, mode="full") / n
    return float(np.max(np.abs(_raised_cosine(taus[:, None] - lags[None, :]) @ xc)))


@lru_cache(maxsize=None)
def pilot_family(n_users: int = 4, max_global: float = 10 / 32) -> tuple[tuple[int, int], ...]:
    """Pick (polynomial, shift) pairs for ``n_users`` pilots.

    Every user gets a distinct primitive polynomial.  Colliding users are
    typically less than two chips apart, so the family minimises the
    pulse-shaped cross-correlation over lags within 1.5 chips, subject to the
    chip-aligned cross-correlation staying below ``max_global`` at every lag.
    Candidates are the shifts with the lowest autocorrelation sidelobes.
    Deterministic.
    """
    if n_users > len(PRIMITIVE_POLYS_DEG5):
        raise ValueError(f"at most {len(PRIMITIVE_POLYS_DEG5)} distinct pilots available")
    cands = []
    for poly in PRIMITIVE_POLYS_DEG5:
        side = [aperiodic_acorr_sidelobe(pilot_chips(poly, s)) for s in range(31)]
        cands.extend((poly, int(s)) for s in np.argsort(side, kind="stable")[:12])
    if n_users == 1:
        return (cands[0],)
    chips = [pilot_chips(*c) for c in cands]
    n = len(cands)
    near = np.full((n, n), np.inf)
    for i, j in combinations(range(n), 2):
        if cands[i][0] == cands[j][0]:
            continue
        if aperiodic_xcorr_peak(chips[i], chips[j]) > max_global + 1e-12:
            continue
        near[i, j] = near[j, i] = shaped_xcorr_near(chips[i], chips[j])
    # smallest threshold admitting an n_users-clique (distinct polys are implied)
    for th in np.unique(near[np.isfinite(near)]):
        adj = near <= th
        clique = _find_clique(adj, n_users)
        if clique is not None:
            return tuple(cands[i] for i in clique)
    raise ValueError("no admissible pilot family")


def _find_clique(adj: np.ndarray, k: int, chosen=(), pool=None):
    pool = np.arange(len(adj)) if pool is None else pool
    if len(chosen) == k:
        return chosen
    for idx, v in enumerate(pool):
        rest = pool[idx + 1 :]
        rest = rest[adj[v, rest]]
        if len(rest) < k - len(chosen) - 1:
            continue
        found = _find_clique(adj, k, chosen + (int(v),), rest)
        if found is not None:
            return found
    return None


DEFAULT_USER_IDS = (0x1F2E3D4C, 0x5B6A7988, 0x97A6B5C4, 0xD3E2F107)


class CodeBook(dict):
    """Mapping user_id -> pilot chips (+-1, length 32)."""

    @classmethod
    def default(cls, user_ids=DEFAULT_USER_IDS) -> "CodeBook":
        family = pilot_family(len(user_ids))
        return cls({uid: pilot_chips(*fam) for uid, fam in zip(user_ids, family)})

    @property
    def user_ids(self) -> list[int]:
        return list(self.keys())

    def max_cross_correlation(self) -> float:
        vals = list(self.values())
        return max(
            (aperiodic_xcorr_peak(a, b) for a, b in combinations(vals, 2)), default=0.0
        )
