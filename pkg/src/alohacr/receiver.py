"""Base-station receive chain.

Front-end low-pass -> pilot synchronisation with deflation -> polyphase
observation -> separation (blind JADE, pilot-trained LS, or plain SIC) ->
PLL -> strongest-source selection -> decode -> gain refinement -> deflation
-> second user.

Everything after the front-end filter works on the filtered signal, so the
synchronisation templates, the mixing matrix and the SIC reconstructions are
all built from the effective pulses ``p * h``.  Without the filter the
out-of-band noise at 32 samples/symbol is amplified by the badly conditioned
4 x 4 polyphase inverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.signal import correlate, fftconvolve, firwin

from .channel import (
    N_ID_BITS,
    SYMBOL_RATE,
    BasebandSignal,
    FrameLayout,
    encode_packet,
    fractional_delay,
    pulse_train,
)
from .coding import (
    CodeBook,
    conv_encode,
    deinterleave,
    dqpsk_demodulate,
    int_to_bits,
    interleave,
    viterbi_decode,
)
from .pulses import PulseShape, design_pulse
from .separation import (
    DEFAULT_OFFSETS,
    WINDOW_PEAK,
    ConvergenceError,
    MixingEstimate,
    build_mixing_matrix,
    jade_separate,
    ls_equalize,
    polyphase_decompose,
)

MODES = ("blind", "training", "sic_only")
N_BURST = 415

_QPSK = np.exp(1j * np.pi / 4 * np.array([1, 3, 5, 7]))


@dataclass(frozen=True)
class ReceiverConfig:
    P: int = 4
    offsets: tuple[int, ...] = DEFAULT_OFFSETS
    layout: FrameLayout = field(default_factory=FrameLayout)
    frontend_taps: int = 257
    frontend_cutoff: float = 1.0  # in units of the symbol rate
    detection_factor: float = 4.0
    id_tolerance: int = 2
    pll_bandwidth: float = 0.01
    pll_damping: float = 0.707
    symbol_interval: float = 1.0 / SYMBOL_RATE

    def __post_init__(self):
        if len(self.offsets) != self.P:
            raise ValueError("one sampling offset per polyphase branch")
        if self.P < 4:
            raise ValueError("two users need P >= 4")
        if np.any(np.diff(self.offsets) <= 0):
            raise ValueError("sampling offsets must increase")


@dataclass(frozen=True)
class SyncResult:
    user_id: int
    delay_hat: int
    gain_hat: complex
    peak_ratio: float = float("nan")  # peak over median correlation


@dataclass(frozen=True)
class DecodeResult:
    user_id: int
    payload: np.ndarray
    shift: int
    id_distance: int
    code_mismatch: int


@dataclass
class RecoveredPacket:
    user_id: int
    payload_bits: np.ndarray
    bit_errors: int | None = None


@dataclass
class ReceiverReport:
    mode: str
    recovered: list[RecoveredPacket] = field(default_factory=list)
    # PLL-corrected symbol streams committed for each stage (raw BER measurement)
    streams: list[np.ndarray] = field(default_factory=list)
    sync: list[SyncResult] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def recovered_ids(self) -> list[int]:
        return [r.user_id for r in self.recovered]


class PLLOutput:
    """Unpacks as ``(symbols, phase, cfo_hat)``; also carries lock diagnostics."""

    def __init__(self, symbols, phase, cfo_hat, variance, locked):
        self.symbols = symbols
        self.phase = phase
        self.cfo_hat = cfo_hat
        self.variance = variance
        self.locked = locked

    def __iter__(self):
        return iter((self.symbols, self.phase, self.cfo_hat))


# --------------------------------------------------------------------------
# PLL and source ranking


def _loop_gains(bandwidth: float, damping: float) -> tuple[float, float]:
    theta = bandwidth / (damping + 1 / (4 * damping))
    d = 1 + 2 * damping * theta + theta ** 2
    return 4 * damping * theta / d, 4 * theta ** 2 / d


def _qpsk_decision(y: np.ndarray) -> np.ndarray:
    return (np.sign(y.real) + 1j * np.sign(y.imag)) / np.sqrt(2)


def constellation_variance(symbols: np.ndarray) -> float:
    """Mean squared distance to the nearest QPSK point after RMS normalisation."""
    y = np.asarray(symbols, dtype=complex)
    rms = np.sqrt(np.mean(np.abs(y) ** 2))
    if rms == 0:
        return np.inf
    y = y / rms
    return float(np.mean(np.abs(y - _qpsk_decision(y)) ** 2))


def pll_track(
    symbols,
    bandwidth: float = 0.01,
    damping: float = 0.707,
    symbol_interval: float = 1.0 / SYMBOL_RATE,
    lock_threshold: float = 0.25,
) -> PLLOutput:
    """Second-order decision-directed QPSK phase-locked loop.

    The loop starts from the fourth-power phase estimate.  ``cfo_hat`` (Hz) is
    the mean slope of the phase trajectory over the second half of the burst,
    after the loop has pulled in.
    """
    x = np.asarray(symbols, dtype=complex)
    n = len(x)
    if n < 4:
        raise ValueError("need at least 4 symbols")
    rms = np.sqrt(np.mean(np.abs(x) ** 2))
    if rms == 0:
        return PLLOutput(x.copy(), np.zeros(n), 0.0, np.inf, False)
    xn = x / rms
    kp, ki = _loop_gains(bandwidth, damping)
    phi = np.angle(-np.mean(xn ** 4)) / 4
    nu = 0.0
    phase = np.empty(n)
    for i in range(n):
        phase[i] = phi
        y = xn[i] * np.exp(-1j * phi)
        d = _qpsk_decision(y)
        e = (y * np.conj(d)).imag
        nu += ki * e
        phi += kp * e + nu
    phase = np.unwrap(phase)
    half = n // 2
    slope = np.polyfit(np.arange(half, n), phase[half:], 1)[0]
    out = x * np.exp(-1j * phase)
    var = constellation_variance(out)
    return PLLOutput(out, phase, slope / (2 * np.pi * symbol_interval), var, var < lock_threshold)


def select_strongest(sources) -> int:
    """Index of the source with the smallest post-PLL constellation variance; ties -> lowest."""
    sources = list(sources)
    if not sources:
        raise ValueError("need at least one candidate")
    return int(np.argmin([pll_track(s).variance for s in sources]))


# --------------------------------------------------------------------------
# decoding


def _id_table(id_book) -> tuple[np.ndarray, np.ndarray]:
    ids = np.array(list(id_book), dtype=np.int64)
    bits = np.array([int_to_bits(int(u), N_ID_BITS) for u in ids], dtype=np.uint8)
    return ids, bits


def decode_packet(symbols, id_book, shifts=(0, 1, 2), id_tolerance: int = 2) -> DecodeResult | None:
    """DQPSK demod -> deinterleave -> Viterbi -> id gate, over candidate burst starts.

    ``symbols`` holds a stream that contains the 415-symbol burst (reference
    first) starting at one of ``shifts``.  Returns ``None`` when no shift
    yields an id within ``id_tolerance`` bits of an entry of ``id_book``.
    """
    x = np.asarray(symbols, dtype=complex)
    shifts = [int(s) for s in shifts if s >= 0 and s + N_BURST <= len(x)]
    if not shifts:
        raise ValueError(f"need at least {N_BURST} symbols for decoding")
    ids, id_bits = _id_table(id_book)
    bursts = np.stack([x[s : s + N_BURST] for s in shifts])
    raw = dqpsk_demodulate(bursts).reshape(len(shifts), -1)
    decoded = viterbi_decode(deinterleave(raw))
    dist = (decoded[:, None, :N_ID_BITS] != id_bits[None]).sum(axis=-1)
    best = None
    for b, s in enumerate(shifts):
        m = int(np.argmin(dist[b]))
        if dist[b, m] > id_tolerance:
            continue
        mismatch = int(np.count_nonzero(interleave(conv_encode(decoded[b])) != raw[b]))
        key = (int(dist[b, m]), mismatch)
        if best is None or key < best[0]:
            best = (key, DecodeResult(int(ids[m]), decoded[b].copy(), s, *key))
    return None if best is None else best[1]


# --------------------------------------------------------------------------
# reconstruction


def _samples(signal) -> np.ndarray:
    return np.asarray(getattr(signal, "samples", signal), dtype=complex)


def _like(signal, samples):
    if isinstance(signal, BasebandSignal):
        return BasebandSignal(samples, signal.samples_per_symbol, signal.symbol_interval)
    return samples


def reconstruct(n_samples, symbols, pulse, delay, cfo=0.0, symbol_interval=1.0 / SYMBOL_RATE):
    """Unit-gain waveform ``sum s(i) p(n - delay - i*sps) e^{j 2 pi F n / fs}``.

    ``delay`` may be fractional.
    """
    d_int = int(np.floor(delay))
    r = pulse_train(symbols, pulse, n_samples, d_int)
    if delay - d_int > 1e-12:
        r = fractional_delay(r, delay - d_int, n_samples)
    if cfo:
        fs = pulse.samples_per_symbol / symbol_interval
        r = r * np.exp(2j * np.pi * cfo * np.arange(n_samples) / fs)
    return r


def refine_gain(signal, symbols, pulse, delay, cfo=0.0, symbol_interval=1.0 / SYMBOL_RATE) -> complex:
    """Least-squares channel gain from the full reconstructed burst.

    ``delay`` is the sample index of the first symbol's peak.
    """
    x = _samples(signal)
    r = reconstruct(len(x), symbols, pulse, delay, cfo, symbol_interval)
    e = np.vdot(r, r).real
    return complex(np.vdot(r, x) / e) if e > 0 else 0j


def sic_deflate(
    signal, symbols_hat, pulse, gain_hat, delay_hat, F_hat=0.0, symbol_interval=1.0 / SYMBOL_RATE
):
    """Subtract ``gain_hat`` times the reconstructed burst; returns the residual."""
    x = _samples(signal)
    r = reconstruct(len(x), symbols_hat, pulse, delay_hat, F_hat, symbol_interval)
    return _like(signal, x - gain_hat * r)


# --------------------------------------------------------------------------
# the receiver


class Receiver:
    """Holds the front-end filter, effective pulses and pilot templates."""

    def __init__(self, config: ReceiverConfig | None = None, codebook: CodeBook | None = None):
        self.config = ReceiverConfig() if config is None else config
        self.codebook = CodeBook.default() if codebook is None else codebook
        lay = self.config.layout
        sps = lay.samples_per_symbol
        self.frontend = firwin(
            self.config.frontend_taps, 2 * self.config.frontend_cutoff / sps
        )
        self.payload_pulse = self._effective(design_pulse("iota", sps, lay.pulse_span))
        self.pilot_pulse = self._effective(design_pulse("rrc", sps, lay.pulse_span))
        qc = self.pilot_pulse.center
        length = (lay.n_pilot - 1) * sps + 2 * qc + 1
        self.templates = {
            uid: pulse_train(chips, self.pilot_pulse, length, qc) for uid, chips in self.codebook.items()
        }
        self.template_energy = {uid: np.vdot(t, t).real for uid, t in self.templates.items()}
        self._pad = qc

    def _effective(self, pulse: PulseShape) -> PulseShape:
        taps = np.convolve(pulse.taps, self.frontend)
        span = (len(taps) - 1) // pulse.samples_per_symbol
        return PulseShape(pulse.kind, pulse.samples_per_symbol, span, taps, pulse.rolloff)

    def filter(self, x: np.ndarray) -> np.ndarray:
        d = (len(self.frontend) - 1) // 2
        return fftconvolve(x, self.frontend)[d : d + len(x)]

    # ---- synchronisation

    def _correlate(self, xp: np.ndarray, uid: int) -> np.ndarray:
        return correlate(xp, self.templates[uid], mode="valid", method="fft")

    def _peak(self, xp: np.ndarray, uid: int):
        """(|peak|, delay, gain, peak/median) of one code over the delay window."""
        lay = self.config.layout
        lo = lay.lead + self._pad - self.pilot_pulse.center
        hi = lo + lay.max_delay
        c = self._correlate(xp, uid)
        mag = np.abs(c)
        win = mag[lo : hi + 1]
        k = int(np.argmax(win))
        ratio = win[k] / max(float(np.median(mag)), 1e-300)
        return win[k], k, complex(c[lo + k] / self.template_energy[uid]), float(ratio)

    def _pilot(self, n: int, res: SyncResult) -> np.ndarray:
        lo = self.config.layout.lead + self._pad - self.pilot_pulse.center + res.delay_hat
        out = np.zeros(n, complex)
        t = self.templates[res.user_id]
        out[lo : lo + len(t)] = res.gain_hat * t
        return out

    def synchronize(self, xf: np.ndarray, max_users: int = 2, refine_iters: int = 3):
        """Detect users strongest first, deflating each detected pilot.

        Once a second user is found, both estimates are refined by alternately
        re-correlating each user against the signal with the other user's
        pilot removed.  The detection threshold is relative to the median
        correlation magnitude over all lags of the slot.  Returns
        ``(results, extra)`` where ``extra`` flags one more user above
        threshold beyond ``max_users``.
        """
        xp = np.concatenate([np.zeros(self._pad, complex), xf])
        n = len(xp)
        found: list[SyncResult] = []
        remaining = list(self.templates)
        while remaining:
            residual = xp - sum((self._pilot(n, r) for r in found), np.zeros(n, complex))
            peaks = [(self._peak(residual, uid), uid) for uid in remaining]
            (mag, d, g, ratio), uid = max(peaks, key=lambda t: t[0][0])
            if ratio <= self.config.detection_factor:
                return found, False
            if len(found) == max_users:
                return found, True
            found.append(SyncResult(uid, d, g, ratio))
            remaining.remove(uid)
            if len(found) > 1:
                for _ in range(refine_iters):
                    for k, r in enumerate(found):
                        others = sum(self._pilot(n, o) for j, o in enumerate(found) if j != k)
                        _, d, g, _ = self._peak(xp - others, r.user_id)
                        found[k] = SyncResult(r.user_id, d, g, r.peak_ratio)
        return found, False

    # ---- geometry

    def _geometry(self, delays):
        """Window anchor, observation index range and per-user (tau, n) for the payload."""
        lay = self.config.layout
        sps = lay.samples_per_symbol
        offs = self.config.offsets
        span = offs[-1] - offs[0]
        peaks = [lay.payload_start + d for d in delays]
        r = sorted({p % sps for p in peaks})
        gaps = [((r[(i + 1) % len(r)] - r[i] - 1) % sps) + 1 for i in range(len(r))]
        a = int(np.argmax(gaps))
        start_mod = (r[a] + max(0, (gaps[a] - span) // 2)) % sps
        # absolute window start: first position >= the earliest payload peak with that residue
        p0 = min(peaks)
        w0 = p0 + ((start_mod - p0) % sps)
        anchor = w0 - offs[0]
        users = []
        for p in peaks:
            n_k = (w0 - p) // sps
            users.append((p + n_k * sps - anchor - WINDOW_PEAK, n_k))
        i_lo = min(-n - 1 for _, n in users)
        i_hi = max(N_BURST - 1 - n for _, n in users)
        return anchor, i_lo, i_hi, users

    def _observe(self, x, anchor, i_lo, i_hi):
        return polyphase_decompose(
            x,
            anchor,
            self.config.P,
            self.config.offsets,
            n_vectors=i_hi - i_lo + 1,
            first_index=i_lo,
            samples_per_symbol=self.config.layout.samples_per_symbol,
        )

    # ---- stages

    def _pll(self, s):
        c = self.config
        return pll_track(s, c.pll_bandwidth, c.pll_damping, c.symbol_interval)

    def _decode_ranked(self, sources, shifts, exclude=()):
        """PLL every source, then decode in order of increasing variance."""
        book = [u for u in self.codebook.user_ids if u not in exclude]
        plls = [self._pll(s) for s in sources]
        order = np.argsort([p.variance for p in plls], kind="stable")
        for k in order:
            dec = decode_packet(plls[k].symbols, book, shifts, self.config.id_tolerance)
            if dec is not None:
                return dec, plls[k], int(k), plls, order
        return None, None, None, plls, order

    def _fallback_stream(self, plls, order, taken=None):
        """Best-variance stream not a one-symbol copy of ``taken``."""
        for k in order:
            s = plls[k].symbols
            if taken is not None and _max_lag_corr(s, taken) > 0.5:
                continue
            return s
        return plls[order[0]].symbols

    def _deflate(self, xf, dec: DecodeResult, pll, sync):
        lay = self.config.layout
        c = self.config
        burst = encode_packet(dec.user_id, dec.payload[N_ID_BITS:], self.codebook).burst_symbols
        pulse = self.payload_pulse
        by_id = {s.user_id: s for s in sync}
        if dec.user_id in by_id:
            centre = [by_id[dec.user_id].delay_hat]
        else:
            centre = [s.delay_hat for s in sync]
        cands = sorted({lay.payload_start + d + k for d in centre for k in range(-3, 4)})

        def loss(d):
            return -abs(refine_gain(xf, burst, pulse, d, pll.cfo_hat, c.symbol_interval))

        best = cands[int(np.argmin([loss(d) for d in cands]))]
        # sub-sample refinement around the best integer delay
        opt = minimize_scalar(loss, bounds=(best - 1, best + 1), method="bounded",
                              options={"xatol": 1e-3})
        delay = float(opt.x) if opt.fun < loss(best) else float(best)
        g = refine_gain(xf, burst, pulse, delay, pll.cfo_hat, c.symbol_interval)
        residual = sic_deflate(xf, burst, pulse, g, delay, pll.cfo_hat, c.symbol_interval)
        # the pilot shares the payload's delay and gain
        chips = self.codebook[dec.user_id]
        pilot_peak = delay - lay.payload_start + lay.lead
        residual = sic_deflate(
            residual, chips, self.pilot_pulse, g, pilot_peak, pll.cfo_hat, c.symbol_interval
        )
        return residual, g, delay

    def _too_many_users(self, residual, decoded_id) -> bool:
        """Two more pilots left after removing a decoded user means three or more users."""
        found, _ = self.synchronize(residual)
        return sum(r.user_id != decoded_id for r in found) >= 2

    def _sample_peaks(self, x, sync: SyncResult):
        lay = self.config.layout
        sps = lay.samples_per_symbol
        idx = lay.payload_start + sync.delay_hat + np.arange(N_BURST) * sps
        return x[idx] / sync.gain_hat

    def receive(self, signal, mode: str = "blind", truth=None) -> ReceiverReport:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = _samples(signal)
        if len(x) < self.config.layout.n_samples:
            raise ValueError("signal shorter than one burst")
        xf = self.filter(x)
        report = ReceiverReport(mode)
        sync, extra = self.synchronize(xf)
        report.sync = sync
        report.diagnostics["sync_peak_ratio"] = [s.peak_ratio for s in sync]
        if extra:
            _declare_collision(report)
            return _score(report, truth)
        if not sync:
            return _score(report, truth)
        try:
            if mode == "sic_only":
                self._receive_sic(xf, sync, report)
            else:
                self._receive_separated(xf, sync, mode, report)
        except (ConvergenceError, np.linalg.LinAlgError) as exc:
            report.diagnostics["failure"] = repr(exc)
        return _score(report, truth)

    def _receive_separated(self, xf, sync, mode, report):
        anchor, i_lo, i_hi, users = self._geometry([s.delay_hat for s in sync])
        n_obs = i_hi - i_lo + 1
        shifts = range(0, n_obs - N_BURST + 1)
        obs = self._observe(xf, anchor, i_lo, i_hi)
        if mode == "blind":
            mix, sources = jade_separate(obs, self.config.P)
        else:
            mix = build_mixing_matrix(
                self.payload_pulse,
                [u[0] for u in users],
                [s.gain_hat for s in sync],
                self.config.P,
                self.config.offsets,
            )
            sources = ls_equalize(mix, obs)
        report.diagnostics["condition_number"] = mix.condition_number
        dec, pll, k, plls, order = self._decode_ranked(sources, shifts)
        report.diagnostics["variances"] = [p.variance for p in plls]
        if dec is None:
            first = self._fallback_stream(plls, order)
            report.streams = [first, self._fallback_stream(plls, order, taken=first)]
            return
        report.recovered.append(RecoveredPacket(dec.user_id, dec.payload))
        report.streams.append(pll.symbols)
        report.diagnostics["cfo_hat"] = [pll.cfo_hat]
        residual, g, _ = self._deflate(xf, dec, pll, sync)
        report.diagnostics["refined_gain"] = [g]
        if self._too_many_users(residual, dec.user_id):
            _declare_collision(report)
            return

        robs = self._observe(residual, anchor, i_lo, i_hi)
        if mode == "blind":
            _, sources2 = jade_separate(robs, self.config.P)
        else:
            others = [i for i, s in enumerate(sync) if s.user_id != dec.user_id]
            if not others:
                return
            j = others[0]
            mix2 = build_mixing_matrix(
                self.payload_pulse, [users[j][0]], [sync[j].gain_hat],
                self.config.P, self.config.offsets,
            )
            sources2 = ls_equalize(mix2, robs)
        dec2, pll2, _, plls2, order2 = self._decode_ranked(sources2, shifts, exclude=(dec.user_id,))
        if dec2 is None:
            report.streams.append(self._fallback_stream(plls2, order2))
            return
        report.recovered.append(RecoveredPacket(dec2.user_id, dec2.payload))
        report.streams.append(pll2.symbols)
        report.diagnostics["cfo_hat"].append(pll2.cfo_hat)

    def _receive_sic(self, xf, sync, report):
        order = sorted(range(len(sync)), key=lambda i: -abs(sync[i].gain_hat))
        first = sync[order[0]]
        s1 = self._pll(self._sample_peaks(xf, first))
        report.streams.append(s1.symbols)
        dec = decode_packet(s1.symbols, self.codebook.user_ids, (0,), self.config.id_tolerance)
        residual = xf
        if dec is not None:
            report.recovered.append(RecoveredPacket(dec.user_id, dec.payload))
            residual, _, _ = self._deflate(xf, dec, s1, sync)
            if self._too_many_users(residual, dec.user_id):
                _declare_collision(report)
                return
        if len(sync) < 2:
            return
        second = sync[order[1]]
        s2 = self._pll(self._sample_peaks(residual, second))
        report.streams.append(s2.symbols)
        exclude = () if dec is None else (dec.user_id,)
        book = [u for u in self.codebook.user_ids if u not in exclude]
        dec2 = decode_packet(s2.symbols, book, (0,), self.config.id_tolerance)
        if dec2 is not None:
            report.recovered.append(RecoveredPacket(dec2.user_id, dec2.payload))


def _declare_collision(report: ReceiverReport):
    # three or more users: unresolvable, nothing is delivered
    report.recovered.clear()
    report.diagnostics["collision"] = ">2"


def _max_lag_corr(a, b) -> float:
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    best = 0.0
    for lag in (-1, 0, 1):
        u = a[max(lag, 0) : n + min(lag, 0)]
        v = b[max(-lag, 0) : n + min(-lag, 0)]
        den = np.linalg.norm(u) * np.linalg.norm(v)
        if den > 0:
            best = max(best, abs(np.vdot(u, v)) / den)
    return best


def _score(report: ReceiverReport, truth):
    if truth is None:
        return report
    by_id = {p.user_id: p for p in truth}
    for r in report.recovered:
        t = by_id.get(r.user_id)
        if t is not None:
            r.bit_errors = int(np.count_nonzero(r.payload_bits != t.payload))
    return report


@lru_cache(maxsize=8)
def _default_receiver(config: ReceiverConfig | None) -> Receiver:
    return Receiver(config)


def synchronize(signal, codebook: CodeBook | None = None, config: ReceiverConfig | None = None):
    """Pilot correlation with deflation; at most two users, strongest first."""
    rx = _default_receiver(config) if codebook is None else Receiver(config, codebook)
    return rx.synchronize(rx.filter(_samples(signal)))[0]


def receive_slot(
    signal,
    codebook: CodeBook | None = None,
    mode: str = "blind",
    config: ReceiverConfig | None = None,
    truth=None,
) -> ReceiverReport:
    """Treat the slot as a two-user collision and recover what can be recovered."""
    rx = _default_receiver(config) if codebook is None else Receiver(config, codebook)
    return rx.receive(signal, mode, truth)
