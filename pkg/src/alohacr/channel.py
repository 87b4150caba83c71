"""Packets, transmit waveforms and the flat-fading multi-user channel."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .coding import (
    DQPSK_REFERENCE,
    CodeBook,
    conv_encode,
    dqpsk_modulate,
    int_to_bits,
    interleave,
)
from .pulses import PulseShape

N_DATA_BITS = 382
N_ID_BITS = 32
N_PAYLOAD_BITS = N_ID_BITS + N_DATA_BITS
N_CODED_BITS = 2 * N_PAYLOAD_BITS
N_SYMBOLS = N_CODED_BITS // 2

SYMBOL_RATE = 1.25e6


@dataclass(frozen=True)
class FrameLayout:
    """Sample-level geometry of one burst.

    Pilot chip ``i`` peaks at ``lead + i*sps``; payload symbol ``j`` (``j=0`` is
    the DQPSK reference) peaks at ``payload_start + j*sps`` plus any payload
    delay.  ``max_delay`` samples of headroom are reserved at the end.
    """

    samples_per_symbol: int = 32
    n_pilot: int = 32
    guard_symbols: int = 4
    n_burst: int = N_SYMBOLS + 1
    pulse_span: int = 8
    max_delay: int = 96

    @property
    def lead(self) -> int:
        return self.pulse_span * self.samples_per_symbol // 2

    @property
    def payload_start(self) -> int:
        return self.lead + (self.n_pilot + self.guard_symbols) * self.samples_per_symbol

    @property
    def n_samples(self) -> int:
        sps = self.samples_per_symbol
        last_peak = self.payload_start + (self.n_burst - 1) * sps
        return last_peak + self.lead + sps + 1

    @property
    def n_channel_samples(self) -> int:
        return self.n_samples + self.max_delay


@dataclass(eq=False)
class Packet:
    user_id: int
    payload: np.ndarray  # 414 bits
    coded_bits: np.ndarray  # 828 interleaved coded bits
    pilot_chips: np.ndarray  # 32 x +-1
    symbols: np.ndarray  # 414 DQPSK symbols after the reference

    @property
    def data_bits(self) -> np.ndarray:
        return self.payload[N_ID_BITS:]

    @property
    def burst_symbols(self) -> np.ndarray:
        """Reference symbol followed by the data symbols."""
        return np.concatenate([[DQPSK_REFERENCE], self.symbols])


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    gain: complex = 1.0
    delay: float = 0.0  # seconds, natural + intentional
    cfo: float = 0.0  # Hz
    pilot_chips: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if abs(self.gain) == 0:
            raise ValueError("channel gain must be nonzero")
        if self.delay < 0:
            raise ValueError("delay must be non-negative")

    def delay_samples(self, samples_per_symbol: int, symbol_interval: float) -> int:
        """Delay rounded to the waveform sample grid."""
        return int(round(self.delay / symbol_interval * samples_per_symbol))


@dataclass(eq=False)
class BasebandSignal:
    samples: np.ndarray
    samples_per_symbol: int = 32
    symbol_interval: float = 1.0 / SYMBOL_RATE

    @property
    def sample_rate(self) -> float:
        return self.samples_per_symbol / self.symbol_interval

    def __len__(self) -> int:
        return len(self.samples)


def encode_packet(
    user_id: int,
    data_bits: np.ndarray | None = None,
    codebook: CodeBook | None = None,
    rng_seed: int | None = None,
) -> Packet:
    """Build a packet: id + data -> conv code -> interleave -> DQPSK.

    ``data_bits`` defaults to 382 random bits drawn from ``rng_seed``.
    """
    codebook = CodeBook.default() if codebook is None else codebook
    if user_id not in codebook:
        raise KeyError(f"user id {user_id:#010x} has no code-book entry")
    if data_bits is None:
        data_bits = np.random.default_rng(rng_seed).integers(0, 2, N_DATA_BITS)
    data_bits = np.asarray(data_bits, dtype=np.uint8)
    if data_bits.shape != (N_DATA_BITS,):
        raise ValueError(f"expected {N_DATA_BITS} data bits, got {data_bits.shape}")
    payload = np.concatenate([int_to_bits(user_id, N_ID_BITS), data_bits])
    coded = interleave(conv_encode(payload))
    return Packet(
        user_id=user_id,
        payload=payload,
        coded_bits=coded,
        pilot_chips=np.asarray(codebook[user_id], dtype=float),
        symbols=dqpsk_modulate(coded),
    )


def pulse_train(
    symbols: np.ndarray, pulse: PulseShape, n_samples: int, first_peak: int
) -> np.ndarray:
    """Sum of ``symbols[i] * p(n - first_peak - i*sps)`` over a fixed-length buffer."""
    sps = pulse.samples_per_symbol
    symbols = np.asarray(symbols, dtype=complex)
    up = np.zeros(len(symbols) * sps, dtype=complex)
    up[::sps] = symbols
    full = fftconvolve(up, pulse.taps)  # peak of symbol 0 at index pulse.center
    out = np.zeros(n_samples, dtype=complex)
    start = first_peak - pulse.center
    lo = max(start, 0)
    hi = min(start + len(full), n_samples)
    if hi > lo:
        out[lo:hi] = full[lo - start : hi - start]
    return out


def synthesize_waveform(
    packet: Packet,
    payload_pulse: PulseShape,
    pilot_pulse: PulseShape,
    delay_samples: int = 0,
    layout: FrameLayout | None = None,
) -> BasebandSignal:
    """Pilot chips on the RRC pulse, then the DQPSK burst on the IOTA pulse.

    ``delay_samples`` zeros are inserted ahead of the payload only.
    """
    layout = FrameLayout() if layout is None else layout
    sps = layout.samples_per_symbol
    if payload_pulse.samples_per_symbol != sps or pilot_pulse.samples_per_symbol != sps:
        raise ValueError("pulse samples_per_symbol does not match the frame layout")
    if not 0 <= delay_samples <= sps:
        raise ValueError(f"delay_samples must lie in [0, {sps}]")
    n = layout.n_samples
    pilot = pulse_train(packet.pilot_chips, pilot_pulse, n, layout.lead)
    payload = pulse_train(
        packet.burst_symbols, payload_pulse, n, layout.payload_start + delay_samples
    )
    return BasebandSignal(pilot + payload, sps)


def fractional_delay(x: np.ndarray, delay: float, n_samples: int) -> np.ndarray:
    """Delay ``x`` by ``delay`` samples into a buffer of ``n_samples``.

    The integer part is an index shift; the remainder is a band-limited
    (FFT phase ramp) shift, exact for the oversampled waveforms used here.
    """
    x = np.asarray(x, dtype=complex)
    d_int = int(np.floor(delay))
    frac = delay - d_int
    if frac > 1e-12:
        n_fft = 1 << int(np.ceil(np.log2(len(x) + 64)))
        X = np.fft.fft(x, n_fft)
        f = np.fft.fftfreq(n_fft)
        x = np.fft.ifft(X * np.exp(-2j * np.pi * f * frac))[: len(x) + 1]
    out = np.zeros(n_samples, dtype=complex)
    seg = x[: max(0, n_samples - d_int)]
    out[d_int : d_int + len(seg)] = seg
    return out


def mix_channel(
    waveforms: list[BasebandSignal],
    profiles: list[UserProfile],
    noise_power: float,
    rng: np.random.Generator,
    n_samples: int | None = None,
) -> BasebandSignal:
    """Flat-fading superposition with per-user gain, delay and CFO, plus AWGN.

    Delays act on the sample grid.  The CFO phase is referenced to output sample 0.

    With no waveforms the output is pure noise of length ``n_samples``.
    """
    if len(waveforms) != len(profiles):
        raise ValueError("one profile per waveform is required")
    if waveforms:
        sps = waveforms[0].samples_per_symbol
        Ts = waveforms[0].symbol_interval
        if any(w.samples_per_symbol != sps for w in waveforms):
            raise ValueError("all waveforms must share the same sample rate")
    else:
        sps, Ts = FrameLayout().samples_per_symbol, 1.0 / SYMBOL_RATE
    delays = [p.delay_samples(sps, Ts) for p in profiles]
    if n_samples is None:
        n_samples = max((len(w) + d for w, d in zip(waveforms, delays)), default=0)
        if not waveforms:
            n_samples = FrameLayout().n_channel_samples
    out = np.zeros(n_samples, dtype=complex)
    t = np.arange(n_samples) * (Ts / sps)
    for w, prof, d in zip(waveforms, profiles, delays):
        contrib = prof.gain * fractional_delay(w.samples, d, n_samples)
        if prof.cfo:
            contrib *= np.exp(2j * np.pi * prof.cfo * t)
        out += contrib
    if noise_power > 0:
        out += np.sqrt(noise_power / 2) * (
            rng.standard_normal(n_samples) + 1j * rng.standard_normal(n_samples)
        )
    return BasebandSignal(out, sps, Ts)


def draw_intentional_delay(rng: np.random.Generator, samples_per_symbol: int = 32) -> int:
    """Uniform integer delay on {0, ..., samples_per_symbol}."""
    return int(rng.integers(0, samples_per_symbol + 1))


def payload_power(pulse: PulseShape) -> float:
    """Mean per-sample power of a unit-modulus symbol stream on ``pulse``."""
    return pulse.energy / pulse.samples_per_symbol


def noise_power_for_snr(snr_db: float, pulse: PulseShape) -> float:
    """Per-sample complex noise variance for a per-symbol SNR (Es/N0) of ``snr_db``.

    ``Es`` is the energy of one unit-gain payload symbol, i.e. the pulse energy.
    """
    return pulse.energy * 10.0 ** (-snr_db / 10.0)


def transmit_slot(
    packets: list[Packet],
    profiles: list[UserProfile],
    snr_db: float,
    rng: np.random.Generator,
    layout: FrameLayout | None = None,
    payload_pulse: PulseShape | None = None,
    pilot_pulse: PulseShape | None = None,
) -> BasebandSignal:
    """Synthesize every packet and pass them through the channel.

    Delays come from the profiles and shift pilot and payload together.
    """
    from .pulses import design_pulse

    layout = FrameLayout() if layout is None else layout
    sps = layout.samples_per_symbol
    payload_pulse = payload_pulse or design_pulse("iota", sps, layout.pulse_span)
    pilot_pulse = pilot_pulse or design_pulse("rrc", sps, layout.pulse_span)
    Ts = 1.0 / SYMBOL_RATE
    for prof in profiles:
        if prof.delay_samples(sps, Ts) > layout.max_delay:
            raise ValueError(f"delay exceeds the {layout.max_delay}-sample headroom")
    waves = [synthesize_waveform(p, payload_pulse, pilot_pulse, 0, layout) for p in packets]
    noise = noise_power_for_snr(snr_db, payload_pulse) if np.isfinite(snr_db) else 0.0
    return mix_channel(waves, profiles, noise, rng, layout.n_channel_samples)
