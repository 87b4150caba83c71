"""Slotted ALOHA with two-user collision resolution: physical layer, receiver,
intentional-delay design and MAC analysis/simulation."""
from .channel import (
    BasebandSignal,
    FrameLayout,
    Packet,
    UserProfile,
    encode_packet,
    mix_channel,
    synthesize_waveform,
    transmit_slot,
)
from .coding import CodeBook
from .delay_design import DelayModel, NaturalDelay, nonresolvable_probability, scan_spread
from .mac_analytic import (
    LinkProbs,
    NetworkParams,
    StabilityProfile,
    asymptotic_throughput,
    optimal_contention,
    stability_profile,
    throughput_finite,
)
from .mac_sim import QueueState, SimConfig, SimStats, SlotOutcome, run, step_slot, sweep
from .pulses import PulseShape, design_pulse
from .receiver import ReceiverConfig, ReceiverReport, receive_slot, synchronize
from .separation import JADE, build_mixing_matrix, jade_separate, ls_equalize, polyphase_decompose

__version__ = "0.1.0"
