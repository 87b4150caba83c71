"""Experiment recipes behind the command-line interface.

Each command maps a JSON config plus a seed to CSV rows.  CSV files carry a
schema comment on their first line; plots are drawn from the CSV afterwards.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, replace
from itertools import permutations, product
from pathlib import Path

import numpy as np

from .channel import N_CODED_BITS, N_SYMBOLS, SYMBOL_RATE
from .coding import DEFAULT_USER_IDS, dqpsk_demodulate
from .delay_design import DelayModel, NaturalDelay, scan_spread
from .mac_analytic import (
    LinkProbs,
    approx_throughput,
    asymptotic_throughput,
    service_delay,
    stability_profile,
    total_delay,
)
from .mac_sim import SimConfig, sweep
from .phy_link import PhyConfig, calibrate_link_probs, run_collision
from .receiver import MODES

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
COMMANDS = ("ber-sweep", "mac-sweep", "prop1-scan", "analytic")
DEFAULT_PROBS = LinkProbs(0.998, 0.965, 0.009)

BER_COLUMNS = ("snr_db", "mode", "ber", "packets", "successes")
MAC_COLUMNS = (
    "r", "p", "q_sim", "q_analytic", "tput_sim", "tput_analytic",
    "dtot_sim", "dtot_analytic", "dsrv_sim", "dsrv_analytic", "stable",
)
PROP1_COLUMNS = ("T", "T_over_Ts", "P_c", "is_local_min_at_Ts")
ANALYTIC_COLUMNS = (
    "J", "P0", "P1", "P2", "r", "p", "p_star", "f_max", "p_min", "p_max",
    "stable", "q", "tput", "dtot", "dsrv", "asymptotic_C",
)


class ConfigError(ValueError):
    pass


def _grid(cfg: dict, key: str, default=None) -> list:
    vals = cfg.get(key, default)
    if vals is None:
        raise ConfigError(f"missing grid {key!r}")
    vals = list(vals) if isinstance(vals, (list, tuple)) else [vals]
    if not vals:
        raise ConfigError(f"grid {key!r} is empty")
    return vals


def _probs(d: dict | None) -> LinkProbs | None:
    if d is None:
        return None
    return LinkProbs(float(d["P0"]), float(d.get("P1", 0.0)), float(d.get("P2", 0.0)))


def _phy(d: dict | None) -> PhyConfig:
    return PhyConfig(**(d or {}))


# -- formatting --------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.9g}"
    return str(v)


def to_csv(command: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(f"# alohacr {command} schema v{SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def read_csv(path) -> tuple[str, list[dict]]:
    """Return the schema comment and the rows (as strings)."""
    with open(path, encoding="utf-8") as fh:
        schema = fh.readline().strip()
        return schema, list(csv.DictReader(fh))


# -- BER sweep ---------------------------------------------------------------


def raw_bit_errors(report, packets) -> int:
    """Channel-bit errors before decoding, summed over the packets of a slot.

    Committed streams are matched to packets by the assignment with the fewest
    errors; within a stream the best burst alignment is used.  A packet with
    no stream counts every coded bit as wrong.
    """
    n_burst = N_SYMBOLS + 1
    E = np.full((len(report.streams), len(packets)), N_CODED_BITS, dtype=int)
    for i, s in enumerate(report.streams):
        s = np.asarray(s)
        if len(s) < n_burst:
            continue
        idx = np.arange(len(s) - n_burst + 1)[:, None] + np.arange(n_burst)[None, :]
        bits = dqpsk_demodulate(s[idx]).reshape(len(idx), -1)
        for j, pk in enumerate(packets):
            E[i, j] = int(np.min(np.count_nonzero(bits != pk.coded_bits, axis=1)))
    K = len(packets)
    best = K * N_CODED_BITS
    for perm in permutations(range(max(len(report.streams), K)), K):
        tot = sum(E[perm[j], j] if perm[j] < len(E) else N_CODED_BITS for j in range(K))
        best = min(best, tot)
    return best


@dataclass(eq=False)
class BerPoint:
    snr_db: float
    mode: str
    errors: np.ndarray  # raw bit errors per slot
    successes: np.ndarray  # zero-error recovered packets per slot, per user
    n_users: int = 2

    @property
    def packets(self) -> int:
        return len(self.errors) * self.n_users

    @property
    def ber(self) -> float:
        return float(self.errors.sum()) / (self.packets * N_CODED_BITS)


def point_seed(seed: int, snr_db: float) -> np.random.SeedSequence:
    """Stream shared by every mode at one SNR, so modes see identical slots."""
    return np.random.SeedSequence([int(seed), int(round(snr_db * 1000)) & 0xFFFFFFFF])


def ber_point(
    snr_db: float,
    mode: str,
    n_slots: int,
    seed: int,
    phy: PhyConfig | None = None,
    difference_range=(3 / 8, 5 / 8),
    user_ids=DEFAULT_USER_IDS,
) -> BerPoint:
    """Two-user slots with equal-power users at one SNR."""
    phy = PhyConfig() if phy is None else phy
    phy = replace(phy, snr_db=snr_db)
    rng = np.random.default_rng(point_seed(seed, snr_db))
    errs, succ = [], []
    ids = np.asarray(user_ids)
    for _ in range(n_slots):
        pair = rng.choice(ids, 2, replace=False)
        trial = run_collision(pair, phy, rng, difference_range=difference_range, mode=mode)
        errs.append(raw_bit_errors(trial.report, trial.packets))
        succ.append([u in trial.delivered for u in trial.user_ids])
    return BerPoint(snr_db, mode, np.array(errs), np.array(succ, dtype=bool))


def cmd_ber_sweep(cfg: dict, seed: int) -> list[dict]:
    snrs = [float(s) for s in _grid(cfg, "snr_db")]
    modes = _grid(cfg, "modes", list(MODES))
    bad = set(modes) - set(MODES)
    if bad:
        raise ConfigError(f"unknown modes {sorted(bad)}")
    packets = int(cfg.get("packets_per_point", 600))
    if packets < 2:
        raise ConfigError("packets_per_point must be at least 2")
    diff = cfg.get("delay_difference", [3 / 8, 5 / 8])
    diff = tuple(diff) if diff is not None else None
    phy = _phy(cfg.get("phy"))
    rows = []
    for snr, mode in product(snrs, modes):
        pt = ber_point(snr, mode, packets // 2, seed, phy, diff)
        log.info("ber %s dB %s: %.3g", snr, mode, pt.ber)
        rows.append(
            dict(snr_db=snr, mode=mode, ber=pt.ber, packets=pt.packets,
                 successes=int(pt.successes.sum()))
        )
    return rows


# -- MAC sweep ---------------------------------------------------------------


def analytic_cell(J: int, r: float, p: float, probs: LinkProbs) -> dict:
    prof = stability_profile(J, r, p, probs)
    try:
        dsrv = service_delay(J, r, p, probs)
    except ValueError:
        dsrv = math.nan
    return dict(
        q=prof.q,
        tput=approx_throughput(J, r, p, probs),
        dtot=total_delay(J, r, p, probs),
        dsrv=dsrv,
        stable=prof.stable,
        profile=prof,
    )


def cmd_mac_sweep(cfg: dict, seed: int) -> list[dict]:
    J = int(cfg.get("J", 4))
    r_grid = [float(r) for r in _grid(cfg, "r", [1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32])]
    p_grid = [float(p) for p in _grid(cfg, "p", list(np.round(np.arange(0.05, 0.951, 0.05), 2)))]
    mode = cfg.get("mode", "abstract")
    phy = _phy(cfg.get("phy"))
    probs = _probs(cfg.get("probs"))
    if probs is None:
        if mode != "phy":
            probs = DEFAULT_PROBS
        else:
            n_cal = int(cfg.get("calibration_slots", 2000))
            probs = calibrate_link_probs(phy, n_cal, np.random.default_rng([seed, 1]))
            log.info("calibrated link probabilities %s", probs)
    base = SimConfig(
        J, r_grid[0], p_grid[0], probs, mode,
        warmup_slots=int(cfg.get("warmup_slots", 100_000)),
        measure_slots=cfg.get("measure_slots"),
        seed=seed,
        phy=phy,
    )
    rows = []
    for row in sweep(base, r_grid, p_grid):
        a = analytic_cell(J, row.r, row.p, probs)
        st = row.stats
        rows.append(
            dict(
                r=row.r, p=row.p,
                q_sim=st.q_measured, q_analytic=a["q"],
                tput_sim=st.throughput, tput_analytic=a["tput"],
                dtot_sim=st.mean_total_delay, dtot_analytic=a["dtot"],
                dsrv_sim=st.mean_service_delay, dsrv_analytic=a["dsrv"],
                stable=a["stable"],
            )
        )
    return rows


# -- Proposition scan --------------------------------------------------------


def cmd_prop1_scan(cfg: dict, seed: int) -> list[dict]:
    Ts = float(cfg.get("Ts", 1.0 / SYMBOL_RATE))
    T_rel = sorted(float(t) for t in _grid(cfg, "T", list(np.round(np.arange(0.7, 1.3001, 0.05), 2))))
    if len(T_rel) < 2:
        raise ConfigError("the T grid needs at least two points")
    fd = cfg.get("f_delta", {"family": "gaussian", "scale": 1 / 20})
    family = fd.get("family", "dirac")
    nat = NaturalDelay(family, float(fd.get("scale", 0.0)) * Ts)
    model = DelayModel(
        Ts, Ts, float(cfg.get("Delta", 1 / 8)) * Ts, nat, int(cfg.get("n_range", 3))
    )
    try:
        scan = scan_spread(model, np.array(T_rel) * Ts)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    flag = scan.local_min_at_Ts
    return [
        dict(T=T, T_over_Ts=T / Ts, P_c=pc,
             is_local_min_at_Ts=flag if abs(T / Ts - 1) < 1e-9 else None)
        for T, pc in zip(scan.T, scan.P_c)
    ]


# -- analytic surface --------------------------------------------------------


def cmd_analytic(cfg: dict, seed: int) -> list[dict]:
    Js = [int(j) for j in _grid(cfg, "J", [4])]
    probs_list = [_probs(d) for d in _grid(cfg, "probs", [DEFAULT_PROBS.__dict__])]
    r_grid = [float(r) for r in _grid(cfg, "r", [1 / 2, 1 / 4, 1 / 8, 1 / 16, 1 / 32])]
    p_grid = [float(p) for p in _grid(cfg, "p", list(np.round(np.arange(0.05, 0.951, 0.05), 2)))]
    rows = []
    for J, pr, r, p in product(Js, probs_list, r_grid, p_grid):
        a = analytic_cell(J, r, p, pr)
        prof = a["profile"]
        rows.append(
            dict(
                J=J, P0=pr.P0, P1=pr.P1, P2=pr.P2, r=r, p=p,
                p_star=prof.p_star, f_max=prof.f_max,
                p_min=prof.p_min, p_max=prof.p_max,
                stable=a["stable"], q=a["q"], tput=a["tput"],
                dtot=a["dtot"], dsrv=a["dsrv"],
                asymptotic_C=asymptotic_throughput(pr),
            )
        )
    return rows


_COMMANDS = {
    "ber-sweep": (cmd_ber_sweep, BER_COLUMNS),
    "mac-sweep": (cmd_mac_sweep, MAC_COLUMNS),
    "prop1-scan": (cmd_prop1_scan, PROP1_COLUMNS),
    "analytic": (cmd_analytic, ANALYTIC_COLUMNS),
}


def run_command(command: str, cfg: dict, seed: int) -> str:
    """CSV text for ``command``; a pure function of its arguments."""
    if command not in _COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    fn, cols = _COMMANDS[command]
    try:
        rows = fn(cfg, seed)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad {command} config: {exc}") from exc
    return to_csv(command, cols, rows)


# -- plots -------------------------------------------------------------------


def _num(s: str) -> float:
    return float(s) if s not in ("", "true", "false") else math.nan


def plot_csv(command: str, csv_path, png_path) -> bool:
    """Render a static figure from a CSV file.  Returns False if plotting is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping %s", png_path)
        return False
    _, rows = read_csv(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    if command == "ber-sweep":
        for mode in dict.fromkeys(r["mode"] for r in rows):
            sel = [r for r in rows if r["mode"] == mode]
            ber = np.array([_num(r["ber"]) for r in sel])
            ax.semilogy([_num(r["snr_db"]) for r in sel], np.maximum(ber, 1e-6), "o-", label=mode)
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel("raw BER")
    elif command == "mac-sweep":
        for r in dict.fromkeys(x["r"] for x in rows):
            sel = [x for x in rows if x["r"] == r]
            p = [_num(x["p"]) for x in sel]
            line = ax.plot(p, [_num(x["q_sim"]) for x in sel], "o", label=f"r={_num(r):.4g}")
            ax.plot(p, [_num(x["q_analytic"]) for x in sel], "-", color=line[0].get_color())
        ax.set_xlabel("contention probability p")
        ax.set_ylabel("active probability q")
    elif command == "prop1-scan":
        ax.plot([_num(r["T_over_Ts"]) for r in rows], [_num(r["P_c"]) for r in rows], "o-")
        ax.axvline(1.0, color="grey", lw=0.8)
        ax.set_xlabel("T / Ts")
        ax.set_ylabel("P_c")
    else:
        for r in dict.fromkeys(x["r"] for x in rows):
            sel = [x for x in rows if x["r"] == r]
            ax.plot([_num(x["p"]) for x in sel], [_num(x["tput"]) for x in sel], label=f"r={_num(r):.4g}")
        ax.set_xlabel("contention probability p")
        ax.set_ylabel("throughput (packets/slot)")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return True


def write_outputs(command: str, text: str, out_dir, plot: bool = True) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{command}.csv"
    path.write_text(text, encoding="utf-8")
    if plot:
        try:
            plot_csv(command, path, out / f"{command}.png")
        except Exception as exc:  # plots are best-effort
            log.warning("plotting %s failed: %s", command, exc)
    return path
