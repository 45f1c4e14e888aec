"""SNR field construction and the finite-blocklength packet-error model.

The radio environment is a per-cell large-scale SNR field around a single
fixed access point. Packet decoding follows the normal approximation
Q((C - R) / sqrt(V / n)) with the standard AWGN dispersion
V = (1 - (1 + g)^-2) * (log2 e)^2. Shadowing is sampled i.i.d. per packet
attempt as a log-normal dB offset; the stored field is large-scale only.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.special import erfc

from .map_model import Cell, GridMap

__all__ = [
    "LinkBudgetParams",
    "RadioMap",
    "CommBudget",
    "path_loss",
    "noise_power",
    "build_radio_map",
    "capacity",
    "dispersion",
    "blocklength",
    "p_loss",
    "p_succ",
    "sample_packet",
    "select_rate",
    "default_mcs_table",
    "los_visible",
    "radio_map_csv",
]

LOG2E = math.log2(math.e)
LOG2E_SQ = LOG2E * LOG2E


def qfunc(x: float) -> float:
    """Gaussian tail probability via erfc (relative error ~1e-15)."""
    return 0.5 * erfc(x / math.sqrt(2.0))


@dataclass(frozen=True)
class LinkBudgetParams:
    """Link budget and frame-structure constants.

    Path loss model: L = D*log10(d) + B + F*log10(f0), with separate
    (D, B, F) triples for LoS and NLoS. Defaults are conventional
    indoor-hotspot-style values.
    """

    f0_hz: float = 2.4e9
    b_rb_hz: float = 180e3
    t_pkt_s: float = 0.05
    eta: float = 0.8
    p_tx_ul_dbm: float = 20.0
    p_tx_dl_dbm: float = 20.0
    nf_db: float = 7.0
    los_coeffs: Tuple[float, float, float] = (17.3, 32.4, 20.0)
    nlos_coeffs: Tuple[float, float, float] = (38.3, 17.3, 24.9)
    shadow_sigma_db: float = 3.0
    cell_size_m: float = 1.0

    def __post_init__(self):
        if self.f0_hz <= 0 or self.b_rb_hz <= 0 or self.t_pkt_s <= 0:
            raise ValueError("f0, B_RB and T_pkt must be positive")
        if not (0 < self.eta <= 1):
            raise ValueError("eta must be in (0, 1]")
        if self.shadow_sigma_db < 0:
            raise ValueError("shadow_sigma must be >= 0")
        if self.cell_size_m <= 0:
            raise ValueError("cell_size must be positive")


@dataclass(frozen=True)
class RadioMap:
    """Per-cell large-scale SNR (dB) for UL/DL plus the LoS flag field."""

    snr_ul_db: np.ndarray  # shape (height, width)
    snr_dl_db: np.ndarray
    los: np.ndarray  # bool
    ap_position: Cell

    def __post_init__(self):
        for arr in (self.snr_ul_db, self.snr_dl_db, self.los):
            arr.setflags(write=False)


@dataclass(frozen=True)
class CommBudget:
    """Resource-block budget and the MCS rate table."""

    total_rbs: int = 48
    c_ul: int = 8
    c_dl: int = 8
    mcs_table: Tuple[Tuple[float, float], ...] = ()  # (rate bits/use, min_snr dB)
    target_per: float = 0.1

    def __post_init__(self):
        if not (1 <= self.c_ul <= self.total_rbs):
            raise ValueError("need 1 <= C_UL <= total RBs")
        if self.c_dl < 1:
            raise ValueError("need C_DL >= 1")
        table = self.mcs_table or default_mcs_table()
        rates = [r for r, _ in table]
        if rates != sorted(rates):
            raise ValueError("mcs_table must be sorted ascending by rate")
        object.__setattr__(self, "mcs_table", tuple(table))


def default_mcs_table(n_rates: int = 8, lo: float = 0.2, hi: float = 4.0):
    """Geometrically spaced rates; min_snr is where capacity equals the rate."""
    table = []
    for k in range(n_rates):
        rate = lo * (hi / lo) ** (k / (n_rates - 1))
        min_snr_db = 10.0 * math.log10(2.0 ** rate - 1.0)
        table.append((rate, min_snr_db))
    return tuple(table)


def path_loss(d_m: float, f0_hz: float, los: bool, params: LinkBudgetParams) -> float:
    """Large-scale path loss in dB; d < 1 m is clamped to 1 m.

    The frequency term uses f0 in GHz, matching the indoor-hotspot
    coefficient convention.
    """
    d = max(d_m, 1.0)
    dd, bb, ff = params.los_coeffs if los else params.nlos_coeffs
    return dd * math.log10(d) + bb + ff * math.log10(f0_hz / 1e9)


def noise_power(b_rb_hz: float, nf_db: float) -> float:
    """Noise power on one RB in dBm (thermal floor -174 dBm/Hz)."""
    if b_rb_hz <= 0:
        raise ValueError("B_RB must be positive")
    return -174.0 + 10.0 * math.log10(b_rb_hz) + nf_db


def los_visible(grid: GridMap, a: Cell, b: Cell) -> bool:
    """Supercover ray between cell centers; any blocked cell touched => NLoS."""
    x0, y0 = a.x + 0.5, a.y + 0.5
    x1, y1 = b.x + 0.5, b.y + 0.5
    dx, dy = x1 - x0, y1 - y0
    steps = 2 * int(math.ceil(max(abs(dx), abs(dy)))) + 1
    # Dense sampling along the segment at sub-cell resolution is a robust
    # supercover stand-in: sampling pitch 0.5 cells cannot skip a cell the
    # segment passes through by more than a corner graze.
    for k in range(steps * 2 + 1):
        t = k / (steps * 2)
        cx = int(x0 + t * dx)
        cy = int(y0 + t * dy)
        if grid.in_bounds(cx, cy) and grid.blocked[cy, cx]:
            return False
    return True


def build_radio_map(grid: GridMap, ap: Cell, params: LinkBudgetParams) -> RadioMap:
    """SNR field from the link budget; LoS by unobstructed ray to the AP."""
    if not grid.in_bounds(ap.x, ap.y):
        raise ValueError("AP position out of bounds")
    noise = noise_power(params.b_rb_hz, params.nf_db)
    snr_ul = np.full((grid.height, grid.width), -np.inf)
    snr_dl = np.full((grid.height, grid.width), -np.inf)
    los = np.zeros((grid.height, grid.width), dtype=bool)
    for y in range(grid.height):
        for x in range(grid.width):
            if grid.blocked[y, x]:
                continue
            c = Cell(x, y)
            d = math.hypot(x - ap.x, y - ap.y) * params.cell_size_m
            vis = los_visible(grid, c, ap)
            loss = path_loss(d, params.f0_hz, vis, params)
            los[y, x] = vis
            snr_ul[y, x] = params.p_tx_ul_dbm - loss - noise
            snr_dl[y, x] = params.p_tx_dl_dbm - loss - noise
    return RadioMap(snr_ul_db=snr_ul, snr_dl_db=snr_dl, los=los, ap_position=ap)


def capacity(gamma: float) -> float:
    """Shannon capacity log2(1 + gamma) in bits per channel use."""
    return math.log2(1.0 + gamma)


def dispersion(gamma: float) -> float:
    """AWGN channel dispersion (1 - (1+g)^-2) * (log2 e)^2."""
    return (1.0 - 1.0 / (1.0 + gamma) ** 2) * LOG2E_SQ


def blocklength(m_rbs: int, params: LinkBudgetParams) -> int:
    """Channel uses over m RBs: floor(m * eta * B_RB * T_pkt), minimum 1."""
    if m_rbs < 1:
        raise ValueError("need at least one RB")
    return max(1, int(m_rbs * params.eta * params.b_rb_hz * params.t_pkt_s))


def p_loss(gamma: float, rate: float, n: int) -> float:
    """Finite-blocklength packet loss probability, clamped to [0, 1]."""
    if gamma < 0 or rate <= 0 or n < 1:
        raise ValueError("need gamma >= 0, rate > 0, n >= 1")
    v = dispersion(gamma)
    c = capacity(gamma)
    if v == 0.0:
        if rate < c:
            return 0.0
        if rate > c:
            return 1.0
        return 0.5
    arg = (c - rate) / math.sqrt(v / n)
    return min(1.0, max(0.0, qfunc(arg)))


def p_succ(gamma: float, rate: float, n: int) -> float:
    return 1.0 - p_loss(gamma, rate, n)


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


def sample_packet(gamma_db: float, rate: float, n: int,
                  params: LinkBudgetParams, rng: np.random.Generator) -> bool:
    """One Bernoulli packet outcome with per-attempt log-normal shadowing.

    Consumes exactly two draws (shadowing normal, success uniform) so
    downstream draw accounting is independent of parameter values.
    """
    shadow = rng.standard_normal() * params.shadow_sigma_db
    u = rng.random()
    gamma = db_to_linear(gamma_db + shadow)
    return u < p_succ(gamma, rate, n)


def select_rate(budget: CommBudget, gamma_db: float, n: int) -> float:
    """Largest MCS rate meeting the target PER at (gamma, n), else the smallest."""
    gamma = db_to_linear(gamma_db)
    best = None
    for rate, _ in budget.mcs_table:
        if p_loss(gamma, rate, n) <= budget.target_per:
            best = rate
    return best if best is not None else budget.mcs_table[0][0]


def radio_map_csv(rmap: RadioMap, grid: GridMap) -> str:
    """Dump the field as CSV (x, y, snr_ul_db, snr_dl_db, los)."""
    buf = io.StringIO()
    buf.write("x,y,snr_ul_db,snr_dl_db,los\n")
    for y in range(grid.height):
        for x in range(grid.width):
            if grid.blocked[y, x]:
                continue
            buf.write(f"{x},{y},{rmap.snr_ul_db[y, x]:.6f},"
                      f"{rmap.snr_dl_db[y, x]:.6f},{int(rmap.los[y, x])}\n")
    return buf.getvalue()
