"""Synthetic panel with a known delay technology and log-linear fees.

Each epoch sits in one of a few congestion regimes ``z_t`` (a discretized
AR(1)). Regimes recur, so every regime is seen in every training fold. The
log-delay schedule is

    g(p; z) = a + L*z - b*p - h(z) * s * Psi((p - m(z)) / s),   Psi' = Phi

so delay falls with priority everywhere, and the gradient ``b + h*Phi``
rises through a congestion-dependent location ``m(z)``. A gradient that
rises with priority keeps log fees increasing in the cost index, so the
within-epoch ranking is self-consistent.
The true gradient ``D_t(p)`` is the clipped symmetric difference of
``g(.; z_t)``, i.e. exactly what the first stage is meant to recover.
Fees follow

    log r = const + log c + alpha1 * log D_t(p) + beta'X + theta'S + xi_t + eps

with lognormal costs ``c`` revealed by the transferred value, and ``p`` the
within-epoch tie-aware rank of ``r`` itself (solved as a fixed point).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from ..core import DEFAULT_EPS_RESP, Dataset, Snapshot, TxRecord, assemble, epoch_percentiles, impatience_from_respend


@dataclass(frozen=True)
class RecoveryConfig:
    n_epochs: int = 50
    n_per_epoch: int = 2000
    window_s: float = 1800.0
    seed: int = 0
    alpha1: float = 1.0
    # delay technology
    g_a: float = 8.0
    g_level: float = 0.3
    g_b: float = 2.0
    g_h: float = 5.0
    g_h_z: float = 0.3
    g_mid: float = 0.5
    g_mid_z: float = 0.2
    g_width: float = 0.08
    sigma_u: float = 0.02
    delta: float = 0.05
    trim: float = 0.01
    # congestion and epoch effects
    rho_z: float = 0.8
    regimes: tuple[float, ...] = (-1.5, -0.5, 0.5, 1.5)
    rho_xi: float = 0.86
    sigma_xi: float = 0.2
    state_jitter: float = 0.05
    # costs and fees
    log_const: float = 0.5
    cost_mu: float = 0.0
    cost_sigma: float = 1.0
    sigma_eps: float = 0.005
    beta: dict = field(
        default_factory=lambda: {
            "rbf": 0.10,
            "cpfp": 0.05,
            "log_n_inputs": 0.04,
            "log_n_outputs": -0.03,
            "op_return": -0.20,
            "inscription": 0.15,
        }
    )
    theta: dict = field(
        default_factory=lambda: {
            "blockspace_util": 0.30,
            "log_secs_since_block": 0.05,
            "log_mempool_bytes": 0.20,
        }
    )
    eps_resp: float = DEFAULT_EPS_RESP

    def to_dict(self) -> dict:
        return asdict(self)


def delay_schedule(p, z, cfg: RecoveryConfig) -> np.ndarray:
    """True expected ``log(wait_seconds + 1)`` at priority ``p`` and congestion ``z``."""
    p = np.asarray(p, dtype=float)
    z = np.asarray(z, dtype=float)
    h = cfg.g_h * np.exp(cfg.g_h_z * z)
    m = cfg.g_mid + cfg.g_mid_z * np.tanh(z)
    x = (p - m) / cfg.g_width
    # Psi(x) = x*Phi(x) + phi(x) integrates the normal cdf
    psi = x * ndtr(x) + np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)
    return cfg.g_a + cfg.g_level * z - cfg.g_b * p - h * cfg.g_width * psi


def true_slope(p, z, cfg: RecoveryConfig) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    lo = np.clip(p - cfg.delta, cfg.trim, 1 - cfg.trim)
    hi = np.clip(p + cfg.delta, cfg.trim, 1 - cfg.trim)
    return (delay_schedule(lo, z, cfg) - delay_schedule(hi, z, cfg)) / (hi - lo)


def _ar1(rng, n, rho, sd):
    out = np.empty(n)
    out[0] = rng.normal(0, sd)
    innov = sd * math.sqrt(1 - rho**2)
    for t in range(1, n):
        out[t] = rho * out[t - 1] + rng.normal(0, innov)
    return out


@dataclass
class RecoveryData:
    config: RecoveryConfig
    dataset: Dataset
    z: np.ndarray
    xi: np.ndarray
    true_log_slope: np.ndarray  # aligned with dataset.txs
    true_p: np.ndarray
    max_rank_shift: float


def generate_recovery(cfg: RecoveryConfig = RecoveryConfig()) -> RecoveryData:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    E, n = cfg.n_epochs, cfg.n_per_epoch
    N = E * n
    latent = _ar1(rng, E, cfg.rho_z, 1.0)
    levels = np.asarray(cfg.regimes, dtype=float)
    if levels.size:
        cuts = np.quantile(latent, np.arange(1, levels.size) / levels.size)
        z = levels[np.searchsorted(cuts, latent)]
    else:
        z = latent
    xi = _ar1(rng, E, cfg.rho_xi, cfg.sigma_xi)

    # snapshots every 60 s; congestion levels are epoch-specific with jitter
    snap_dt = 60.0
    per_epoch = int(cfg.window_s // snap_dt)
    n_snap = E * per_epoch
    ts = np.arange(n_snap) * snap_dt
    se = np.repeat(np.arange(E), per_epoch)
    jit = cfg.state_jitter
    mem = np.exp(16.5 + 0.6 * z[se] + jit * rng.normal(size=n_snap))
    util = np.clip(1 / (1 + np.exp(-(0.5 + 0.8 * z[se]))) + jit * 0.2 * rng.normal(size=n_snap), 0.0, 1.0)
    cnt = mem / 350.0 * np.exp(jit * rng.normal(size=n_snap))
    # block arrivals drive the seconds-since-last-block series
    block_t = np.cumsum(rng.exponential(600.0, int(E * cfg.window_s / 600.0 * 2) + 10)) - 300.0
    idx = np.searchsorted(block_t, ts, side="right") - 1
    since = np.where(idx >= 0, ts - block_t[np.clip(idx, 0, None)], ts + 300.0)
    heights = idx + 1
    snaps = [
        Snapshot(float(ts[k]), int(round(mem[k])), int(round(cnt[k])), int(heights[k]), float(since[k]), float(util[k]))
        for k in range(n_snap)
    ]

    epoch = np.repeat(np.arange(E), n)
    entry = epoch * cfg.window_s + rng.uniform(0, cfg.window_s, N)
    entry[0] = 0.0
    snap_of = np.clip(np.searchsorted(ts, entry, side="right") - 1, 0, n_snap - 1)

    # transaction characteristics
    vsize = rng.integers(110, 600, N)
    weight = vsize * 4 - rng.integers(0, 3 * vsize // 4 + 1)
    log_c = rng.normal(cfg.cost_mu, cfg.cost_sigma, N)
    total_out = np.rint(np.exp(log_c + 12.0)).astype(np.int64)
    n_in = rng.integers(1, 6, N)
    n_out = rng.integers(1, 4, N)
    rbf = rng.random(N) < 0.3
    cpfp = rng.random(N) < 0.05
    opret = rng.random(N) < 0.05
    insc = rng.random(N) < 0.1
    S = {
        "blockspace_util": util[snap_of],
        "log_secs_since_block": np.log1p(since[snap_of]),
        "log_mempool_bytes": np.log1p(np.rint(mem[snap_of])),
    }
    X = {
        "rbf": rbf.astype(float),
        "cpfp": cpfp.astype(float),
        "log_n_inputs": np.log(n_in),
        "log_n_outputs": np.log(n_out),
        "op_return": opret.astype(float),
        "inscription": insc.astype(float),
    }
    v = cfg.log_const + log_c + xi[epoch] + cfg.sigma_eps * rng.normal(size=N)
    v = v + sum(cfg.beta[k] * X[k] for k in cfg.beta) + sum(cfg.theta[k] * S[k] for k in cfg.theta)
    # log c is recovered exactly through log1p(total_out); fold the rounding back in
    v = v + (np.log1p(total_out) - 12.0 - log_c)

    # rank fixed point: p = rank(v + alpha1 * log D(p))
    zt = z[epoch]
    p = epoch_percentiles(v, epoch, check=False)
    for _ in range(50):
        log_r = v + cfg.alpha1 * np.log(true_slope(p, zt, cfg))
        p_new = epoch_percentiles(log_r, epoch, check=False)
        if np.array_equal(p_new, p):
            break
        p = p_new
    log_r = v + cfg.alpha1 * np.log(true_slope(p, zt, cfg))
    fee = np.maximum(0, np.rint(np.exp(log_r) * vsize)).astype(np.int64)
    p_data = epoch_percentiles(fee / vsize, epoch)
    shift = float(np.max(np.abs(p_data - p)))

    g = delay_schedule(p_data, zt, cfg)
    wait = np.maximum(0.0, np.expm1(g + cfg.sigma_u * rng.normal(size=N)))
    confirm = entry + wait
    entry_h = np.searchsorted(block_t, entry, side="right")
    conf_h = np.searchsorted(block_t, confirm, side="left") + 1
    conf_h = np.maximum(conf_h, entry_h)
    respend = np.maximum(1, np.rint(np.exp(-(log_c - cfg.cost_mu)) * 8.0))

    width = len(str(N))
    txs = [
        TxRecord(
            tx_id=f"t{i:0{width}d}",
            fee_sats=int(fee[i]),
            weight_wu=int(weight[i]),
            vsize_vb=int(vsize[i]),
            entry_time=float(entry[i]),
            confirm_time=float(confirm[i]),
            confirm_height=int(conf_h[i]),
            wait_blocks=int(conf_h[i] - entry_h[i]),
            rbf=bool(rbf[i]),
            cpfp_package=bool(cpfp[i]),
            n_inputs=int(n_in[i]),
            n_outputs=int(n_out[i]),
            total_output_sats=int(total_out[i]),
            has_op_return=bool(opret[i]),
            has_inscription=bool(insc[i]),
            respend_blocks=float(respend[i]),
            impatience=impatience_from_respend(float(respend[i]), cfg.eps_resp),
        )
        for i in range(N)
    ]
    ds = assemble(txs, snaps, cfg.window_s, meta={"source": "generate_recovery", "seed": cfg.seed})
    if ds.n_dropped:
        raise RuntimeError("recovery generator produced records without snapshot state")
    return RecoveryData(cfg, ds, z, xi, np.log(true_slope(p_data, zt, cfg)), p_data, shift)
