"""Exact-event Monte Carlo of the three-level emitter and virtual photon counters.

The level dynamics run in a numba kernel that draws from a
``numpy.random.Generator`` (PCG64).  Under pulsed excitation the
power-dependent rates are switched on only inside rectangular pulses; pulses
that find the emitter in its ground state are skipped geometrically, so long
acquisitions at low excitation probability are cheap.

Times are in ns throughout.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numba
import numpy as np

from .io import digest, write_csv
from .photophysics import equilibrium_population

__all__ = [
    "CW",
    "Pulsed",
    "Blinking",
    "SimConfig",
    "PhotonStream",
    "G2Estimate",
    "PulsedG2",
    "simulate",
    "tcspc_histogram",
    "hbt_correlate",
    "pulsed_g2_zero",
    "intensity_trace",
    "write_timestamps",
    "read_timestamps",
]

RNG_ALGORITHM = "numpy.random.PCG64"


@dataclass(frozen=True)
class CW:
    power: float  # mW

    def __post_init__(self):
        if self.power < 0:
            raise ValueError("power must be >= 0")


@dataclass(frozen=True)
class Pulsed:
    power: float  # mW, peak power during the pulse
    rep_rate: float = 20.0  # MHz
    pulse_width: float = 50.0  # ps

    def __post_init__(self):
        if self.power < 0 or self.rep_rate <= 0 or self.pulse_width <= 0:
            raise ValueError("pulse power must be >= 0 and rate/width > 0")
        if self.pulse_width * 1e-3 >= self.period:
            raise ValueError("pulse width must be shorter than the repetition period")

    @property
    def period(self) -> float:
        return 1e3 / self.rep_rate


@dataclass(frozen=True)
class Blinking:
    on_rate: float  # Hz, dark -> bright
    off_rate: float  # Hz, bright -> dark

    def __post_init__(self):
        if self.on_rate <= 0 or self.off_rate <= 0:
            raise ValueError("switching rates must be positive")


@dataclass(frozen=True)
class SimConfig:
    """Inputs of one simulated acquisition.

    ``efficiency`` is the whole detection chain collapsed into one thinning
    probability.  ``background_rate`` is in detected counts/s summed over both
    detectors; ``dark_rate`` is per detector.  Under pulsed excitation the
    background follows the laser pulses (Poissonian per pulse, optionally with
    decay time ``background_lifetime``); under cw it is uniform in time.
    """

    model: object
    excitation: CW | Pulsed
    duration: float  # s
    efficiency: float = 1.0
    irf_sigma: float = 0.0  # ns
    dark_rate: float = 0.0
    background_rate: float = 0.0
    background_lifetime: float = 0.0  # ns
    blinking: Blinking | None = None
    split: float = 0.5
    dead_time: float = 0.0  # ns
    start_state: str = "steady"  # "steady", "1", "2" or "3"
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be > 0")
        for name in ("efficiency", "split"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        for name in ("irf_sigma", "dark_rate", "background_rate", "background_lifetime", "dead_time"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.start_state not in ("steady", "1", "2", "3"):
            raise ValueError("start_state must be 'steady', '1', '2' or '3'")

    def describe(self) -> dict:
        d = asdict(self)
        d["model"] = {"type": type(self.model).__name__, **asdict(self.model)}
        d["excitation"] = {"type": type(self.excitation).__name__, **asdict(self.excitation)}
        return d

    def digest(self) -> str:
        return digest(self.describe())


@dataclass
class PhotonStream:
    times: np.ndarray  # ns, sorted
    channels: np.ndarray  # uint8
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.times.size)

    @property
    def duration(self) -> float:
        """Acquisition time in ns."""
        return float(self.meta["duration_ns"])

    @property
    def rep_rate(self) -> float | None:
        return self.meta.get("rep_rate")

    def channel(self, c: int) -> np.ndarray:
        return self.times[self.channels == c]

    def thin(self, keep: float, seed: int = 0) -> "PhotonStream":
        """Independent Bernoulli loss applied to every detection."""
        rng = np.random.default_rng(seed)
        mask = rng.random(self.times.size) < keep
        meta = dict(self.meta, thinned=float(keep))
        return PhotonStream(self.times[mask], self.channels[mask], meta)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256(self.times.tobytes())
        h.update(self.channels.tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# kernel


@numba.njit(cache=True)
def _kernel(rng, k_on, k_off, pulsed, period, width, duration, state, p_keep, cap):
    """Exact-event trajectory; returns detected emission times and counters.

    ``k_on``/``k_off`` hold (k12, k21, k23, k31, k32) inside/outside pulses.
    States are 0 (ground), 1 (emitting), 2 (shelving).
    """
    out = np.empty(cap, dtype=np.float64)
    n_out = 0
    occ = np.zeros(3)
    n_pulse = np.int64(0)
    ph = 0.0
    n_exc = np.int64(0)
    n_decay = np.int64(0)
    n_events = np.int64(0)
    n_pulse_max = np.int64(duration / period) + 1
    while True:
        t = n_pulse * period + ph
        if t >= duration:
            break
        inp = ph < width
        k = k_on if inp else k_off
        seg_end = width if inp else period
        if state == 0:
            r = k[0]
            if pulsed and not inp:
                occ[0] += min(period - ph, duration - t)
                n_pulse += 1
                ph = 0.0
                continue
            if pulsed and ph == 0.0:
                # first excitation over whole pulses from the ground state
                p = -math.expm1(-r * width)
                if p <= 0.0:
                    occ[0] += duration - t
                    break
                skip = np.int64(0)
                if p < 1.0:
                    u = rng.random()
                    kf = math.floor(math.log1p(-u) / math.log1p(-p))
                    if kf > n_pulse_max:
                        occ[0] += duration - t
                        break
                    skip = np.int64(kf)
                u2 = rng.random()
                tau = -math.log1p(-u2 * p) / r
                t_new = (n_pulse + skip) * period + tau
                if t_new >= duration:
                    occ[0] += duration - t
                    break
                occ[0] += t_new - t
                n_pulse += skip
                ph = tau
                state = 1
                n_exc += 1
                n_events += 1
                continue
            total = r
        elif state == 1:
            total = k[1] + k[2]
        else:
            total = k[3] + k[4]

        if total <= 0.0:
            if not pulsed:
                occ[state] += duration - t
                break
            occ[state] += min(seg_end - ph, duration - t)
            if inp:
                ph = width
            else:
                n_pulse += 1
                ph = 0.0
            continue

        dt = rng.exponential(1.0 / total)
        if ph + dt >= seg_end:
            occ[state] += min(seg_end - ph, duration - t)
            if inp:
                ph = width
            else:
                n_pulse += 1
                ph = 0.0
            continue
        if t + dt >= duration:
            occ[state] += duration - t
            break
        occ[state] += dt
        ph += dt
        n_events += 1
        u = rng.random() * total
        if state == 0:
            state = 1
            n_exc += 1
        elif state == 1:
            if u < k[1]:
                state = 0
                n_decay += 1
                if rng.random() < p_keep:
                    if n_out == out.size:
                        grown = np.empty(out.size * 2, dtype=np.float64)
                        grown[:n_out] = out[:n_out]
                        out = grown
                    out[n_out] = n_pulse * period + ph
                    n_out += 1
            else:
                state = 2
        else:
            state = 0 if u < k[3] else 1
    # every pulse window starting in [0, duration) is covered, including those
    # jumped over by a geometric skip that ran past the end
    n_windows = np.int64(math.ceil(duration / period - 1e-9)) if pulsed else np.int64(0)
    counters = np.array([n_exc, n_decay, n_events, n_windows], dtype=np.int64)
    return out[:n_out], occ, counters


def _rate_vectors(model, excitation):
    slope, const = model.slopes()
    slope, const = np.asarray(slope, float), np.asarray(const, float)
    on = const + slope * excitation.power
    # MHz -> 1/ns
    return on * 1e-3, const * 1e-3


def _initial_state(model, excitation, start, rng) -> int:
    if start != "steady":
        return int(start) - 1
    if isinstance(excitation, Pulsed):
        return 0
    r = model.rates(excitation.power)
    n2 = equilibrium_population(model, excitation.power)
    if n2 == 0:
        return 0
    # n3 / n2 = k23 / (k31 + k32) in steady state
    k3 = r.k31 + r.k32
    n3 = n2 * r.k23 / k3 if k3 > 0 else 1.0 - n2
    u = rng.random()
    return 1 if u < n2 else (2 if u < n2 + n3 else 0)


def _telegraph_mask(times, duration_ns, blinking: Blinking, rng):
    """Boolean mask of times falling in bright periods of a random telegraph."""
    on_rate = blinking.on_rate * 1e-9  # per ns
    off_rate = blinking.off_rate * 1e-9
    bright = rng.random() < on_rate / (on_rate + off_rate)
    edges, states = [0.0], [bright]
    t = 0.0
    while t < duration_ns:
        t += rng.exponential(1.0 / (off_rate if bright else on_rate))
        bright = not bright
        edges.append(t)
        states.append(bright)
    idx = np.searchsorted(np.asarray(edges), times, side="right") - 1
    return np.asarray(states)[idx], np.asarray(edges), np.asarray(states)


def simulate(config: SimConfig, initial_capacity: int = 1 << 16) -> PhotonStream:
    """Run one acquisition and return the two-channel detection record."""
    seq = np.random.SeedSequence(config.seed)
    kernel_seq, post_seq = seq.spawn(2)
    rng = np.random.Generator(np.random.PCG64(kernel_seq))
    post = np.random.Generator(np.random.PCG64(post_seq))

    ex = config.excitation
    model = config.model
    T = config.duration * 1e9
    pulsed = isinstance(ex, Pulsed)
    period = ex.period if pulsed else T + 1.0
    width = ex.pulse_width * 1e-3 if pulsed else period
    on, off = _rate_vectors(model, ex)
    if not pulsed:
        off = on
    state = _initial_state(model, ex, config.start_state, post)
    p_keep = config.efficiency * (model.gamma_r / model.k21)

    em_times, occ, counters = _kernel(rng, on, off, pulsed, period, width, T, state, p_keep, initial_capacity)
    times = [em_times]
    source = [np.zeros(em_times.size, dtype=np.uint8)]  # 0 emitter, 1 background/dark

    n_pulses = int(counters[3]) if pulsed else 0
    if config.background_rate > 0:
        if pulsed:
            n_all = int(math.ceil(T / period))
            nb = post.poisson(config.background_rate * config.duration)
            tb = post.integers(0, n_all, nb) * period
            if config.background_lifetime > 0:
                tb = tb + post.exponential(config.background_lifetime, nb)
        else:
            nb = post.poisson(config.background_rate * config.duration)
            tb = post.random(nb) * T
        times.append(tb)
        source.append(np.ones(tb.size, dtype=np.uint8))

    t_all = np.concatenate(times)
    src = np.concatenate(source)
    if config.irf_sigma > 0:
        t_all = t_all + post.normal(0.0, config.irf_sigma, t_all.size)
    ch = (post.random(t_all.size) >= config.split).astype(np.uint8)

    if config.dark_rate > 0:
        for c in (0, 1):
            nd = post.poisson(config.dark_rate * config.duration)
            t_all = np.concatenate([t_all, post.random(nd) * T])
            ch = np.concatenate([ch, np.full(nd, c, dtype=np.uint8)])
            src = np.concatenate([src, np.ones(nd, dtype=np.uint8)])

    blink_meta = None
    if config.blinking is not None:
        bright, edges, states = _telegraph_mask(t_all, T, config.blinking, post)
        keep = bright | (src == 1)
        t_all, ch = t_all[keep], ch[keep]
        blink_meta = {"switches": int(edges.size - 1)}

    order = np.argsort(t_all, kind="stable")
    t_all, ch = t_all[order], ch[order]
    inside = (t_all >= 0) & (t_all < T)
    t_all, ch = t_all[inside], ch[inside]

    if config.dead_time > 0:
        keep = np.ones(t_all.size, dtype=bool)
        for c in (0, 1):
            idx = np.flatnonzero(ch == c)
            last = -np.inf
            for i in idx:
                if t_all[i] - last < config.dead_time:
                    keep[i] = False
                else:
                    last = t_all[i]
        t_all, ch = t_all[keep], ch[keep]

    meta = {
        "config_digest": config.digest(),
        "seed": config.seed,
        "rng": RNG_ALGORITHM,
        "duration_ns": T,
        "excitation": type(ex).__name__.lower(),
        "rep_rate": ex.rep_rate if pulsed else None,
        "occupancy": (occ / T).tolist(),
        "excitations": int(counters[0]),
        "decays_21": int(counters[1]),
        "events": int(counters[2]),
        "pulses": n_pulses,
        "emitter_detections": int(em_times.size),
        "blinking": blink_meta,
    }
    return PhotonStream(t_all, ch, meta)


# --------------------------------------------------------------------------
# instruments


def tcspc_histogram(stream: PhotonStream, bins: int = 500, width: float = 0.05, start: float = -1.0,
                    rep_rate: float | None = None):
    """Start-stop histogram of detection times relative to the preceding pulse.

    Returns ``(bin_edges, counts)``; delays are folded into
    ``[start, start + period)`` so that IRF jitter before the pulse is kept.
    """
    rep = rep_rate if rep_rate is not None else stream.rep_rate
    if rep is None:
        raise ValueError("TCSPC needs a pulsed stream (no repetition rate known)")
    period = 1e3 / rep
    edges = start + width * np.arange(bins + 1)
    if len(stream) == 0:
        return edges, np.zeros(bins, dtype=np.int64)
    delay = np.mod(stream.times - start, period) + start
    counts, _ = np.histogram(delay, bins=edges)
    return edges, counts.astype(np.int64)


@numba.njit(cache=True)
def _cross_hist(ta, tb, max_lag, bw, nbins):
    counts = np.zeros(nbins, dtype=np.int64)
    j0 = 0
    nb = tb.size
    for i in range(ta.size):
        lo = ta[i] - max_lag
        while j0 < nb and tb[j0] < lo:
            j0 += 1
        j = j0
        while j < nb:
            d = tb[j] - ta[i]
            if d >= max_lag:
                break
            k = int(math.floor((d + max_lag) / bw))
            if 0 <= k < nbins:
                counts[k] += 1
            j += 1
    return counts


@dataclass
class G2Estimate:
    edges: np.ndarray
    counts: np.ndarray
    g2: np.ndarray
    err: np.ndarray
    n_a: int
    n_b: int
    duration: float
    replicates: np.ndarray | None = None  # delete-one-block estimates, shape (n_blocks, nbins)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def hbt_correlate(stream: PhotonStream, bin_width: float = 1.0, max_lag: float = 200.0,
                  errors: str = "jackknife", n_blocks: int = 100) -> G2Estimate:
    """Normalized cross-correlation of the two detector channels.

    Coincidences at lag ``tau = t_B - t_A`` are divided by the count expected
    for uncorrelated streams, ``N_A N_B bin (T - |tau|) / T**2``.

    ``errors="poisson"`` uses ``sqrt(counts)``.  For bunched light the pair
    counts are super-Poissonian and share the normalization uncertainty, so
    the default is a delete-one jackknife over ``n_blocks`` time blocks.
    """
    ta, tb = stream.channel(0), stream.channel(1)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both HBT channels need at least one detection")
    if errors not in ("poisson", "jackknife"):
        raise ValueError("errors must be 'poisson' or 'jackknife'")
    nbins = int(round(2 * max_lag / bin_width))
    max_lag = nbins * bin_width / 2.0
    edges = -max_lag + bin_width * np.arange(nbins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    T = stream.duration

    def normalized(c, na, nb, dur):
        return c / (na * nb * bin_width * (dur - np.abs(centers)) / dur**2)

    if errors == "poisson" or n_blocks < 2:
        counts = _cross_hist(ta, tb, max_lag, bin_width, nbins)
        g2 = normalized(counts, ta.size, tb.size, T)
        err = g2 * np.sqrt(1.0 / np.maximum(counts, 1))
        return G2Estimate(edges, counts, g2, err, int(ta.size), int(tb.size), T)

    bounds = np.linspace(0.0, T, n_blocks + 1)
    ia = np.searchsorted(ta, bounds)
    ib = np.searchsorted(tb, bounds)
    block_counts = np.empty((n_blocks, nbins), dtype=np.int64)
    for k in range(n_blocks):
        lo = np.searchsorted(tb, bounds[k] - max_lag)
        hi = np.searchsorted(tb, bounds[k + 1] + max_lag)
        block_counts[k] = _cross_hist(ta[ia[k]:ia[k + 1]], tb[lo:hi], max_lag, bin_width, nbins)
    counts = block_counts.sum(axis=0)
    g2 = normalized(counts, ta.size, tb.size, T)
    na_k = np.diff(ia)
    nb_k = np.diff(ib)
    dT = np.diff(bounds)
    loo = np.array([
        normalized(counts - block_counts[k], ta.size - na_k[k], tb.size - nb_k[k], T - dT[k])
        for k in range(n_blocks)
    ])
    err = np.sqrt((n_blocks - 1) / n_blocks * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0))
    return G2Estimate(edges, counts, g2, err, int(ta.size), int(tb.size), T, loo)


@dataclass
class PulsedG2:
    g2_zero: float
    err: float
    center: float
    side_mean: float
    side_areas: np.ndarray
    background_per_bin: float


def pulsed_g2_zero(stream: PhotonStream, rep_rate: float | None = None, n_side: int = 5,
                   peak_fraction: float = 0.8, bins_per_period: int = 200) -> PulsedG2:
    """Center-peak area over mean side-peak area of the pulsed coincidence histogram.

    Each peak is integrated over ``peak_fraction`` of a period; the flat
    level between peaks is subtracted as a constant background.
    """
    rep = rep_rate if rep_rate is not None else stream.rep_rate
    if rep is None:
        raise ValueError("pulsed g2 needs a repetition rate")
    if n_side < 3:
        raise ValueError("need at least 3 side peaks on each side")
    period = 1e3 / rep
    if (n_side + 0.5) * period >= stream.duration:
        raise ValueError("acquisition too short to resolve 3 side peaks")
    ta, tb = stream.channel(0), stream.channel(1)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both HBT channels need at least one detection")
    bw = period / bins_per_period
    max_lag = (n_side + 0.5) * period
    nbins = int(round(2 * max_lag / bw))
    counts = _cross_hist(ta, tb, max_lag, bw, nbins).astype(float)
    centers = -max_lag + bw * (np.arange(nbins) + 0.5)
    m = np.round(centers / period).astype(int)
    offset = np.abs(centers - m * period)
    in_peak = offset < 0.5 * peak_fraction * period
    bg = counts[~in_peak].mean() if np.any(~in_peak) else 0.0
    areas = {}
    for k in range(-n_side, n_side + 1):
        sel = in_peak & (m == k)
        areas[k] = counts[sel].sum() - bg * sel.sum()
    side = np.array([areas[k] for k in areas if k != 0])
    side_mean = side.mean()
    if side_mean <= 0:
        raise ValueError("side peaks vanish after background subtraction")
    g0 = areas[0] / side_mean
    raw0 = max(counts[in_peak & (m == 0)].sum(), 1.0)
    err = math.sqrt(raw0) / side_mean
    return PulsedG2(float(g0), float(err), float(areas[0]), float(side_mean), side, float(bg))


def intensity_trace(stream: PhotonStream, bin_s: float = 0.01):
    """Counts per time bin (both channels) as ``(bin_start_s, counts)``."""
    bw = bin_s * 1e9
    nb = max(int(stream.duration // bw), 1)
    counts, edges = np.histogram(stream.times, bins=nb, range=(0.0, nb * bw))
    return edges[:-1] * 1e-9, counts


# --------------------------------------------------------------------------
# timestamp files

_MAGIC = b"PKTS"
_RECORD = np.dtype([("t_ns", "<f8"), ("channel", "u1")])


def write_timestamps(path, stream: PhotonStream, fmt: str = "binary", manifest: str | None = None) -> Path:
    """Store a stream as CSV or as a binary file with a JSON header.

    Binary layout: ``b"PKTS"``, little-endian uint32 header length, UTF-8
    JSON header, then packed records ``(t_ns: <f8, channel: u1)``.
    """
    path = Path(path)
    header = dict(stream.meta)
    if manifest is not None:
        header["manifest"] = manifest
    if fmt == "csv":
        rows = zip(stream.times.tolist(), stream.channels.tolist())
        comments = [f"seed: {stream.meta.get('seed')}", f"rng: {stream.meta.get('rng')}",
                    "meta: " + json.dumps(header, sort_keys=True)]
        return write_csv(path, ["t_ns", "channel"], rows, manifest=manifest or stream.meta.get("config_digest"),
                         comments=comments)
    if fmt != "binary":
        raise ValueError("format must be 'binary' or 'csv'")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(header, sort_keys=True).encode()
    rec = np.empty(len(stream), dtype=_RECORD)
    rec["t_ns"] = stream.times
    rec["channel"] = stream.channels
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(rec.tobytes())
    return path


def read_timestamps(path) -> PhotonStream:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == _MAGIC:
        (n,) = struct.unpack("<I", raw[4:8])
        meta = json.loads(raw[8:8 + n].decode())
        rec = np.frombuffer(raw[8 + n:], dtype=_RECORD)
        return PhotonStream(rec["t_ns"].copy(), rec["channel"].copy(), meta)
    meta = {}
    lines = raw.decode().splitlines()
    for ln in lines:
        if ln.startswith("# meta: "):
            meta = json.loads(ln[len("# meta: "):])
    data = [ln for ln in lines if ln and not ln.startswith("#")][1:]
    if data:
        arr = np.array([ln.split(",") for ln in data], dtype=float)
        return PhotonStream(arr[:, 0], arr[:, 1].astype(np.uint8), meta)
    return PhotonStream(np.empty(0), np.empty(0, dtype=np.uint8), meta)
