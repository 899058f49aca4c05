"""Two-particle Gaussian-slit wavefunctions and their Bohmian trajectories.

Transverse (y) motion is integrated; the longitudinal coordinate is free
plane-wave motion, x = ±(d + ℏk_x t/m).  Every pair amplitude is a short sum
of separable terms c·f(y1)·g(y2) with Gaussian packets f, g, which lets the
guidance velocities be evaluated in log space (no underflow far in the
tails) and the SQM integrals reduce to sums of one-dimensional overlaps.

Times are physical; ``reduced_time`` gives a = ℏt/2mσ₀², the natural clock
of every closed form here.
"""

from __future__ import annotations

import csv
import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy import integrate, signal, stats

from .errors import ConfigError, CoverageError, NodeError, StateError, ValidationError
from .numkit import fmt_float

LAYOUTS = ("TwoDoubleSlit", "SingleDoubleSlitEntangled", "SingleDoubleSlitDisentangled")
EXCHANGES = ("Bosonic", "Fermionic")
PACKET_FORMS = ("corrected", "literal")
SLITS = ("A", "B", "A'", "B'")

NODE_EPSILON = 1e-10
MAX_HALVINGS = 20
BASE_STEP = 1e-3  # in units of 2mσ₀²/ℏ
EMPTY_FRACTION = 0.05

FLAG_OK, FLAG_HALVED, FLAG_TRUNCATED = 0, 1, 2


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class PhysParams:
    hbar: float = 1.0
    mass: float = 1.0
    sigma0: float = 1.0
    slit_y: float = 2.0
    slit_x: float = 1.0
    k_x: float = 10.0
    k_y: float = 0.0
    screen_x: float = 40.0

    def __post_init__(self):
        for name in ("hbar", "mass", "sigma0", "slit_y", "k_x", "screen_x"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be a positive finite number, got {v!r}")
        for name in ("k_y", "slit_x"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be a non-negative finite number, got {v!r}")

    @property
    def time_unit(self) -> float:
        """2mσ₀²/ℏ."""
        return 2 * self.mass * self.sigma0 ** 2 / self.hbar

    @property
    def screen_time(self) -> float:
        return self.screen_x * self.mass / (self.hbar * self.k_x)

    def sigma_t(self, t: float) -> complex:
        return self.sigma0 * (1 + 1j * self.hbar * t / (2 * self.mass * self.sigma0 ** 2))


def reduced_time(params: PhysParams, t: float) -> float:
    return params.hbar * t / (2 * params.mass * params.sigma0 ** 2)


@dataclass(frozen=True)
class ExperimentConfig:
    params: PhysParams = field(default_factory=PhysParams)
    layout: str = "TwoDoubleSlit"
    exchange: str = "Bosonic"
    com_y0: float = 0.0
    com_spread: float = 0.0
    packet_form: str = "corrected"

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValidationError(f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        if self.exchange not in EXCHANGES:
            raise ValidationError(f"exchange must be one of {EXCHANGES}, got {self.exchange!r}")
        if self.packet_form not in PACKET_FORMS:
            raise ValidationError(f"packet_form must be one of {PACKET_FORMS}, got {self.packet_form!r}")
        if not (math.isfinite(self.com_y0) and math.isfinite(self.com_spread)) or self.com_spread < 0:
            raise ValidationError("com_y0 must be finite and com_spread finite and >= 0")

    @property
    def exchange_sign(self) -> int:
        return 1 if self.exchange == "Bosonic" else -1

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ValidationError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown config fields: {sorted(extra)}")
        raw_params = doc.get("params", {})
        if not isinstance(raw_params, dict):
            raise ValidationError("params must be a JSON object")
        pknown = {f.name for f in fields(PhysParams)}
        pextra = set(raw_params) - pknown
        if pextra:
            raise ValidationError(f"unknown params fields: {sorted(pextra)}")
        kwargs = {k: v for k, v in doc.items() if k != "params"}
        for key in ("com_y0", "com_spread"):
            if key in kwargs and not isinstance(kwargs[key], (int, float)):
                raise ValidationError(f"{key} must be a number")
        return cls(params=PhysParams(**raw_params), **kwargs)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PairCoordinates:
    y1: float
    y2: float
    t: float = 0.0


@dataclass(frozen=True)
class DetectionSpec:
    detector_size: float
    bins: int = 40
    y_range: tuple = (-20.0, 20.0)

    def __post_init__(self):
        if not self.detector_size > 0:
            raise ValidationError("detector_size must be positive")
        if int(self.bins) < 1:
            raise ValidationError("bins must be a positive integer")
        lo, hi = self.y_range
        if not hi > lo:
            raise ValidationError("y_range must be an increasing interval")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.y_range[0], self.y_range[1], int(self.bins) + 1)


@dataclass(frozen=True)
class GridSpec:
    y_min: float
    y_max: float
    points: int = 4001


def x_positions(config: ExperimentConfig, t):
    """Deterministic longitudinal coordinates (x1, x2) at time t."""
    p = config.params
    drift = p.hbar * p.k_x * np.asarray(t) / p.mass
    if config.layout == "TwoDoubleSlit":
        return p.slit_x + drift, -p.slit_x - drift
    return p.slit_x + drift, p.slit_x + drift


# ---------------------------------------------------------------- packets

# a packet is (centre at t=0, transverse wave number); it moves freely


def _slit_packet(slit: str, params: PhysParams, form: str = "corrected") -> tuple[float, float]:
    Y, k = params.slit_y, params.k_y
    if slit == "A":
        return (Y, k)
    if slit == "B":
        return (-Y, -k)
    if slit == "A'":
        return (Y, k) if form == "corrected" else (-Y, k)
    if slit == "B'":
        return (-Y, -k) if form == "corrected" else (Y, -k)
    raise ConfigError(f"slit must be one of {SLITS}, got {slit!r}")


def _packet_log(packet, params: PhysParams, y, t: float):
    """log of the free Gaussian packet and its y-derivative of the log."""
    c0, k = packet
    s0 = params.sigma0
    st = params.sigma_t(t)
    u = y - c0 - params.hbar * k * t / params.mass
    log = (-0.25 * math.log(2 * math.pi) - 0.5 * np.log(st) - u * u / (4 * s0 * st)
           + 1j * k * (y - c0) - 1j * params.hbar * k * k * t / (2 * params.mass))
    return log, -u / (2 * s0 * st) + 1j * k


def _packet_centre(packet, params: PhysParams, t: float) -> float:
    return packet[0] + params.hbar * packet[1] * t / params.mass


def _x_factor(sign: int, params: PhysParams, x, t: float):
    """X+(x) = e^{ik_x(x-d)} for A, B; X-(x) = e^{-ik_x(x+d)} for A', B' (with energy phase)."""
    k, d = params.k_x, params.slit_x
    phase = -params.hbar * k * k * t / (2 * params.mass)
    if sign > 0:
        return np.exp(1j * (k * (x - d) + phase))
    return np.exp(1j * (-k * (x + d) + phase))


def slit_wave(slit: str, params: PhysParams, x, y, t: float, form: str = "corrected"):
    """Time-evolved amplitude of a single Gaussian slit (x and y parts)."""
    if t < 0:
        raise ConfigError("t must be non-negative")
    packet = _slit_packet(slit, params, form)
    log, _ = _packet_log(packet, params, np.asarray(y, dtype=float), t)
    xs = 1 if slit in ("A", "B") else -1
    return np.exp(log) * _x_factor(xs, params, np.asarray(x, dtype=float), t)


def _full_terms(config: ExperimentConfig):
    """(coef, slit of particle 1, slit of particle 2) with all x-dependence kept."""
    s = config.exchange_sign
    if config.layout == "TwoDoubleSlit":
        return [(1, "A", "B'"), (1, "B", "A'"), (s, "B'", "A"), (s, "A'", "B")]
    if config.layout == "SingleDoubleSlitEntangled":
        return [(1, "A", "B"), (s, "B", "A")]
    return [(1, "A", "A"), (1, "A", "B"), (1, "B", "A"), (1, "B", "B")]


def _y_terms(config: ExperimentConfig, t: float):
    """Transverse amplitude as (complex coef, packet 1, packet 2) terms.

    For the two-double-slit layout with corrected packets the amplitude
    factorizes into (a1b2 + a2b1) times an x-only factor, which is dropped:
    it carries no y-dependence and for fermions it has nodes of its own.
    The other layouts share a common x-factor that is dropped as well.
    """
    p, form = config.params, config.packet_form
    if config.layout == "TwoDoubleSlit" and form == "corrected":
        a, b = _slit_packet("A", p), _slit_packet("B", p)
        return [(1.0 + 0j, a, b), (1.0 + 0j, b, a)]
    if config.layout == "TwoDoubleSlit":
        x1, x2 = x_positions(config, t)
        out = []
        for coef, s1, s2 in _full_terms(config):
            xs1 = 1 if s1 in ("A", "B") else -1
            xs2 = 1 if s2 in ("A", "B") else -1
            c = coef * _x_factor(xs1, p, x1, t) * _x_factor(xs2, p, x2, t)
            out.append((complex(c), _slit_packet(s1, p, form), _slit_packet(s2, p, form)))
        return out
    return [(complex(c), _slit_packet(s1, p), _slit_packet(s2, p)) for c, s1, s2 in _full_terms(config)]


def pair_wavefunction(config: ExperimentConfig, coords: PairCoordinates, x1=None, x2=None):
    """Unnormalized pair amplitude; x defaults to the deterministic positions."""
    p, t = config.params, coords.t
    if x1 is None or x2 is None:
        dx1, dx2 = x_positions(config, t)
        x1 = dx1 if x1 is None else x1
        x2 = dx2 if x2 is None else x2
    total = 0j
    for coef, s1, s2 in _full_terms(config):
        form = config.packet_form if config.layout == "TwoDoubleSlit" else "corrected"
        total = total + coef * slit_wave(s1, p, x1, coords.y1, t, form) * slit_wave(s2, p, x2, coords.y2, t, form)
    return total


# -------------------------------------------------------------- log-sum core


def _term_arrays(terms):
    terms = [tm for tm in terms if tm[0] != 0]
    return (np.log(np.array([tm[0] for tm in terms], dtype=complex)),
            np.array([tm[1][0] for tm in terms]), np.array([tm[1][1] for tm in terms]),
            np.array([tm[2][0] for tm in terms]), np.array([tm[2][1] for tm in terms]))


def _time_independent_terms(config: ExperimentConfig) -> bool:
    return not (config.layout == "TwoDoubleSlit" and config.packet_form == "literal")


def _log_amplitude(terms, params, y1, y2, t, gradients: bool = True):
    """Per-term logs summed with a max shift.

    ``terms`` is a term list or the output of ``_term_arrays``.  Returns
    (log|ψ|², ∂1ψ/ψ, ∂2ψ/ψ, log|ψ|² - max_i log|term_i|²).
    """
    lc, c1, k1, c2, k2 = terms if isinstance(terms, tuple) else _term_arrays(terms)
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    shape = np.broadcast_shapes(y1.shape, y2.shape)
    extra = (slice(None),) + (None,) * len(shape)
    hm = params.hbar / params.mass
    st = params.sigma_t(t)
    q = 1 / (4 * params.sigma0 * st)
    base = lc - np.log(st) - 0.5 * math.log(2 * math.pi) - 0.5j * hm * t * (k1 * k1 + k2 * k2)
    d1 = y1[None] - c1[extra]
    d2 = y2[None] - c2[extra]
    u1 = d1 - (hm * t * k1)[extra]
    u2 = d2 - (hm * t * k2)[extra]
    L = base[extra] - q * (u1 * u1 + u2 * u2) + 1j * (k1[extra] * d1 + k2[extra] * d2)
    if L.shape[1:] != shape:
        L = np.broadcast_to(L, (len(lc),) + shape)
    shift = np.max(L.real, axis=0)
    w = np.exp(L - shift)
    s = np.sum(w, axis=0)
    if not gradients:
        with np.errstate(divide="ignore"):
            log_rel = np.log(np.abs(s) ** 2)
        return 2 * shift + log_rel, None, None, log_rel
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.sum(w * (-2 * q * u1 + 1j * k1[extra]), axis=0) / s
        r2 = np.sum(w * (-2 * q * u2 + 1j * k2[extra]), axis=0) / s
        log_rel = np.log(np.abs(s) ** 2)
    return 2 * shift + log_rel, r1, r2, log_rel


def _velocity_field(config: ExperimentConfig, t: float, y1, y2):
    p = config.params
    log_p, r1, r2, log_rel = _log_amplitude(_y_terms(config, t), p, y1, y2, t)
    scale = p.hbar / p.mass
    return scale * np.imag(r1), scale * np.imag(r2), log_p, log_rel


def bohm_velocities(config: ExperimentConfig, coords: PairCoordinates) -> tuple[float, float]:
    """Guidance velocities (ẏ1, ẏ2) = (ℏ/m) Im(∂ψ/ψ)."""
    v1, v2, _, log_rel = _velocity_field(config, coords.t, coords.y1, coords.y2)
    if not log_rel > math.log(NODE_EPSILON):
        raise NodeError("pair position is too close to a node of the wavefunction",
                        y1=coords.y1, y2=coords.y2, t=coords.t)
    return float(v1), float(v2)


def com_velocity_residual(config: ExperimentConfig, coords: PairCoordinates) -> float:
    """(ẏ1+ẏ2)/2 minus the velocity of the closed-form centre-of-mass path.

    Vanishes identically for the entangled layouts; for the disentangled
    amplitude this is the size of the extra term in the centre-of-mass
    equation.
    """
    p = config.params
    v1, v2 = bohm_velocities(config, coords)
    a = reduced_time(p, coords.t)
    com = 0.5 * (coords.y1 + coords.y2)
    return 0.5 * (v1 + v2) - com * (p.hbar / (2 * p.mass * p.sigma0 ** 2)) * a / (1 + a * a)


# --------------------------------------------------------------- integration


@dataclass
class Trajectory:
    samples: list
    flags: list
    step: float
    halvings: int = 0
    truncated: bool = False

    @property
    def final(self) -> PairCoordinates:
        return self.samples[-1]


def _threads() -> int:
    raw = os.environ.get("EPRLAB_THREADS")
    cap = os.cpu_count() or 1
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"EPRLAB_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, cap))


class _Integrator:
    """Classical RK4 over many pairs at once, with per-pair step halving."""

    def __init__(self, config: ExperimentConfig, step: float | None = None):
        self.config = config
        self.step_units = BASE_STEP if step is None else step
        self.log_eps = math.log(NODE_EPSILON)
        self.terms = _term_arrays(_y_terms(config, 0.0)) if _time_independent_terms(config) else None

    def field(self, t, y1, y2):
        if self.terms is None:
            v1, v2, log_p, _ = _velocity_field(self.config, t, y1, y2)
            return v1, v2, log_p
        p = self.config.params
        log_p, r1, r2, _ = _log_amplitude(self.terms, p, y1, y2, t)
        return p.hbar / p.mass * r1.imag, p.hbar / p.mass * r2.imag, log_p

    def rk4(self, t, h, y1, y2, floor, first=None):
        """One RK4 step; ``ok`` is False where any stage lands near a node.

        ``first`` is the field at (t, y) when the caller already has it.  The
        field at the new point is returned for reuse by the next step.
        """
        a1, b1, lp = first if first is not None else self.field(t, y1, y2)
        ok = lp > floor
        a2, b2, lp = self.field(t + h / 2, y1 + h / 2 * a1, y2 + h / 2 * b1)
        ok &= lp > floor
        a3, b3, lp = self.field(t + h / 2, y1 + h / 2 * a2, y2 + h / 2 * b2)
        ok &= lp > floor
        a4, b4, lp = self.field(t + h, y1 + h * a3, y2 + h * b3)
        ok &= lp > floor
        n1 = y1 + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
        n2 = y2 + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        nxt = self.field(t + h, n1, n2)
        ok &= np.isfinite(n1) & np.isfinite(n2) & (nxt[2] > floor)
        return n1, n2, nxt, ok

    def refine(self, t, h, y1, y2, runmax, depth=1):
        """Cover [t, t+h] with halved steps; None once halving is exhausted."""
        if depth > MAX_HALVINGS:
            return None
        half = h / 2
        state = (y1, y2, runmax)
        for sub in range(2):
            ts = t + sub * half
            y1, y2, runmax = state
            n1, n2, nxt, ok = self.rk4(ts, half, np.array([y1]), np.array([y2]), runmax + self.log_eps)
            if ok[0]:
                state = (float(n1[0]), float(n2[0]), max(runmax, float(nxt[2][0])))
            else:
                sub_state = self.refine(ts, half, y1, y2, runmax, depth + 1)
                if sub_state is None:
                    return None
                state = sub_state
        return state

    def run(self, y1, y2, t0: float, t_final: float, record: int | None = None):
        """Advance arrays of pairs; optionally record ``record`` evenly spaced samples."""
        p = self.config.params
        span = t_final - t0
        if not span > 0:
            raise ConfigError("t_final must exceed the initial time")
        dt = self.step_units * p.time_unit
        n = max(1, math.ceil(span / dt - 1e-9))
        h = span / n
        y1 = np.array(y1, dtype=float)
        y2 = np.array(y2, dtype=float)
        cur = self.field(t0, y1, y2)
        runmax = cur[2].copy()
        if not np.all(np.isfinite(runmax)):
            raise NodeError("initial position sits on a node of the wavefunction")
        alive = np.ones(y1.shape, dtype=bool)
        flags = np.zeros(y1.shape, dtype=np.int64)
        halvings = np.zeros(y1.shape, dtype=np.int64)
        stride = None
        rec = []
        if record is not None:
            stride = max(1, n // max(1, record - 1))
            rec.append((t0, y1.copy(), y2.copy(), flags.copy(), alive.copy()))
        for i in range(n):
            t = t0 + i * h
            t_next = t0 + (i + 1) * h if i + 1 < n else t_final
            idx = np.flatnonzero(alive)
            step_flags = np.zeros(y1.shape, dtype=np.int64)
            if idx.size:
                first = None if idx.size != y1.size else cur
                n1, n2, nxt, ok = self.rk4(t, t_next - t, y1[idx], y2[idx], runmax[idx] + self.log_eps, first)
                good = idx[ok]
                y1[good], y2[good] = n1[ok], n2[ok]
                runmax[good] = np.maximum(runmax[good], nxt[2][ok])
                if ok.all() and idx.size == y1.size:
                    cur = nxt
                else:
                    cur = None
                for j in idx[~ok]:
                    state = self.refine(t, t_next - t, y1[j], y2[j], runmax[j])
                    halvings[j] += 1
                    if state is None:
                        alive[j] = False
                        flags[j] = FLAG_TRUNCATED
                        step_flags[j] = FLAG_TRUNCATED
                    else:
                        y1[j], y2[j], runmax[j] = state
                        step_flags[j] = FLAG_HALVED
                if cur is None and alive.all():
                    cur = self.field(t_next, y1, y2)
            if stride is not None and ((i + 1) % stride == 0 or i + 1 == n):
                rec.append((t_next, y1.copy(), y2.copy(), step_flags, alive.copy()))
        return y1, y2, flags, halvings, rec


def integrate_trajectory(config: ExperimentConfig, initial: PairCoordinates, t_final: float,
                         step: float | None = None, samples: int | None = None) -> Trajectory:
    """RK4 trajectory from ``initial`` to ``t_final``.

    ``step`` is the base step in units of 2mσ₀²/ℏ.  ``samples`` limits the
    stored points to roughly that many evenly spaced ones (all steps if None).
    A trajectory that still meets a node after the maximum number of step
    halvings ends early with its last sample flagged as truncated.
    """
    integ = _Integrator(config, step)
    p = config.params
    n_steps = max(1, math.ceil((t_final - initial.t) / (integ.step_units * p.time_unit) - 1e-9))
    record = samples if samples is not None else n_steps + 1
    _, _, flags, halvings, rec = integ.run([initial.y1], [initial.y2], initial.t, t_final, record=record)
    out, out_flags = [], []
    for t, y1, y2, fl, alive in rec:
        if fl[0] == FLAG_TRUNCATED:
            out_flags[-1] = FLAG_TRUNCATED
            break
        if not alive[0]:
            break
        out.append(PairCoordinates(float(y1[0]), float(y2[0]), float(t)))
        out_flags.append(int(fl[0]))
    return Trajectory(samples=out, flags=out_flags, step=integ.step_units,
                      halvings=int(halvings[0]), truncated=bool(flags[0] == FLAG_TRUNCATED))


def integrate_ensemble(config: ExperimentConfig, y1, y2, t_final: float, t0: float = 0.0,
                       step: float | None = None):
    """Endpoints of many trajectories; returns (y1, y2, truncated mask).

    Work is split into chunks that may run on EPRLAB_THREADS threads; each
    chunk is independent, so results do not depend on the thread count.
    """
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    integ = _Integrator(config, step)
    chunk = 2048
    parts = [(s, min(s + chunk, y1.size)) for s in range(0, y1.size, chunk)]

    def work(bounds):
        s, e = bounds
        r1, r2, flags, _, _ = integ.run(y1[s:e], y2[s:e], t0, t_final)
        return r1, r2, flags == FLAG_TRUNCATED

    threads = _threads()
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, parts))
    else:
        results = [work(b) for b in parts]
    if not results:
        return np.empty(0), np.empty(0), np.empty(0, dtype=bool)
    return tuple(np.concatenate(x) for x in zip(*results))


# ------------------------------------------------------------- closed forms


def com_closed_form(y0: float, params: PhysParams, t: float) -> float:
    if t < 0:
        raise ConfigError("t must be non-negative")
    a = reduced_time(params, t)
    return y0 * math.sqrt(1 + a * a)


def quantum_potential_com(y0: float, params: PhysParams, t: float) -> float:
    if t < 0:
        raise ConfigError("t must be non-negative")
    a = reduced_time(params, t)
    rate = params.hbar / (2 * params.mass * params.sigma0 ** 2)
    return 0.5 * params.mass * y0 * y0 * rate * rate / (1 + a * a)


def empty_interval_estimate(config: ExperimentConfig, t: float) -> float:
    """(ℏt/mσ₀²)·⟨y(0)⟩."""
    p = config.params
    return p.hbar * t / (p.mass * p.sigma0 ** 2) * config.com_y0


# ------------------------------------------------------------ SQM integrals


def _grid_for(config: ExperimentConfig, t: float, margin: float = 10.0, per_sigma: float = 20.0) -> GridSpec:
    p = config.params
    width = abs(p.sigma_t(t))
    centres = [_packet_centre(pk, p, t) for _, f, g in _y_terms(config, t) for pk in (f, g)]
    lo = min(centres) - margin * width
    hi = max(centres) + margin * width
    return GridSpec(lo, hi, int(math.ceil((hi - lo) / width * per_sigma)) + 1)


def _check_coverage(config: ExperimentConfig, t: float, grid: GridSpec):
    p = config.params
    width = abs(p.sigma_t(t))
    for _, f, g in _y_terms(config, t):
        for pk in (f, g):
            c = _packet_centre(pk, p, t)
            if grid.y_min > c - 6 * width or grid.y_max < c + 6 * width:
                raise CoverageError(
                    f"grid [{grid.y_min}, {grid.y_max}] does not reach 6|σ_t| = {6 * width} "
                    f"beyond the packet centre {c}")
    if grid.points < 2 or (grid.y_max - grid.y_min) / (grid.points - 1) > width / 4:
        raise CoverageError("grid spacing must be at most |σ_t|/4")


def _overlaps(config: ExperimentConfig, t: float, y: np.ndarray):
    """Matrices O1[i,j] = ∫ f_i conj(f_j), O2[i,j] = ∫ g_i conj(g_j) and the coefficients."""
    p = config.params
    terms = _y_terms(config, t)
    coefs = np.array([c for c, _, _ in terms], dtype=complex)
    F = np.array([np.exp(_packet_log(f, p, y, t)[0]) for _, f, _ in terms])
    G = np.array([np.exp(_packet_log(g, p, y, t)[0]) for _, _, g in terms])
    O1 = integrate.trapezoid(F[:, None, :] * F[None, :, :].conj(), y, axis=-1)
    O2 = integrate.trapezoid(G[:, None, :] * G[None, :, :].conj(), y, axis=-1)
    return coefs, F, G, O1, O2


@dataclass(frozen=True)
class Normalization:
    constant: float
    t: float
    config: ExperimentConfig
    norm_squared: float


def normalize_config(config: ExperimentConfig, t: float, grid: GridSpec | None = None) -> Normalization:
    """Constant c with ∫∫|c ψ|² dy1 dy2 = 1 for the transverse amplitude at time t."""
    grid = grid or _grid_for(config, t)
    _check_coverage(config, t, grid)
    y = np.linspace(grid.y_min, grid.y_max, grid.points)
    coefs, _, _, O1, O2 = _overlaps(config, t, y)
    total = float(np.real(np.sum(np.outer(coefs, coefs.conj()) * O1 * O2)))
    if not total > 0:
        raise StateError("wavefunction has zero norm")
    return Normalization(constant=1 / math.sqrt(total), t=t, config=config, norm_squared=total)


def _require_normalized(config, t, normalization):
    if normalization is None:
        raise StateError("config is not normalized; run normalize_config for this time first")
    if normalization.config != config or not math.isclose(normalization.t, t, rel_tol=1e-12, abs_tol=1e-12):
        raise StateError("normalization was computed for a different config or time")


def _interval_overlap(f, g, params, t, lo, hi) -> complex:
    def part(y, which):
        v = np.exp(_packet_log(f, params, y, t)[0] + np.conj(_packet_log(g, params, y, t)[0]))
        return v.real if which == 0 else v.imag

    re = integrate.quad(part, lo, hi, args=(0,), epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    im = integrate.quad(part, lo, hi, args=(1,), epsabs=1e-13, epsrel=1e-12, limit=200)[0]
    return complex(re, im)


def joint_detection_probability(config: ExperimentConfig, yM: float, yN: float, spec: DetectionSpec,
                                t: float, normalization: Normalization | None = None) -> float:
    """Probability that particle 1 lands in [yM, yM+Δ] and particle 2 in [yN, yN+Δ]."""
    _require_normalized(config, t, normalization)
    p = config.params
    terms = _y_terms(config, t)
    d = spec.detector_size
    total = 0j
    for i, (ci, fi, gi) in enumerate(terms):
        for j, (cj, fj, gj) in enumerate(terms):
            if j < i:
                continue
            val = ci * np.conj(cj) * _interval_overlap(fi, fj, p, t, yM, yM + d) \
                * _interval_overlap(gi, gj, p, t, yN, yN + d)
            total += val if i == j else 2 * val.real
    return float(total.real) * normalization.constant ** 2


def marginal_density(config: ExperimentConfig, t: float, y, particle: int = 1,
                     normalization: Normalization | None = None) -> np.ndarray:
    """Normalized single-particle density ∫|ψ|² over the other coordinate."""
    norm = normalization or normalize_config(config, t)
    _require_normalized(config, t, norm)
    grid = _grid_for(config, t)
    yy = np.linspace(grid.y_min, grid.y_max, grid.points)
    p = config.params
    terms = _y_terms(config, t)
    coefs = np.array([c for c, _, _ in terms], dtype=complex)
    _, _, _, O1, O2 = _overlaps(config, t, yy)
    y = np.asarray(y, dtype=float)
    pick = 1 if particle == 1 else 2
    vals = np.array([np.exp(_packet_log(f if pick == 1 else g, p, y, t)[0]) for _, f, g in terms])
    other = O2 if pick == 1 else O1
    w = np.outer(coefs, coefs.conj()) * other
    dens = np.einsum("ij,i...,j...->...", w, vals, vals.conj())
    return np.real(dens) * norm.constant ** 2


def _marginal_cdf(config: ExperimentConfig, t: float, particle: int = 1):
    grid = _grid_for(config, t, margin=12.0, per_sigma=40.0)
    y = np.linspace(grid.y_min, grid.y_max, grid.points)
    dens = np.clip(marginal_density(config, t, y, particle), 0, None)
    cdf = integrate.cumulative_trapezoid(dens, y, initial=0.0)
    return y, cdf / cdf[-1]


def bin_probabilities(config: ExperimentConfig, t: float, edges, particle: int = 1) -> np.ndarray:
    """SQM probability of each bin of the marginal (mass outside the edges is dropped)."""
    y, cdf = _marginal_cdf(config, t, particle)
    return np.diff(np.interp(edges, y, cdf))


# ------------------------------------------------------------------ sampling


def _streams(seed: int, count: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def _sample_arrays(config: ExperimentConfig, count: int, seed: int):
    if count < 1:
        raise ConfigError("count must be at least 1")
    rngs = _streams(seed, count)
    if config.com_spread == 0:
        y, cdf = _marginal_cdf(config, 0.0, 1)
        u = np.array([r.random() for r in rngs])
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        y1 = np.interp(u, cdf[keep], y[keep])
        return y1, 2 * config.com_y0 - y1
    draws = np.array([(r.normal(), r.random()) for r in rngs])
    com = config.com_y0 + config.com_spread * draws[:, 0]
    p = config.params
    terms = _y_terms(config, 0.0)
    centres = [f[0] - g[0] for _, f, g in terms]
    half = 14 * p.sigma0
    r = np.linspace(min(centres) - half, max(centres) + half, 1401)
    y1 = np.empty(count)
    for s in range(0, count, 256):
        c = com[s:s + 256, None]
        lp, _, _, _ = _log_amplitude(terms, p, c + r / 2, c - r / 2, 0.0, gradients=False)
        lp = lp - np.max(lp, axis=1, keepdims=True)
        dens = np.exp(lp)
        cdf = integrate.cumulative_trapezoid(dens, r, axis=1, initial=0.0)
        cdf /= cdf[:, -1:]
        u = draws[s:s + 256, 1:2]
        # per-row inverse CDF by linear interpolation inside the bracketing cell
        hi = np.clip(np.sum(cdf < u, axis=1), 1, r.size - 1)
        rows = np.arange(hi.size)
        c_lo, c_hi = cdf[rows, hi - 1], cdf[rows, hi]
        frac = np.where(c_hi > c_lo, (u[:, 0] - c_lo) / np.where(c_hi > c_lo, c_hi - c_lo, 1.0), 0.0)
        rel = r[hi - 1] + frac * (r[hi] - r[hi - 1])
        y1[s:s + 256] = c[:, 0] + rel / 2
    return y1, 2 * com - y1


def sample_initial_positions(config: ExperimentConfig, count: int, seed: int) -> list[PairCoordinates]:
    """Initial pair positions drawn from |ψ(t=0)|², one RNG stream per pair.

    With com_spread = 0 the centre of mass is pinned: y2 = 2·com_y0 - y1.
    """
    y1, y2 = _sample_arrays(config, count, seed)
    return [PairCoordinates(float(a), float(b), 0.0) for a, b in zip(y1, y2)]


# ------------------------------------------------------------------ patterns


@dataclass
class Pattern:
    edges: np.ndarray
    count_full: np.ndarray
    count_selected: np.ndarray
    sqm_density: np.ndarray
    joint: np.ndarray
    report: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count_full", "count_selected", "sqm_density"])
        for i in range(len(self.edges) - 1):
            w.writerow([fmt_float(self.edges[i]), fmt_float(self.edges[i + 1]),
                        int(self.count_full[i]), int(self.count_selected[i]), fmt_float(self.sqm_density[i])])
        return buf.getvalue()


def _merge_small(observed, expected, minimum=5.0):
    """Merge adjacent bins until every expected count reaches ``minimum``."""
    obs, exp = [], []
    o_acc = e_acc = 0.0
    for o, e in zip(observed, expected):
        o_acc += o
        e_acc += e
        if e_acc >= minimum:
            obs.append(o_acc)
            exp.append(e_acc)
            o_acc = e_acc = 0.0
    if e_acc > 0 or o_acc > 0:
        if obs:
            obs[-1] += o_acc
            exp[-1] += e_acc
        else:
            obs.append(o_acc)
            exp.append(e_acc)
    return np.array(obs), np.array(exp)


def chi_square_marginal(config: ExperimentConfig, t: float, y_end, edges) -> dict:
    """Pearson test of endpoint positions against the SQM marginal at t.

    The two tails outside ``edges`` are extra bins, so no probability is lost.
    """
    y_end = np.asarray(y_end, dtype=float)
    n = y_end.size
    y, cdf = _marginal_cdf(config, t, 1)
    inner = np.interp(edges, y, cdf)
    probs = np.concatenate([[inner[0]], np.diff(inner), [1 - inner[-1]]])
    counts = np.concatenate([[np.sum(y_end < edges[0])],
                             np.histogram(y_end, bins=edges)[0],
                             [np.sum(y_end >= edges[-1])]])
    obs, exp = _merge_small(counts, n * probs)
    exp = exp * obs.sum() / exp.sum()
    stat, pval = stats.chisquare(obs, exp)
    return {"statistic": float(stat), "dof": int(len(obs) - 1), "p_value": float(pval), "bins": int(len(obs))}


def empty_interval(edges, counts, centre: float, fraction: float = EMPTY_FRACTION) -> dict:
    """Longest run of bins below ``fraction`` of the peak that contains ``centre``."""
    counts = np.asarray(counts, dtype=float)
    thresh = float(fraction * counts.max()) if counts.size and counts.max() > 0 else 0.0
    empty = counts < thresh
    i = int(np.searchsorted(edges, centre, side="right") - 1)
    if i < 0 or i >= counts.size or not empty[i]:
        return {"length": 0.0, "lo": None, "hi": None, "threshold": thresh, "fraction": fraction}
    lo = i
    while lo > 0 and empty[lo - 1]:
        lo -= 1
    hi = i
    while hi + 1 < counts.size and empty[hi + 1]:
        hi += 1
    return {"length": float(edges[hi + 1] - edges[lo]), "lo": float(edges[lo]), "hi": float(edges[hi + 1]),
            "threshold": thresh, "fraction": fraction}


def ensemble_pattern(config: ExperimentConfig, count: int, seed: int, t_final: float,
                     spec: DetectionSpec, step: float | None = None) -> Pattern:
    """Endpoint histograms of an ensemble with the opposite-sides selective filter.

    ``count_full`` and ``count_selected`` pool both particles; ``sqm_density``
    is the SQM marginal averaged over the two particles, per unit length.
    """
    y1_0, y2_0 = _sample_arrays(config, count, seed)
    y1, y2, truncated = integrate_ensemble(config, y1_0, y2_0, t_final, step=step)
    ok = ~truncated
    e1, e2 = y1[ok], y2[ok]
    s1, s2 = y1_0[ok], y2_0[ok]
    edges = spec.edges
    selected = np.sign(e1) != np.sign(e2)
    full = np.histogram(e1, edges)[0] + np.histogram(e2, edges)[0]
    sel = np.histogram(e1[selected], edges)[0] + np.histogram(e2[selected], edges)[0]
    joint = np.histogram2d(e1, e2, bins=[edges, edges])[0].astype(np.int64)
    width = np.diff(edges)
    sqm = 0.5 * (bin_probabilities(config, t_final, edges, 1) + bin_probabilities(config, t_final, edges, 2)) / width
    com_end = float(np.mean(0.5 * (e1[selected] + e2[selected]))) if selected.any() else float("nan")
    report = {
        "count": int(count),
        "seed": int(seed),
        "t_final": float(t_final),
        "reduced_time": reduced_time(config.params, t_final),
        "truncated": int(truncated.sum()),
        "selected_pairs": int(selected.sum()),
        "removed_pairs": int((~selected).sum()),
        "max_mirror_deviation": float(np.max(np.abs(e1 + e2 - 2 * com_closed_form(config.com_y0, config.params, t_final))))
        if config.com_spread == 0 and e1.size else None,
        "crossed_axis": int(np.sum(np.sign(e1) != np.sign(s1)) + np.sum(np.sign(e2) != np.sign(s2))),
        "chi_square": chi_square_marginal(config, t_final, e1, edges) if e1.size else None,
        "com_mean_selected": com_end,
        "empty_interval": empty_interval(edges, sel, com_end) if selected.any() else None,
        "empty_interval_estimate": empty_interval_estimate(config, t_final),
    }
    return Pattern(edges=edges, count_full=full, count_selected=sel, sqm_density=sqm, joint=joint, report=report)


# --------------------------------------------------------- photon coincidence


def slit_envelope(theta, theta_i, k_sigma0: float):
    """sin(x)/x with x = kσ₀(sin θ - sin θᵢ)."""
    x = k_sigma0 * (np.sin(theta) - np.sin(theta_i))
    return np.sinc(np.asarray(x) / np.pi)


def coincidence_pattern(theta1, theta2, kY: float, k_sigma0: float, theta_a: float, theta_b: float):
    theta1 = np.asarray(theta1, dtype=float)
    theta2 = np.asarray(theta2, dtype=float)
    if np.any(np.abs(theta1) >= math.pi / 2) or np.any(np.abs(theta2) >= math.pi / 2):
        raise ConfigError("angles must satisfy |θ| < π/2")
    g1a = slit_envelope(theta1, theta_a, k_sigma0)
    g2b = slit_envelope(theta2, theta_b, k_sigma0)
    g2a = slit_envelope(theta2, theta_a, k_sigma0)
    g1b = slit_envelope(theta1, theta_b, k_sigma0)
    return (g1a ** 2 * g2b ** 2 + g2a ** 2 * g1b ** 2
            + 2 * g1a * g2b * g2a * g1b * np.cos(2 * kY * (np.sin(theta1) - np.sin(theta2))))


def fringe_period(sin_theta1, intensity) -> float:
    """Mean spacing of local maxima along sin θ₁, refined by parabolic fits."""
    x = np.asarray(sin_theta1, dtype=float)
    y = np.asarray(intensity, dtype=float)
    peaks, _ = signal.find_peaks(y)
    if peaks.size < 2:
        raise ConfigError("fewer than two fringes in the scanned range")
    peaks = peaks[(peaks > 0) & (peaks < y.size - 1)]
    refined = []
    for i in peaks:
        y0, y1, y2 = y[i - 1], y[i], y[i + 1]
        denom = y0 - 2 * y1 + y2
        off = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
        refined.append(x[i] + off * (x[i + 1] - x[i]))
    return float(np.mean(np.diff(refined)))


# ------------------------------------------------------------ momentum check


def _full_log(config: ExperimentConfig, y1: float, y2: float, t: float) -> complex:
    """log ψ with the x-factor kept, at the deterministic x positions."""
    p = config.params
    form = config.packet_form
    x1, x2 = x_positions(config, t)
    logs = []
    for coef, s1, s2 in _full_terms(config):
        l1, _ = _packet_log(_slit_packet(s1, p, form), p, y1, t)
        l2, _ = _packet_log(_slit_packet(s2, p, form), p, y2, t)
        xs1 = 1 if s1 in ("A", "B") else -1
        xs2 = 1 if s2 in ("A", "B") else -1
        logs.append(np.log(complex(coef)) + l1 + l2
                    + np.log(_x_factor(xs1, p, x1, t)) + np.log(_x_factor(xs2, p, x2, t)))
    logs = np.array(logs)
    shift = np.max(logs.real)
    s = np.sum(np.exp(logs - shift))
    rel = abs(s) ** 2 / np.sum(np.exp(2 * (logs.real - shift)))
    if not rel > NODE_EPSILON:
        raise NodeError("point is too close to a node of the wavefunction", y1=y1, y2=y2, t=t)
    return shift + np.log(s)


def momentum_eigen_check(config: ExperimentConfig, coords: PairCoordinates, h: float | None = None,
                         scale: complex = 1.0) -> float:
    """|(-iℏ)(∂1+∂2)ψ - iℏ(y1+y2)/(2σ₀σ_t)·ψ| / |ψ| by central differences.

    ``scale`` multiplies ψ; the ratio form makes the result independent of it.
    """
    if config.layout != "TwoDoubleSlit":
        raise ConfigError("the total-momentum check applies to the two-double-slit layout")
    p = config.params
    h = 1e-5 * p.sigma0 if h is None else h
    y1, y2, t = coords.y1, coords.y2, coords.t
    ls = np.log(complex(scale))
    base = _full_log(config, y1, y2, t) + ls

    def ratio(d1, d2):
        return np.exp(_full_log(config, y1 + d1, y2 + d2, t) + ls - base)

    deriv = (ratio(h, 0) - ratio(-h, 0) + ratio(0, h) - ratio(0, -h)) / (2 * h)
    expected = (y1 + y2) / (2 * p.sigma0 * p.sigma_t(t))
    return float(abs(-1j * p.hbar * deriv - 1j * p.hbar * expected))


# ------------------------------------------------------------------ CSV out


def trajectories_csv(config: ExperimentConfig, trajectories) -> str:
    """Consecutive blocks, one per trajectory, each starting at its initial time."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "y1", "y2", "x1", "x2", "flag"])
    for tr in trajectories:
        for s, fl in zip(tr.samples, tr.flags):
            x1, x2 = x_positions(config, s.t)
            w.writerow([fmt_float(s.t), fmt_float(s.y1), fmt_float(s.y2), fmt_float(x1), fmt_float(x2), fl])
    return buf.getvalue()


def integrate_pairs(config: ExperimentConfig, y1, y2, t_final: float, samples: int = 101,
                    step: float | None = None, t0: float = 0.0) -> list[Trajectory]:
    """Trajectories for the given initial pairs, integrated together and recorded at common times."""
    y1 = np.atleast_1d(np.asarray(y1, dtype=float))
    y2 = np.atleast_1d(np.asarray(y2, dtype=float))
    integ = _Integrator(config, step)
    _, _, flags, halvings, rec = integ.run(y1, y2, t0, t_final, record=samples)
    out = []
    for j in range(y1.size):
        pts, fls = [], []
        for t, r1, r2, fl, alive in rec:
            if fl[j] == FLAG_TRUNCATED:
                if fls:
                    fls[-1] = FLAG_TRUNCATED
                break
            if not alive[j]:
                break
            pts.append(PairCoordinates(float(r1[j]), float(r2[j]), float(t)))
            fls.append(int(fl[j]))
        out.append(Trajectory(samples=pts, flags=fls, step=integ.step_units, halvings=int(halvings[j]),
                              truncated=bool(flags[j] == FLAG_TRUNCATED)))
    return out


def ensemble_trajectories(config: ExperimentConfig, count: int, seed: int, t_final: float,
                          samples: int = 101, step: float | None = None) -> list[Trajectory]:
    """Trajectories from ``count`` seeded initial positions."""
    y1_0, y2_0 = _sample_arrays(config, count, seed)
    return integrate_pairs(config, y1_0, y2_0, t_final, samples, step)
