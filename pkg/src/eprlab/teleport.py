"""Teleportation of signed-channel states through a shared Bell pair.

Particle order throughout is (unknown, Alice's half, Bob's half).  The pair
shared by Alice and Bob starts in the initial Bell state (1-, 1).  Alice's
measurement is simulated either by projecting onto the Bell basis or by
pushing the first two particles through the dense-coding measurement chain
and reading the product ket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import densecode as dc
from .errors import CapabilityError, OrderMismatchError
from .numkit import parse_complex_vector_csv


def reconstruction_operator(N: int, H, label: dc.BellLabel) -> np.ndarray:
    """Bob's corrector: sum_n h[j,2n-1]|n><-f(n)| + h[j,2n]|-n><f(n)|."""
    h = dc._bell_matrix(N, H)
    label.check(N)
    m = np.zeros((2 * N, 2 * N))
    for n in range(1, N + 1):
        f = dc.mod_shift(n, label.k, label.sign, N)
        m[dc.channel_position(n, N), dc.channel_position(-f, N)] = h[label.j - 1, 2 * n - 2]
        m[dc.channel_position(-n, N), dc.channel_position(f, N)] = h[label.j - 1, 2 * n - 1]
    return m


def _as_state(phi, dim: int) -> np.ndarray:
    v = np.asarray(phi, dtype=complex).reshape(-1)
    if v.size > dim:
        raise OrderMismatchError(f"state has {v.size} amplitudes, protocol supports {dim}")
    if v.size < dim:
        v = np.concatenate([v, np.zeros(dim - v.size, dtype=complex)])
    norm = np.linalg.norm(v)
    if norm == 0:
        raise OrderMismatchError("state has zero norm")
    return v / norm


def load_state_csv(path, N: int | None = None) -> np.ndarray:
    """Amplitudes from 're,im' rows, zero-padded to 2N channels when N is given."""
    with open(path, encoding="utf-8") as fh:
        v = parse_complex_vector_csv(fh.read())
    return _as_state(v, 2 * N) if N is not None else v / np.linalg.norm(v)


def random_state(dim: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return v / np.linalg.norm(v)


def bell_expand(phi, N: int, H=None) -> dict:
    """Bob-side residual state O'^dagger|phi> for every Bell outcome."""
    h = dc._bell_matrix(N, H)
    v = _as_state(phi, 2 * N)
    return {lab: reconstruction_operator(N, h, lab).T @ v for lab in dc.all_labels(N)}


def reassemble(residuals: dict, N: int, H=None) -> np.ndarray:
    """(1/2N) sum over outcomes of |Bell> ⊗ residual, as a 3-particle vector."""
    h = dc._bell_matrix(N, H)
    total = np.zeros((2 * N) ** 3, dtype=complex)
    for lab, r in residuals.items():
        total += np.kron(dc.bell_state(N, h, lab), r)
    return total / (2 * N)


def _initial_tensor(v: np.ndarray, N: int, h) -> np.ndarray:
    d = 2 * N
    pair = dc.bell_state(N, h, dc.INITIAL_LABEL).reshape(d, d)
    return np.einsum("o,ab->oab", v, pair)


def outcome_probabilities(phi, N: int, H=None) -> np.ndarray:
    """Exact probabilities of the 4N^2 outcomes, in flat-code order."""
    h = dc._bell_matrix(N, H)
    v = _as_state(phi, 2 * N)
    t = _initial_tensor(v, N, h)
    d = 2 * N
    basis = dc.bell_basis(N, h)
    res = np.einsum("pl,pb->lb", basis.conj(), t.reshape(d * d, d))
    return np.sum(np.abs(res) ** 2, axis=1)


@dataclass(frozen=True)
class TeleportReport:
    n: int
    label: dc.BellLabel
    probability: float
    bob_before: np.ndarray
    bob_after: np.ndarray
    fidelity: float
    seed: int | None
    method: str
    m: int | None = None
    momentum_label: dc.BellLabel | None = None

    def as_dict(self) -> dict:
        mom = None
        if self.momentum_label is not None:
            mom = {"q": self.momentum_label.k, "sign": "+" if self.momentum_label.sign > 0 else "-",
                   "r": self.momentum_label.j}
        return {
            "n": self.n,
            "m": self.m,
            "outcome_position": self.label.as_dict(),
            "outcome_momentum": mom,
            "fidelity": self.fidelity,
            "seed": self.seed,
        }


def _fidelity(a: np.ndarray, b: np.ndarray) -> float:
    return float(min(1.0, abs(np.vdot(a, b)) ** 2))


def _choose(probs: np.ndarray, seed, forced_index: int | None) -> int:
    if forced_index is not None:
        return forced_index
    rng = np.random.default_rng(seed)
    return int(rng.choice(len(probs), p=probs / probs.sum()))


def simulate_teleport(phi, N: int, H=None, seed: int | None = None,
                      forced: dc.BellLabel | None = None, method: str = "projection",
                      corrector: dc.BellLabel | None = None, H_N=None) -> TeleportReport:
    """One run of the protocol.

    ``forced`` fixes Alice's outcome instead of sampling it; ``corrector``
    makes Bob apply a different label's operator, which is only useful for
    checking that the wrong correction fails.
    """
    h = dc._bell_matrix(N, H)
    v = _as_state(phi, 2 * N)
    d = 2 * N
    t = _initial_tensor(v, N, h).reshape(d * d, d)
    if method == "projection":
        basis = dc.bell_basis(N, h)
        res = basis.conj().T @ t
        probs = np.sum(np.abs(res) ** 2, axis=1)
        idx = _choose(probs, seed, None if forced is None else forced.flat(N) - 1)
        label = dc.BellLabel.from_flat(idx + 1, N)
        residual = res[idx]
    elif method == "chain":
        dec = dc.build_decoder(N, h, H_N)
        out = dec.chain @ t
        # reorder product kets into flat-code order so seeded draws match projection
        order = [dc.pair_index(*dec.by_label[lab], N) for lab in dc.all_labels(N)]
        out = out[order]
        probs = np.sum(np.abs(out) ** 2, axis=1)
        idx = _choose(probs, seed, None if forced is None else forced.flat(N) - 1)
        label = dc.BellLabel.from_flat(idx + 1, N)
        residual = out[idx]
    else:
        raise ValueError(f"unknown measurement method {method!r}")
    p = float(probs[idx])
    before = residual / math.sqrt(p)
    fix = reconstruction_operator(N, h, corrector or label)
    after = fix @ before
    return TeleportReport(n=N, label=label, probability=p, bob_before=before, bob_after=after,
                          fidelity=_fidelity(v, after), seed=seed, method=method)


def sample_outcomes(phi, N: int, H=None, count: int = 100_000, seed: int = 0) -> np.ndarray:
    """Outcome counts (flat-code order) over ``count`` independent seeded runs."""
    probs = outcome_probabilities(phi, N, H)
    rng = np.random.default_rng(seed)
    draws = rng.choice(len(probs), size=count, p=probs / probs.sum())
    return np.bincount(draws, minlength=len(probs))


def uniformity_check(counts: np.ndarray) -> tuple[float, float]:
    """Pearson statistic against the uniform law and its mean + 3 sigma bound."""
    counts = np.asarray(counts, dtype=float)
    k = counts.size
    expected = counts.sum() / k
    stat = float(np.sum((counts - expected) ** 2) / expected)
    dof = k - 1
    return stat, dof + 3 * math.sqrt(2 * dof)


# ---------------------------------------------------------------- momentum


@dataclass(frozen=True)
class MomentumConfig:
    M: int
    magnitudes: tuple

    def __post_init__(self):
        p = np.asarray(self.magnitudes, dtype=float)
        if len(p) != self.M or np.any(p <= 0) or np.any(np.diff(p) <= 0):
            raise ValueError("momentum magnitudes must be M positive increasing values")

    def labels(self) -> list[float]:
        """Signed momenta in basis order +p_1..+p_M, -p_1..-p_M."""
        p = list(self.magnitudes)
        return p + [-x for x in p]


def momentum_relabel(obj):
    """Momentum-space counterpart of a position operator or state.

    Channels |±n> map to |±p_n> position by position, so matrices and
    amplitude vectors carry over unchanged.
    """
    return np.array(obj, copy=True)


def momentum_gate(kind: str, m: int | None, M: int) -> np.ndarray:
    """'sign' flips |-p_m>, 'reverse' swaps ±p_m, 'drift' shifts magnitudes."""
    table = {"sign": "N", "reverse": "P", "drift": "L"}
    return momentum_relabel(dc.basic_gate(table[kind], m, M))


def momentum_hadamard(m: int, M: int) -> np.ndarray:
    return momentum_relabel(dc.position_hadamard(m, M))


def momentum_controlled_reversal(M: int) -> np.ndarray:
    return momentum_relabel(dc.pcs_gate(M))


def v_gate(M: int, H_M=None) -> np.ndarray:
    return momentum_relabel(dc.u_gate(M, H_M))


def momentum_bell_state(M: int, H, label: dc.BellLabel) -> np.ndarray:
    return momentum_relabel(dc.bell_state(M, H, label))


def momentum_reconstruction_operator(M: int, H, label: dc.BellLabel) -> np.ndarray:
    return momentum_relabel(reconstruction_operator(M, H, label))


# ---------------------------------------------------------------------- 3D


def _choose_pair(probs: np.ndarray, seed):
    rng = np.random.default_rng(seed)
    flat = probs.reshape(-1)
    return divmod(int(rng.choice(flat.size, p=flat / flat.sum())), probs.shape[1])


def teleport_3d(phi_xz, N: int, M: int, H_x=None, H_p=None, seed: int | None = None,
                forced: tuple | None = None) -> TeleportReport:
    """Position channels on one axis, momentum channels on the other.

    ``phi_xz`` has shape (2N, 2M) or is flattened row-major.  Two independent
    Bell measurements run; Bob applies O' ⊗ T.
    """
    hx = dc._bell_matrix(N, H_x)
    hp = dc._bell_matrix(M, H_p)
    dx, dz = 2 * N, 2 * M
    phi = np.asarray(phi_xz, dtype=complex).reshape(dx, dz)
    phi = phi / np.linalg.norm(phi)
    px = dc.bell_state(N, hx, dc.INITIAL_LABEL).reshape(dx, dx)
    pz = momentum_bell_state(M, hp, dc.INITIAL_LABEL).reshape(dz, dz)
    bx = dc.bell_basis(N, hx).reshape(dx, dx, -1)
    bz = dc.bell_basis(M, hp).reshape(dz, dz, -1)
    # res[lx, lz, b, d] = sum conj(Bx[o,a,lx]) conj(Bz[p,c,lz]) phi[o,p] px[a,b] pz[c,d]
    if forced is None:
        res = np.einsum("oal,pcm,op,ab,cd->lmbd", bx.conj(), bz.conj(), phi, px, pz)
        probs = np.sum(np.abs(res) ** 2, axis=(2, 3))
        ix, iz = _choose_pair(probs, seed)
        residual = res[ix, iz]
        p = float(probs[ix, iz])
    else:
        ix, iz = forced[0].flat(N) - 1, forced[1].flat(M) - 1
        residual = np.einsum("oa,pc,op,ab,cd->bd", bx[:, :, ix].conj(), bz[:, :, iz].conj(), phi, px, pz)
        p = float(np.sum(np.abs(residual) ** 2))
    lx = dc.BellLabel.from_flat(ix + 1, N)
    lz = dc.BellLabel.from_flat(iz + 1, M)
    before = residual / math.sqrt(p)
    fix = np.kron(reconstruction_operator(N, hx, lx), momentum_reconstruction_operator(M, hp, lz))
    after = (fix @ before.reshape(-1)).reshape(dx, dz)
    return TeleportReport(n=N, m=M, label=lx, momentum_label=lz, probability=p,
                          bob_before=before, bob_after=after,
                          fidelity=_fidelity(phi.reshape(-1), after.reshape(-1)),
                          seed=seed, method="projection")


def outcome_probabilities_3d(phi_xz, N: int, M: int, H_x=None, H_p=None) -> np.ndarray:
    hx = dc._bell_matrix(N, H_x)
    hp = dc._bell_matrix(M, H_p)
    dx, dz = 2 * N, 2 * M
    phi = np.asarray(phi_xz, dtype=complex).reshape(dx, dz)
    phi = phi / np.linalg.norm(phi)
    px = dc.bell_state(N, hx, dc.INITIAL_LABEL).reshape(dx, dx)
    pz = dc.bell_state(M, hp, dc.INITIAL_LABEL).reshape(dz, dz)
    bx = dc.bell_basis(N, hx).reshape(dx, dx, -1)
    bz = dc.bell_basis(M, hp).reshape(dz, dz, -1)
    res = np.einsum("oal,pcm,op,ab,cd->lmbd", bx.conj(), bz.conj(), phi, px, pz)
    return np.sum(np.abs(res) ** 2, axis=(2, 3))


# -------------------------------------------------------- flattened variants


def flatten_2d(cx: int, cy: int, Nx: int, Ny: int) -> int:
    """Signed planar site (cx, cy) as a channel of the Nx*Ny*2 effective line.

    The map sends (-cx, -cy) to the negated channel, so the planar source
    state becomes the initial Bell state of the flattened problem.
    """
    s = 1 if cx > 0 else -1
    y = s * cy
    y_idx = y if y > 0 else Ny - y
    return s * ((abs(cx) - 1) * 2 * Ny + y_idx)


def unflatten_2d(c: int, Nx: int, Ny: int) -> tuple[int, int]:
    s = 1 if c > 0 else -1
    q, r = divmod(abs(c) - 1, 2 * Ny)
    y = r + 1 if r < Ny else -(r - Ny + 1)
    return s * (q + 1), s * y


def planar_to_flat(phi_xy, Nx: int, Ny: int) -> np.ndarray:
    """Amplitudes indexed [pos(cx), pos(cy)] to the flattened channel vector."""
    a = np.asarray(phi_xy, dtype=complex).reshape(2 * Nx, 2 * Ny)
    n_eff = 2 * Nx * Ny
    v = np.zeros(2 * n_eff, dtype=complex)
    for cx in dc.channels(Nx):
        for cy in dc.channels(Ny):
            c = flatten_2d(cx, cy, Nx, Ny)
            v[dc.channel_position(c, n_eff)] = a[dc.channel_position(cx, Nx), dc.channel_position(cy, Ny)]
    return v


def flat_to_planar(v, Nx: int, Ny: int) -> np.ndarray:
    n_eff = 2 * Nx * Ny
    a = np.zeros((2 * Nx, 2 * Ny), dtype=complex)
    for c in dc.channels(n_eff):
        cx, cy = unflatten_2d(c, Nx, Ny)
        a[dc.channel_position(cx, Nx), dc.channel_position(cy, Ny)] = v[dc.channel_position(c, n_eff)]
    return a


def teleport_2d(phi_xy, Nx: int, Ny: int, H=None, seed: int | None = None,
                forced: dc.BellLabel | None = None) -> TeleportReport:
    n_eff = 2 * Nx * Ny
    try:
        h = dc._bell_matrix(n_eff, H)
    except Exception as exc:
        raise CapabilityError(f"no admissible Hadamard of order {2 * n_eff}: {exc}") from None
    return simulate_teleport(planar_to_flat(phi_xy, Nx, Ny), n_eff, h, seed=seed, forced=forced)


def flatten_spin(c: int, ms2: int, S2: int) -> int:
    """Channel c with spin projection ms2/2 (``S2`` = 2S) as a channel of N(2S+1)."""
    s = 1 if c > 0 else -1
    idx = (S2 - s * ms2) // 2 + 1
    return s * ((abs(c) - 1) * (S2 + 1) + idx)


def spin_to_flat(phi_xs, N: int, S2: int) -> np.ndarray:
    """Amplitudes indexed [pos(c), s] with m_s = S - s to the flattened vector."""
    ds = S2 + 1
    a = np.asarray(phi_xs, dtype=complex).reshape(2 * N, ds)
    n_eff = N * ds
    v = np.zeros(2 * n_eff, dtype=complex)
    for c in dc.channels(N):
        for s in range(ds):
            ms2 = S2 - 2 * s
            v[dc.channel_position(flatten_spin(c, ms2, S2), n_eff)] = a[dc.channel_position(c, N), s]
    return v


def teleport_with_spin(phi_xs, N: int, S: float, H_ext=None, seed: int | None = None,
                       forced: dc.BellLabel | None = None) -> TeleportReport:
    S2 = round(2 * S)
    if S2 < 0 or abs(2 * S - S2) > 1e-12:
        raise ValueError(f"2S must be a non-negative integer, got S={S}")
    n_eff = N * (S2 + 1)
    try:
        h = dc._bell_matrix(n_eff, H_ext)
    except Exception as exc:
        raise CapabilityError(f"no admissible Hadamard of order {2 * n_eff}: {exc}") from None
    return simulate_teleport(spin_to_flat(phi_xs, N, S2), n_eff, h, seed=seed, forced=forced)
