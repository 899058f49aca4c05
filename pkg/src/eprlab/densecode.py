"""Bell bases over signed channels, encoders, the measurement chain and rates.

Single-particle basis ordering is |+1>..|+N>, |-1>..|-N>.  Pair states live
in the Kronecker product (Alice ⊗ Bob), so pair index = pos(a)*2N + pos(b).

Hadamard matrices are passed in raw +1/-1 form.  ``H`` (order 2N) fixes the
member signs of the Bell basis; ``H_N`` (order N) drives the final unitary of
the measurement chain.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import (
    AmbiguityError,
    CapabilityError,
    OrderMismatchError,
    ParseError,
    SizeError,
    ValidationError,
)
from .numkit import bundled_hadamard, require_hadamard, sylvester_of_order

EMPTY_SLOT = "⊔"
DECODE_TOLERANCE = 1e-8


# ---------------------------------------------------------------- channels


def wrap(v: int, N: int) -> int:
    return (v - 1) % N + 1


def channels(N: int) -> list[int]:
    return list(range(1, N + 1)) + [-i for i in range(1, N + 1)]


def channel_position(c: int, N: int) -> int:
    if c == 0 or abs(c) > N:
        raise ValueError(f"channel {c} out of range for N={N}")
    return c - 1 if c > 0 else N - c - 1


def position_channel(p: int, N: int) -> int:
    return p + 1 if p < N else -(p - N + 1)


def pair_index(a: int, b: int, N: int) -> int:
    return channel_position(a, N) * 2 * N + channel_position(b, N)


def pair_channels(index: int, N: int) -> tuple[int, int]:
    d = 2 * N
    return position_channel(index // d, N), position_channel(index % d, N)


def mod_shift(n: int, k: int, sign: int, N: int) -> int:
    """Channel paired with ``n`` in family ``k``: sign * wrap(n + k - 1)."""
    return sign * wrap(n + k - 1, N)


# ------------------------------------------------------------------ labels


@dataclass(frozen=True, order=True)
class BellLabel:
    k: int
    sign: int
    j: int

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign!r}")

    def family(self) -> int:
        return 2 * self.k if self.sign > 0 else 2 * self.k - 1

    def flat(self, N: int) -> int:
        return 2 * N * (self.family() - 1) + self.j

    @classmethod
    def from_flat(cls, code: int, N: int) -> "BellLabel":
        if not 1 <= code <= 4 * N * N:
            raise ValueError(f"flat code {code} outside 1..{4 * N * N}")
        fam, j = divmod(code - 1, 2 * N)
        fam += 1
        return cls(k=(fam + 1) // 2, sign=1 if fam % 2 == 0 else -1, j=j + 1)

    def check(self, N: int) -> "BellLabel":
        if not (1 <= self.k <= N and 1 <= self.j <= 2 * N):
            raise ValueError(f"label {self} out of range for N={N}")
        return self

    def as_dict(self) -> dict:
        return {"k": self.k, "sign": "+" if self.sign > 0 else "-", "j": self.j}

    def __str__(self) -> str:
        return f"({self.k}{'+' if self.sign > 0 else '-'},{self.j})"


INITIAL_LABEL = BellLabel(1, -1, 1)


def all_labels(N: int) -> list[BellLabel]:
    """Labels in flat-code order."""
    return [BellLabel.from_flat(c, N) for c in range(1, 4 * N * N + 1)]


def parse_sign(s) -> int:
    if s in (1, "+", "+1", "plus"):
        return 1
    if s in (-1, "-", "-1", "minus"):
        return -1
    raise ValueError(f"bad sign {s!r}")


# -------------------------------------------------------------- hadamards


def _bell_matrix(N: int, H) -> np.ndarray:
    if H is None:
        return sylvester_of_order(2 * N)
    return require_hadamard(H, order=2 * N)


def _unitary_matrix(N: int, H_N) -> np.ndarray:
    if H_N is None:
        try:
            return sylvester_of_order(N)
        except SizeError:
            raise CapabilityError(f"no built-in order-{N} Hadamard; supply one from a file") from None
    try:
        return require_hadamard(H_N, order=N)
    except ValidationError as exc:
        raise CapabilityError(f"order-{N} matrix is not admissible: {exc}") from None


def table_bell_matrix(N: int) -> np.ndarray:
    """Bell-sign matrix whose member numbering matches the reference tables.

    For N = 1, 2 this is plain Sylvester; for N = 4 it is a row permutation
    of Sylvester order 8 shipped with the package.
    """
    if N == 4:
        return bundled_hadamard("bell_table_order8")
    return sylvester_of_order(2 * N)


# ----------------------------------------------------------------- states


def bell_state(N: int, H, label: BellLabel) -> np.ndarray:
    h = _bell_matrix(N, H)
    label.check(N)
    v = np.zeros(4 * N * N)
    for n in range(1, N + 1):
        f = mod_shift(n, label.k, label.sign, N)
        v[pair_index(n, f, N)] += h[label.j - 1, 2 * n - 2]
        v[pair_index(-n, -f, N)] += h[label.j - 1, 2 * n - 1]
    return v / math.sqrt(2 * N)


def bell_basis(N: int, H=None) -> np.ndarray:
    """Columns are the Bell states in flat-code order."""
    h = _bell_matrix(N, H)
    return np.column_stack([bell_state(N, h, lab) for lab in all_labels(N)])


# ------------------------------------------------------------------- gates


def basic_gate(kind: str, n: int | None, N: int) -> np.ndarray:
    """``kind`` is 'N' (negate |-n>), 'P' (swap n and -n) or 'L' (cyclic shift)."""
    d = 2 * N
    if kind == "L":
        m = np.zeros((d, d))
        for c in channels(N):
            s = 1 if c > 0 else -1
            m[channel_position(s * wrap(abs(c) + 1, N), N), channel_position(c, N)] = 1
        return m
    if n is None or not 1 <= n <= N:
        raise ValueError(f"gate index {n!r} out of range for N={N}")
    m = np.eye(d)
    a, b = channel_position(n, N), channel_position(-n, N)
    if kind == "N":
        m[b, b] = -1
    elif kind == "P":
        m[[a, b]] = m[[b, a]]
    else:
        raise ValueError(f"unknown gate kind {kind!r}")
    return m


def position_hadamard(n: int, N: int) -> np.ndarray:
    """Two-level Hadamard on span{|n>, |-n>}, identity on every other channel."""
    m = np.eye(2 * N)
    a, b = channel_position(n, N), channel_position(-n, N)
    r = 1 / math.sqrt(2)
    m[a, a] = m[a, b] = m[b, a] = r
    m[b, b] = -r
    return m


_TOKEN = re.compile(r"(I|N\d+|P\d+|L\+?)(?:\^(\d+))?")


def parse_word(word: str, N: int) -> np.ndarray:
    """Gate word such as 'N1N2L+^3P1P2' as a matrix; the rightmost gate acts first."""
    w = word.replace(" ", "")
    m = np.eye(2 * N)
    pos = 0
    while pos < len(w):
        tok = _TOKEN.match(w, pos)
        if tok is None:
            raise ParseError(f"cannot parse gate word {word!r} at offset {pos}")
        g, e = tok.group(1), int(tok.group(2) or 1)
        if g == "I":
            gate = np.eye(2 * N)
        elif g.startswith("L"):
            gate = basic_gate("L", None, N)
        else:
            gate = basic_gate(g[0], int(g[1:]), N)
        m = m @ np.linalg.matrix_power(gate, e)
        pos = tok.end()
    return m


def shift_operator(N: int, H, label: BellLabel) -> np.ndarray:
    """Sum_n h[j,2n-1]|n><f(n)| + h[j,2n]|-n><-f(n)| for the given family/member."""
    h = _bell_matrix(N, H)
    label.check(N)
    m = np.zeros((2 * N, 2 * N))
    for n in range(1, N + 1):
        f = mod_shift(n, label.k, label.sign, N)
        m[channel_position(n, N), channel_position(f, N)] = h[label.j - 1, 2 * n - 2]
        m[channel_position(-n, N), channel_position(-f, N)] = h[label.j - 1, 2 * n - 1]
    return m


def encode_operator(N: int, H, label: BellLabel) -> np.ndarray:
    """Alice's local operator taking the initial Bell state to ``label``.

    Acting on the initial family flips the family sign, so the target
    (k, s, j) is reached by the shift operator with sign -s.
    """
    return shift_operator(N, H, BellLabel(label.k, -label.sign, label.j))


def encoder_word(N: int, H, label: BellLabel, a: int = 1) -> str:
    h = _bell_matrix(N, H)
    label.check(N)
    if not 1 <= a <= 2 * N:
        raise ValueError(f"fixed row {a} outside 1..{2 * N}")
    ha, hj = h[a - 1], h[label.j - 1]
    member = []
    for i in range(1, N + 1):
        if ha[2 * i - 2] != hj[2 * i - 2]:
            member.append(f"P{i}N{i}P{i}")
        if ha[2 * i - 1] != hj[2 * i - 1]:
            member.append(f"N{i}")
    family = []
    shift = N - label.k + 1
    if shift % N:
        family.append("L+" if shift == 1 else f"L+^{shift}")
    if label.sign > 0:
        family.extend(f"P{i}" for i in range(1, N + 1))
    return "".join(member + family) or "I"


def compose_encoder(N: int, H, label: BellLabel, a: int = 1) -> tuple[np.ndarray, str]:
    """Encoder assembled from basic gates: member signs applied after the family move."""
    word = encoder_word(N, H, label, a)
    return parse_word(word, N), word


def pcs_gate(N: int) -> np.ndarray:
    d = 2 * N
    m = np.zeros((d * d, d * d))
    for l in channels(N):
        for b in channels(N):
            m[pair_index(l, -b if l < 0 else b, N), pair_index(l, b, N)] = 1
    return m


def u_gate(N: int, H_N=None) -> np.ndarray:
    """Final unitary of the measurement chain.

    Bob-negative sector uses H_N directly; the Bob-positive sector uses
    -D H_N D with D = diag((-1)^m).  This reproduces the explicit gate
    composites for N = 2, 4, 8.
    """
    hn = _unitary_matrix(N, H_N).astype(float)
    d = 2 * N
    if N == 1:
        return np.eye(d * d)
    alt = np.array([(-1) ** m for m in range(1, N + 1)], dtype=float)
    h_pos = -np.outer(alt, alt) * hn
    u = np.zeros((d * d, d * d))
    scale = 1 / math.sqrt(N)
    for sl in (1, -1):
        for sm in (1, -1):
            hs = h_pos if sm > 0 else hn
            for l in range(1, N + 1):
                for m in range(1, N + 1):
                    src = pair_index(sl * l, sm * m, N)
                    for n in range(1, N + 1):
                        dst = pair_index(sl * wrap(n + l - 1, N), sm * wrap(n + m - 1, N), N)
                        u[dst, src] += hs[m - 1, wrap(m + n - 1, N) - 1] * scale
    return u


def hadamard_layer(N: int) -> np.ndarray:
    m = np.eye(2 * N)
    for n in range(1, N + 1):
        m = m @ position_hadamard(n, N)
    return np.kron(m, np.eye(2 * N))


def bsm_chain(N: int, H_N=None) -> np.ndarray:
    return u_gate(N, H_N) @ hadamard_layer(N) @ pcs_gate(N)


# ---------------------------------------------------------------- decoding


@dataclass(frozen=True)
class Decoder:
    N: int
    chain: np.ndarray
    by_outcome: dict = field(repr=False)
    by_label: dict = field(repr=False)


@lru_cache(maxsize=32)
def _decoder_cached(N: int, h_bytes: bytes, hn_bytes: bytes) -> Decoder:
    h = np.frombuffer(h_bytes, dtype=np.int64).reshape(2 * N, 2 * N)
    hn = np.frombuffer(hn_bytes, dtype=np.int64).reshape(N, N)
    chain = bsm_chain(N, hn)
    by_outcome, by_label = {}, {}
    for lab in all_labels(N):
        out = chain @ bell_state(N, h, lab)
        idx = int(np.argmax(np.abs(out)))
        if abs(abs(out[idx]) - 1) > DECODE_TOLERANCE:
            raise CapabilityError(f"measurement chain does not map Bell state {lab} to a product ket at N={N}")
        ket = pair_channels(idx, N)
        if ket in by_outcome:
            raise CapabilityError(f"measurement chain is not injective at N={N}")
        by_outcome[ket] = lab
        by_label[lab] = ket
    return Decoder(N=N, chain=chain, by_outcome=by_outcome, by_label=by_label)


def build_decoder(N: int, H=None, H_N=None) -> Decoder:
    """Outcome table built by pushing every Bell state through the chain once."""
    h = _bell_matrix(N, H)
    hn = _unitary_matrix(N, H_N)
    return _decoder_cached(N, np.ascontiguousarray(h, dtype=np.int64).tobytes(),
                           np.ascontiguousarray(hn, dtype=np.int64).tobytes())


def rename_string(alice: int, bob: int, N: int) -> str:
    slots = [EMPTY_SLOT] * (2 * N)
    slots[abs(alice) - 1] = "0" if alice > 0 else "1"
    slots[N + abs(bob) - 1] = "0" if bob > 0 else "1"
    return "".join(slots)


@dataclass(frozen=True)
class BsmResult:
    outcome: tuple[int, int]
    label: BellLabel
    renamed: str
    probability: float
    exact: bool


def bsm_dense(N: int, H, state: np.ndarray, H_N=None) -> BsmResult:
    """Run the measurement chain and read off the dominant product ket.

    A state that leaves the chain within the decode tolerance of a single
    ket is reported as exact.  Noisy inputs still decode to the nearest
    outcome as long as it carries a strict majority of the probability.
    """
    dec = build_decoder(N, H, H_N)
    psi = np.asarray(state, dtype=complex)
    if psi.shape != (4 * N * N,):
        raise OrderMismatchError(f"pair state must have dimension {4 * N * N}, got {psi.shape}")
    norm = np.linalg.norm(psi)
    if norm == 0:
        raise AmbiguityError("zero state cannot be measured")
    probs = np.abs(dec.chain @ (psi / norm)) ** 2
    idx = int(np.argmax(probs))
    top = float(probs[idx])
    if top <= 0.5:
        raise AmbiguityError(
            "no measurement outcome dominates the state",
            top_probability=top,
        )
    ket = pair_channels(idx, N)
    return BsmResult(
        outcome=ket,
        label=dec.by_outcome[ket],
        renamed=rename_string(*ket, N),
        probability=top,
        exact=(1 - top) <= DECODE_TOLERANCE,
    )


# ---------------------------------------------------------------- messages


def message_bits(N: int) -> int | None:
    """Bits per message, or None when 2N is not a power of two."""
    d = 2 * N
    if d & (d - 1):
        return None
    return 2 * (d.bit_length() - 1)


def message_to_label(message, N: int) -> BellLabel:
    bits = message_bits(N)
    if isinstance(message, str):
        if bits is None:
            raise ValueError(f"bit-string messages need 2N a power of two, N={N}")
        if len(message) != bits or set(message) - {"0", "1"}:
            raise ValueError(f"message must be {bits} bits, got {message!r}")
        value = int(message, 2)
    else:
        value = int(message)
        if not 0 <= value < 4 * N * N:
            raise ValueError(f"message value {value} outside 0..{4 * N * N - 1}")
    return BellLabel.from_flat(value + 1, N)


def label_to_message(label: BellLabel, N: int, as_bits: bool = True):
    value = label.flat(N) - 1
    bits = message_bits(N)
    if as_bits and bits is not None:
        return format(value, f"0{bits}b")
    return value


@dataclass(frozen=True)
class RoundTrip:
    N: int
    label: BellLabel
    outcome: tuple[int, int]
    renamed: str
    message_in: object
    message_out: object

    def as_dict(self) -> dict:
        return {
            "N": self.N,
            "label": self.label.as_dict(),
            "outcome": list(self.outcome),
            "renamed": self.renamed,
            "message_in": self.message_in,
            "message_out": self.message_out,
        }


def dense_roundtrip(N: int, H, message, H_N=None, noise: np.ndarray | None = None) -> RoundTrip:
    """Encode a message on Alice's particle, measure on Bob's side, decode."""
    label = message_to_label(message, N)
    initial = bell_state(N, H, INITIAL_LABEL)
    sent = np.kron(encode_operator(N, H, label), np.eye(2 * N)) @ initial
    if noise is not None:
        sent = sent + noise
    res = bsm_dense(N, H, sent, H_N)
    out = label_to_message(res.label, N, as_bits=isinstance(message, str))
    return RoundTrip(N, label, res.outcome, res.renamed, message, out)


# ------------------------------------------------------------------- rates


@dataclass(frozen=True)
class GateTimes:
    t_c: float
    t_h: float
    t_p: float
    t_u: float

    def __post_init__(self):
        for name in ("t_c", "t_h", "t_p", "t_u"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def equal(cls, N: int, t: float = 1.0) -> "GateTimes":
        """t_c = t_h = t_p/4 = t_u/N = t."""
        return cls(t_c=t, t_h=t, t_p=4 * t, t_u=N * t)


def info_rates(N: int, times: GateTimes, qubits: int | None = None) -> dict:
    """Information-gain rates of the channel protocol and the qubit baselines.

    ``qubits`` is the qubit count of the comparison schemes (defaults to N).
    The maximally entangled baseline needs at least two qubits; it is None
    otherwise.
    """
    q = N if qubits is None else qubits
    tc, th, tp, tu = times.t_c, times.t_h, times.t_p, times.t_u
    r_x = 2 * math.log2(2 * N) / (tp + th + tu)
    r_pair = 2 * q / (q * q * (tc + th))
    r_max = q / ((q - 1) * ((q - 1) * tc + th)) if q > 1 else None
    return {
        "R_x": r_x,
        "R_p": r_pair,
        "R_m": r_max,
        "r_p": 2 * N / (N * (th + tc)),
        "r_m": (N + 1) / (th + N * tc),
        "r_p_per_particle": 2 / (N * (th + tc)),
        "r_m_per_particle": (N + 1) / (N * (th + N * tc)),
        "advantage_R_x_over_R_p": r_x / r_pair,
        "bits_per_particle": 2 * math.log2(2 * N),
    }


# -------------------------------------------------------------------- spin


@dataclass(frozen=True)
class SpinExtension:
    dimension: int
    capacity_bits: float
    state: np.ndarray
    reduced_alice_error: float
    factorizes: bool


def spin_pair_state(S2: int) -> np.ndarray:
    """(1/sqrt(2S+1)) sum_m |m>|-m> with spin index order m = S..-S; ``S2`` = 2S."""
    d = S2 + 1
    v = np.zeros(d * d)
    for i in range(d):
        v[i * d + (d - 1 - i)] = 1
    return v / math.sqrt(d)


def spin_extended_dim(N: int, S: float, H=None) -> SpinExtension:
    S2 = round(2 * S)
    if S2 < 0 or abs(2 * S - S2) > 1e-12:
        raise ValueError(f"2S must be a non-negative integer, got S={S}")
    ds = S2 + 1
    dx = 2 * N
    pos_pair = bell_state(N, H, INITIAL_LABEL)
    spin_pair = spin_pair_state(S2)
    # index order (alice x, alice s, bob x, bob s)
    t = np.einsum("ab,cd->acbd", pos_pair.reshape(dx, dx), spin_pair.reshape(ds, ds))
    state = t.reshape(-1)
    dim = dx * ds
    mat = state.reshape(dim, dim)
    rho_a = mat @ mat.conj().T
    err = float(np.max(np.abs(rho_a - np.eye(dim) / dim)))
    # position|spin split of the pair state must have Schmidt rank 1
    split = np.einsum("acbd->abcd", t).reshape(dx * dx, ds * ds)
    sv = np.linalg.svd(split, compute_uv=False)
    return SpinExtension(
        dimension=dim,
        capacity_bits=2 * math.log2(dim),
        state=state,
        reduced_alice_error=err,
        factorizes=bool(sv[1:].max(initial=0.0) < 1e-12),
    )


# ------------------------------------------------------------------ tables


def format_ket_terms(v: np.ndarray, N: int, tol: float = 1e-12) -> str:
    """Real pair state as space-separated 'coef|a,b>' terms in basis order."""
    terms = []
    for idx in np.flatnonzero(np.abs(v) > tol):
        a, b = pair_channels(int(idx), N)
        terms.append(f"{float(np.real(v[idx])):+.17g}|{a},{b}>")
    return " ".join(terms)


_KET_TERM = re.compile(r"([+-][0-9.eE+-]+)\|(-?\d+),(-?\d+)>")


def parse_ket_terms(text: str, N: int) -> np.ndarray:
    v = np.zeros(4 * N * N)
    for coef, a, b in _KET_TERM.findall(text):
        v[pair_index(int(a), int(b), N)] += float(coef)
    return v


def preparation_table(N: int, H=None) -> list[dict]:
    h = table_bell_matrix(N) if H is None else _bell_matrix(N, H)
    rows = []
    for lab in all_labels(N):
        rows.append({"state": lab.flat(N), "k": lab.k, "sign": "+" if lab.sign > 0 else "-",
                     "j": lab.j, "word": encoder_word(N, h, lab)})
    return rows


def measurement_table(N: int, H=None, H_N=None) -> list[dict]:
    h = table_bell_matrix(N) if H is None else _bell_matrix(N, H)
    pcs = pcs_gate(N)
    had = hadamard_layer(N)
    u = u_gate(N, H_N)
    rows = []
    for lab in all_labels(N):
        v1 = pcs @ bell_state(N, h, lab)
        v2 = had @ v1
        v3 = u @ v2
        idx = int(np.argmax(np.abs(v3)))
        a, b = pair_channels(idx, N)
        rows.append({"state": lab.flat(N), "after_pcs": format_ket_terms(v1, N),
                     "after_hadamards": format_ket_terms(v2, N),
                     "outcome_alice": a, "outcome_bob": b, "renamed": rename_string(a, b, N)})
    return rows
