"""Small dense complex linear algebra plus Hadamard matrix handling.

Hadamard matrices are kept as raw integer arrays of +1/-1; the 1/sqrt(order)
normalization is applied by callers that need the unitary form.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import FormatError, ParseError, SizeError, ValidationError

MAX_SYLVESTER_EXPONENT = 12


@dataclass(frozen=True)
class HadamardReport:
    order: int
    is_hadamard: bool
    is_symmetric: bool
    is_normalized: bool

    @property
    def accepted(self) -> bool:
        return self.is_hadamard and self.is_symmetric and self.is_normalized


def sylvester_hadamard(exponent: int) -> np.ndarray:
    """Order 2**exponent Sylvester matrix as int64 +1/-1 entries."""
    if not isinstance(exponent, (int, np.integer)) or exponent < 0 or exponent > MAX_SYLVESTER_EXPONENT:
        raise SizeError(f"Sylvester exponent must be in 0..{MAX_SYLVESTER_EXPONENT}, got {exponent!r}")
    return scipy.linalg.hadamard(2 ** int(exponent), dtype=np.int64)


def sylvester_of_order(order: int) -> np.ndarray:
    if order < 1 or order & (order - 1):
        raise SizeError(f"no built-in Hadamard of order {order}; supply one from a file")
    return sylvester_hadamard(order.bit_length() - 1)


def validate_hadamard(candidate) -> HadamardReport:
    h = np.asarray(candidate)
    if h.ndim != 2 or h.shape[0] != h.shape[1] or h.shape[0] == 0:
        raise FormatError(f"Hadamard candidate must be a non-empty square matrix, got shape {h.shape}")
    if not np.all((h == 1) | (h == -1)):
        raise FormatError("Hadamard candidate entries must all be +1 or -1")
    h = h.astype(np.int64)
    n = h.shape[0]
    return HadamardReport(
        order=n,
        is_hadamard=bool(np.array_equal(h @ h.T, n * np.eye(n, dtype=np.int64))),
        is_symmetric=bool(np.array_equal(h, h.T)),
        is_normalized=bool(np.all(h[0] == 1) and np.all(h[:, 0] == 1)),
    )


def require_hadamard(h, order: int | None = None) -> np.ndarray:
    report = validate_hadamard(h)
    if not report.accepted:
        raise ValidationError(
            f"matrix rejected: is_hadamard={report.is_hadamard}, "
            f"is_symmetric={report.is_symmetric}, is_normalized={report.is_normalized}"
        )
    if order is not None and report.order != order:
        from .errors import OrderMismatchError

        raise OrderMismatchError(f"expected a Hadamard matrix of order {order}, got {report.order}")
    return np.asarray(h, dtype=np.int64)


def parse_hadamard(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines()]
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty Hadamard file")
    try:
        order = int(lines[0])
    except ValueError:
        raise ParseError(f"first line must be the order, got {lines[0]!r}") from None
    if order < 1:
        raise ParseError(f"order must be positive, got {order}")
    body = lines[1:]
    if len(body) != order:
        raise ParseError(f"expected {order} rows, found {len(body)}")
    rows = []
    for i, line in enumerate(body, start=2):
        cells = line.split()
        if len(cells) != order:
            raise ParseError(f"line {i}: expected {order} entries, found {len(cells)}")
        row = []
        for c in cells:
            if c == "+1":
                row.append(1)
            elif c == "-1":
                row.append(-1)
            else:
                raise ParseError(f"line {i}: entry {c!r} is not '+1' or '-1'")
        rows.append(row)
    return np.array(rows, dtype=np.int64)


def format_hadamard(h) -> str:
    h = np.asarray(h)
    out = [str(h.shape[0])]
    for row in h:
        out.append(" ".join("+1" if v > 0 else "-1" for v in row))
    return "\n".join(out) + "\n"


def load_hadamard(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    return require_hadamard(parse_hadamard(text))


def save_hadamard(h, path) -> None:
    require_hadamard(h)
    atomic_write_text(path, format_hadamard(h))


def bundled_hadamard(name: str) -> np.ndarray:
    """Load one of the matrices shipped in ``eprlab/data``."""
    text = resources.files("eprlab").joinpath("data", f"{name}.txt").read_text(encoding="utf-8")
    return require_hadamard(parse_hadamard(text))


def atomic_write_text(path, text: str) -> None:
    """Write through a temp file in the target directory, then rename."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# complex helpers


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.asarray(m)).T


def unitarity_error(m: np.ndarray) -> float:
    m = np.asarray(m)
    return float(np.max(np.abs(m @ dagger(m) - np.eye(m.shape[0]))))


def is_unitary(m: np.ndarray, tol: float = 1e-10) -> bool:
    return unitarity_error(m) < tol


def is_unit_vector(v: np.ndarray, tol: float = 1e-12) -> bool:
    return abs(float(np.vdot(v, v).real) - 1.0) < tol


def partial_trace(rho: np.ndarray, dims: tuple[int, int], keep: int) -> np.ndarray:
    """Reduced density matrix of a bipartite operator; ``keep`` is 0 or 1."""
    a, b = dims
    r = np.asarray(rho).reshape(a, b, a, b)
    if keep == 0:
        return np.einsum("ijkj->ik", r)
    if keep == 1:
        return np.einsum("ijil->jl", r)
    raise ValueError("keep must be 0 or 1")


def fmt_float(x: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(x), ".17g")


def complex_rows_csv(values) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["re", "im"])
    for z in np.ravel(values):
        w.writerow([fmt_float(z.real), fmt_float(z.imag)])
    return buf.getvalue()


def complex_matrix_csv(m: np.ndarray) -> str:
    """Row-major matrix with one 're,im' cell per entry."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(m, dtype=complex):
        w.writerow([f"{fmt_float(z.real)},{fmt_float(z.imag)}" for z in row])
    return buf.getvalue()


def parse_complex_matrix_csv(text: str) -> np.ndarray:
    rows = []
    for row in csv.reader(io.StringIO(text)):
        if not row:
            continue
        cells = []
        for cell in row:
            re_s, im_s = cell.split(",")
            cells.append(complex(float(re_s), float(im_s)))
        rows.append(cells)
    return np.array(rows, dtype=complex)


def parse_complex_vector_csv(text: str) -> np.ndarray:
    """Amplitudes from 're,im' rows; an optional 're,im' header is skipped."""
    out = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and [c.strip().lower() for c in row] == ["re", "im"]:
            continue
        if len(row) != 2:
            raise ParseError(f"line {lineno}: expected 're,im', got {row!r}")
        try:
            out.append(complex(float(row[0]), float(row[1])))
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric amplitude {row!r}") from None
    if not out:
        raise ParseError("no amplitudes found")
    return np.array(out, dtype=complex)
