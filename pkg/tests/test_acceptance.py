"""Acceptance criteria 1-11, one check per criterion.

Under pytest each check is a test and the outcome is collected into a
PASS/FAIL block in the terminal summary.  Run as a script to get the same
lines on stdout:  python3 tests/test_acceptance.py
"""

import csv
import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import ACCEPTANCE, FIXTURES, load_golden  # noqa: E402
from eprlab import bohmsim as bs  # noqa: E402
from eprlab import densecode as dc  # noqa: E402
from eprlab import teleport as tp  # noqa: E402
from eprlab.cli import run  # noqa: E402
from eprlab.numkit import load_hadamard, partial_trace, unitarity_error  # noqa: E402


def _terms_vector(terms, N):
    v = np.zeros(4 * N * N)
    for coef, a, b in terms:
        v[dc.pair_index(a, b, N)] += coef
    return v / np.linalg.norm(v)


def _same_up_to_sign(u, v, tol=1e-12):
    u = u / np.linalg.norm(u)
    v = v / np.linalg.norm(v)
    return min(np.max(np.abs(u - v)), np.max(np.abs(u + v))) < tol


def _read_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- criteria


def check_golden_tables():
    start = time.perf_counter()
    problems = []
    rows_checked = 0
    with tempfile.TemporaryDirectory() as tmp:
        code = run(["dense", "tables", "--out-dir", tmp])
        if code != 0:
            return False, f"dense tables exited {code}"
        for N in (1, 2, 4):
            gold = load_golden(N)
            prep = {int(r["state"]): r for r in _read_csv(Path(tmp) / f"preparation_n{N}.csv")}
            meas = {int(r["state"]): r for r in _read_csv(Path(tmp) / f"measurement_n{N}.csv")}
            if len(prep) != 4 * N * N or len(meas) != 4 * N * N:
                problems.append(f"N={N}: wrong row count")
            h = dc.table_bell_matrix(N)
            for rec in gold.get("bell_states", []):
                rows_checked += 1
                ours = dc.bell_state(N, h, dc.BellLabel.from_flat(rec["state"], N))
                if not _same_up_to_sign(ours, _terms_vector(rec["terms"], N)):
                    problems.append(f"N={N} Bell state {rec['state']}")
            for rec in gold["preparation"]:
                rows_checked += 1
                ours = dc.parse_word(prep[rec["state"]]["word"], N)
                if np.max(np.abs(ours - dc.parse_word(rec["word"], N))) > 1e-12:
                    problems.append(f"N={N} preparation {rec['state']}")
            for rec in gold["measurement"]:
                rows_checked += 1
                row = meas[rec["state"]]
                if [int(row["outcome_alice"]), int(row["outcome_bob"])] != rec["outcome"]:
                    problems.append(f"N={N} outcome {rec['state']}")
                if row["renamed"] != rec["renamed"]:
                    problems.append(f"N={N} renamed {rec['state']}")
                for key in ("after_pcs", "after_hadamards"):
                    if key in rec and not _same_up_to_sign(dc.parse_ket_terms(row[key], N),
                                                           _terms_vector(rec[key], N)):
                        problems.append(f"N={N} {key} {rec['state']}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 5
    return ok, f"{rows_checked} rows, mismatches={problems[:5]}, {elapsed:.2f}s"


def check_bell_properties():
    start = time.perf_counter()
    worst_gram = worst_trace = worst_unitary = 0.0
    for N in (1, 2, 4, 8):
        d = 2 * N
        basis = dc.bell_basis(N)
        worst_gram = max(worst_gram, np.max(np.abs(basis.conj().T @ basis - np.eye(d * d))))
        for col in basis.T:
            rho = np.outer(col, col.conj())
            for keep in (0, 1):
                worst_trace = max(worst_trace, np.max(np.abs(partial_trace(rho, (d, d), keep) - np.eye(d) / d)))
        for lab in dc.all_labels(N):
            worst_unitary = max(worst_unitary, unitarity_error(dc.encode_operator(N, None, lab)))
    elapsed = time.perf_counter() - start
    ok = worst_gram < 1e-12 and worst_trace < 1e-12 and worst_unitary < 1e-10 and elapsed < 30
    return ok, f"gram {worst_gram:.1e}, partial trace {worst_trace:.1e}, unitarity {worst_unitary:.1e}, {elapsed:.2f}s"


def _composite(N, terms):
    return sum(np.kron(dc.parse_word(a, N), dc.parse_word(b, N)) for a, b in terms) / math.sqrt(N)


def _pnp(*ix):
    return "".join(f"P{i}N{i}P{i}N{i}" for i in ix)


def _pp(*ix):
    return "".join(f"P{i}" for i in ix)


ALL_N8 = "".join(f"N{i}" for i in range(1, 9))

EXPLICIT_UNITARIES = {
    2: [("I", "P1N1N2P1"), ("L+", "L+")],
    4: [("I", "P1P4N1N2N3N4P1P4"), ("L+", _pnp(4) + "L+"),
        ("L+^2", "P1P3N1N2N3N4P1P3L+^2"), ("L+^3", _pnp(3) + "L+^3")],
    8: [("I", _pp(1, 3, 6, 8) + ALL_N8 + _pp(1, 3, 6, 8)), ("L+", _pnp(5, 6, 8) + "L+"),
        ("L+^2", _pp(1, 3, 6, 7) + ALL_N8 + _pp(1, 3, 6, 7) + "L+^2"), ("L+^3", _pnp(3, 6, 7) + "L+^3"),
        ("L+^4", _pp(1, 4, 5, 8) + ALL_N8 + _pp(1, 4, 5, 8) + "L+^4"), ("L+^5", _pnp(3, 4, 8) + "L+^5"),
        ("L+^6", _pp(1, 4, 5, 7) + ALL_N8 + _pp(1, 4, 5, 7) + "L+^6"), ("L+^7", _pnp(4, 5, 7) + "L+^7")],
}


def check_explicit_unitaries():
    hn = {2: None, 4: None, 8: load_hadamard(FIXTURES / "hadamard_order8_unitary.txt")}
    devs = {}
    for N, terms in EXPLICIT_UNITARIES.items():
        devs[N] = float(np.max(np.abs(_composite(N, terms) - dc.u_gate(N, hn[N]))))
    return all(v < 1e-12 for v in devs.values()), f"max deviation {devs}"


def check_dense_capacity():
    failures = 0
    total = 0
    for N in (1, 2, 4):
        for value in range(4 * N * N):
            msg = dc.label_to_message(dc.BellLabel.from_flat(value + 1, N), N)
            rt = dc.dense_roundtrip(N, None, msg)
            total += 1
            failures += rt.message_out != msg
        bits = dc.info_rates(N, dc.GateTimes.equal(N))["bits_per_particle"]
        if bits != 2 * math.log2(2 * N) or 2 ** bits != 4 * N * N:
            failures += 1
    return failures == 0, f"{total} messages, {failures} failures"


def check_teleport_exactness():
    worst = 1.0
    worst_prob = 0.0
    uniform_ok = True
    for N in (1, 2, 4):
        rng = np.random.default_rng(1000 + N)
        for i in range(20):
            phi = tp.random_state(2 * N, rng)
            for lab in dc.all_labels(N):
                worst = min(worst, tp.simulate_teleport(phi, N, forced=lab).fidelity)
            probs = tp.outcome_probabilities(phi, N)
            worst_prob = max(worst_prob, float(np.max(np.abs(probs - 1 / (4 * N * N)))))
            if i == 0:
                stat, bound = tp.uniformity_check(tp.sample_outcomes(phi, N, count=100_000, seed=N))
                uniform_ok &= stat <= bound
    rng = np.random.default_rng(77)
    labels = dc.all_labels(2)
    for i in range(20):
        phi = tp.random_state(16, rng)
        for lx in labels:
            for lz in labels:
                worst = min(worst, tp.teleport_3d(phi, 2, 2, forced=(lx, lz)).fidelity)
        probs = tp.outcome_probabilities_3d(phi, 2, 2)
        worst_prob = max(worst_prob, float(np.max(np.abs(probs - 1 / 256))))
        if i == 0:
            draws = np.random.default_rng(5).choice(256, size=100_000, p=probs.reshape(-1) / probs.sum())
            stat, bound = tp.uniformity_check(np.bincount(draws, minlength=256))
            uniform_ok &= stat <= bound
    ok = worst >= 1 - 1e-10 and worst_prob < 1e-12 and uniform_ok
    return ok, f"min fidelity {worst:.15f}, max |p - uniform| {worst_prob:.1e}, empirical uniform {uniform_ok}"


def check_rates():
    N = 4
    times = dc.GateTimes(t_c=1.5, t_h=0.5, t_p=3.0, t_u=7.0)
    r = dc.info_rates(N, times)
    # frozen oracle values for this gate-time set
    expected = {"R_x": 2 * 3 / 10.5, "R_p": 8 / (16 * 2.0), "R_m": 4 / (3 * (3 * 1.5 + 0.5))}
    ok = all(math.isclose(r[k], v, rel_tol=1e-14) for k, v in expected.items())
    for n in (1, 2, 4, 16, 1024):
        eq = dc.info_rates(n, dc.GateTimes.equal(n, 2.0))
        ok &= math.isclose(eq["r_p"], 0.5, rel_tol=1e-14) and math.isclose(eq["r_m"], 0.5, rel_tol=1e-14)
    big = dc.info_rates(1024, dc.GateTimes.equal(1024))
    rel = abs(big["advantage_R_x_over_R_p"] - 2 * math.log2(2048)) / (2 * math.log2(2048))
    ok &= rel < 0.01
    return ok, f"advantage at N=1024 {big['advantage_R_x_over_R_p']:.4f} vs 22 ({100 * rel:.2f}% off)"


def check_com_closed_form():
    start = time.perf_counter()
    config = bs.ExperimentConfig()
    p = config.params
    offsets = np.linspace(-3.0, 3.0, 10)
    trajs = bs.integrate_pairs(config, offsets + 0.7, offsets - 0.7, 10 * p.time_unit, samples=1001)
    worst = 0.0
    for y0, tr in zip(offsets, trajs):
        if tr.truncated:
            return False, "trajectory truncated"
        for s in tr.samples:
            ref = bs.com_closed_form(y0, p, s.t)
            worst = max(worst, abs(0.5 * (s.y1 + s.y2) - ref) / abs(ref))
    elapsed = time.perf_counter() - start
    return worst < 1e-6 and elapsed < 10, f"max relative error {worst:.1e}, {elapsed:.2f}s"


def check_symmetric_detection():
    config = bs.ExperimentConfig(params=bs.PhysParams(slit_y=1.0))
    p = config.params
    t = p.screen_time
    y1_0, y2_0 = bs._sample_arrays(config, 1000, 8)
    y1, y2, truncated = bs.integrate_ensemble(config, y1_0, y2_0, t)
    ok_pairs = ~truncated
    mirror = float(np.max(np.abs(y1[ok_pairs] + y2[ok_pairs])))
    removed = int(np.sum(np.sign(y1[ok_pairs]) == np.sign(y2[ok_pairs])))
    norm = bs.normalize_config(config, t)
    p12 = bs.joint_detection_probability(config, 0.5, 1.5, bs.DetectionSpec(1.0), t, norm)
    ok = ok_pairs.sum() > 0 and mirror <= 1e-5 * p.sigma0 and removed == 0 and p12 > 0
    return ok, (f"{int(ok_pairs.sum())} pairs, max |y1+y2| {mirror:.1e}, removed {removed}, "
                f"same-side P12 {p12:.3e}")


def check_ensemble_equivalence():
    start = time.perf_counter()
    config = bs.ExperimentConfig(com_spread=1 / math.sqrt(2))
    spec = bs.DetectionSpec(1.0, 40, (-16.0, 16.0))
    pat = bs.ensemble_pattern(config, 10_000, 11, config.params.screen_time, spec)
    chi = pat.report["chi_square"]
    elapsed = time.perf_counter() - start
    ok = chi["bins"] >= 20 and chi["p_value"] > 0.01 and pat.report["truncated"] == 0 and elapsed < 300
    return ok, f"chi2 {chi['statistic']:.1f} on {chi['dof']} dof, p={chi['p_value']:.3f}, {elapsed:.1f}s"


def check_eigen_residual():
    rng = np.random.default_rng(2024)
    worst = 0.0
    points = 0
    for exchange in ("Bosonic", "Fermionic"):
        config = bs.ExperimentConfig(exchange=exchange, params=bs.PhysParams(slit_y=1.5, k_y=0.8))
        while points < (100 if exchange == "Bosonic" else 200):
            y1, y2 = rng.normal(0, 3, 2)
            t = rng.uniform(0, 10)
            try:
                r = bs.momentum_eigen_check(config, bs.PairCoordinates(y1, y2, t))
            except bs.NodeError:
                continue
            worst = max(worst, r)
            points += 1
    return worst < 1e-5, f"{points} points, max residual {worst:.1e}"


def check_coincidence():
    kY = 40.0
    s1 = np.linspace(-0.4, 0.4, 40001)
    c = bs.coincidence_pattern(np.arcsin(s1), np.zeros_like(s1), kY, 1.0, 0.0, 0.0)
    period = bs.fringe_period(s1, c)
    rel = abs(period - math.pi / kY) / (math.pi / kY)
    g_ok = all(bs.slit_envelope(th, th, 3.7) == 1.0 for th in (-0.3, 0.0, 0.2))
    return rel < 0.005 and g_ok, f"period {period:.6f} vs {math.pi / kY:.6f} ({100 * rel:.3f}% off), g=1 {g_ok}"


CRITERIA = {
    1: check_golden_tables,
    2: check_bell_properties,
    3: check_explicit_unitaries,
    4: check_dense_capacity,
    5: check_teleport_exactness,
    6: check_rates,
    7: check_com_closed_form,
    8: check_symmetric_detection,
    9: check_ensemble_equivalence,
    10: check_eigen_residual,
    11: check_coincidence,
}


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number):
    ok, detail = CRITERIA[number]()
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]()
        failed += not ok
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    sys.exit(1 if failed else 0)
