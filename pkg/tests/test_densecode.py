import math

import numpy as np
import pytest
from conftest import FIXTURES, load_golden
from hypothesis import given, settings
from hypothesis import strategies as st

from eprlab import densecode as dc
from eprlab.errors import AmbiguityError, CapabilityError, ParseError
from eprlab.numkit import load_hadamard, sylvester_hadamard


def labels_for(N):
    return st.builds(dc.BellLabel, st.integers(1, N), st.sampled_from([1, -1]), st.integers(1, 2 * N))


# ---------------------------------------------------------------- channels


def test_channel_positions():
    assert [dc.channel_position(c, 3) for c in (1, 2, 3, -1, -2, -3)] == [0, 1, 2, 3, 4, 5]
    assert dc.pair_index(-1, 2, 2) == 2 * 4 + 1


@given(st.integers(1, 6), st.data())
def test_pair_index_round_trip(N, data):
    idx = data.draw(st.integers(0, 4 * N * N - 1))
    assert dc.pair_index(*dc.pair_channels(idx, N), N) == idx


@given(st.integers(1, 8), st.data())
def test_flat_code_round_trip(N, data):
    lab = data.draw(labels_for(N))
    assert dc.BellLabel.from_flat(lab.flat(N), N) == lab


def test_flat_code_order():
    assert [str(lab) for lab in dc.all_labels(1)] == ["(1-,1)", "(1-,2)", "(1+,1)", "(1+,2)"]
    assert dc.INITIAL_LABEL.flat(4) == 1


# ------------------------------------------------------------------ states


def test_initial_state_n1():
    v = dc.bell_state(1, None, dc.INITIAL_LABEL)
    expected = np.zeros(4)
    expected[dc.pair_index(1, -1, 1)] = expected[dc.pair_index(-1, 1, 1)] = 1 / math.sqrt(2)
    assert np.allclose(v, expected)


@pytest.mark.parametrize("N", [1, 2, 4, 8])
def test_bell_basis_orthonormal(N):
    b = dc.bell_basis(N)
    assert np.max(np.abs(b.T @ b - np.eye(4 * N * N))) < 1e-12


@pytest.mark.parametrize("N", [2, 4])
def test_golden_bell_states(N):
    h = dc.table_bell_matrix(N)
    for rec in load_golden(N)["bell_states"]:
        v = np.zeros(4 * N * N)
        for coef, a, b in rec["terms"]:
            v[dc.pair_index(a, b, N)] = coef
        ours = dc.bell_state(N, h, dc.BellLabel.from_flat(rec["state"], N))
        v = v / np.linalg.norm(v)
        assert min(np.abs(ours - v).max(), np.abs(ours + v).max()) < 1e-12


# ------------------------------------------------------------------- gates


def test_parse_word_order_rightmost_first():
    N = 2
    m = dc.parse_word("N1P1", N)
    assert np.allclose(m, dc.basic_gate("N", 1, N) @ dc.basic_gate("P", 1, N))
    assert np.allclose(dc.parse_word("L+^2", N), np.eye(4))
    assert np.allclose(dc.parse_word("I", 3), np.eye(6))


def test_parse_word_rejects_garbage():
    with pytest.raises(ParseError):
        dc.parse_word("Q1", 2)


@pytest.mark.parametrize("N", [1, 2, 4])
def test_composed_encoder_equals_encoder(N):
    h = dc.table_bell_matrix(N)
    for lab in dc.all_labels(N):
        m, _ = dc.compose_encoder(N, h, lab)
        assert np.max(np.abs(m - dc.encode_operator(N, h, lab))) < 1e-12


@pytest.mark.parametrize("N", [2, 4])
def test_other_fixed_row_gives_row_product_member(N):
    # Sylvester rows are closed under entrywise products
    h = dc.table_bell_matrix(N)
    rows = {tuple(r): j for j, r in enumerate(h.astype(int).tolist(), start=1)}
    for a in range(2, 2 * N + 1):
        for lab in dc.all_labels(N)[:: N]:
            member = rows[tuple((h[a - 1] * h[lab.j - 1]).astype(int).tolist())]
            m, _ = dc.compose_encoder(N, h, lab, a)
            target = dc.encode_operator(N, h, dc.BellLabel(lab.k, lab.sign, member))
            assert min(np.max(np.abs(m - target)), np.max(np.abs(m + target))) < 1e-12


@pytest.mark.parametrize("N", [1, 2, 4, 8])
def test_encoding_reaches_every_bell_state(N):
    init = dc.bell_state(N, None, dc.INITIAL_LABEL)
    for lab in dc.all_labels(N):
        sent = np.kron(dc.encode_operator(N, None, lab), np.eye(2 * N)) @ init
        assert np.max(np.abs(sent - dc.bell_state(N, None, lab))) < 1e-12


@pytest.mark.parametrize("N", [1, 2, 4])
def test_golden_preparation_words(N):
    h = dc.table_bell_matrix(N)
    table = {r["state"]: r["word"] for r in dc.preparation_table(N)}
    for rec in load_golden(N)["preparation"]:
        ours = dc.parse_word(table[rec["state"]], N)
        assert np.max(np.abs(ours - dc.parse_word(rec["word"], N))) < 1e-12
        init = dc.bell_state(N, h, dc.INITIAL_LABEL)
        target = dc.bell_state(N, h, dc.BellLabel.from_flat(rec["state"], N))
        assert np.allclose(np.kron(dc.parse_word(rec["word"], N), np.eye(2 * N)) @ init, target)


def test_u_gate_n1_is_identity():
    assert np.array_equal(dc.u_gate(1), np.eye(4))


@pytest.mark.parametrize("N", [2, 4, 8])
def test_u_gate_is_orthogonal_involution(N):
    u = dc.u_gate(N)
    assert np.max(np.abs(u @ u.T - np.eye(len(u)))) < 1e-12
    assert np.max(np.abs(u @ u - np.eye(len(u)))) < 1e-12


def _pnp(*ix):
    return "".join(f"P{i}N{i}P{i}N{i}" for i in ix)


def _pp(*ix):
    return "".join(f"P{i}" for i in ix)


def test_order12_composite_matches_sector_rule():
    # the N = 12 gate composite, read off term by term; its effective
    # Hadamard matrix is stored alongside the tests
    N = 12
    every = "".join(f"N{i}" for i in range(1, 13))
    terms = [
        ("I", _pp(1, 6, 7, 8, 11, 12) + every + _pp(1, 6, 7, 8, 11, 12)),
        ("L+", _pnp(6, 7, 9, 11, 12) + "L+"),
        ("L+^2", _pp(1, 3, 5, 9, 10) + every + _pp(1, 3, 5, 9, 10) + "L+^2"),
        ("L+^3", _pnp(6, 7, 8, 10, 12) + "L+^3"),
        ("L+^4", _pp(1, 3, 4, 5, 8, 9, 10) + every + _pp(1, 3, 4, 5, 8, 9, 10) + "L+^4"),
        ("L+^5", _pnp(3, 4, 5, 8, 9) + "L+^5"),
        ("L+^6", _pp(1, 4, 6, 7, 10, 12) + every + _pp(1, 4, 6, 7, 10, 12) + "L+^6"),
        ("L+^7", _pnp(3, 4, 10, 11, 12) + "L+^7"),
        ("L+^8", _pp(1, 4, 5, 6, 9, 11, 12) + every + _pp(1, 4, 5, 6, 9, 11, 12) + "L+^8"),
        ("L+^9", _pnp(3, 4, 5, 7, 9) + "L+^9"),
        ("L+^10", _pp(1, 3, 7, 8, 11) + every + _pp(1, 3, 7, 8, 11) + "L+^10"),
        ("L+^11", _pnp(5, 6, 8, 10, 11) + "L+^11"),
    ]
    composite = sum(np.kron(dc.parse_word(a, N), dc.parse_word(b, N)) for a, b in terms) / math.sqrt(N)
    h12 = load_hadamard(FIXTURES / "hadamard_order12.txt")
    assert np.max(np.abs(composite - dc.u_gate(N, h12))) < 1e-12


def test_u_gate_without_builtin_order():
    with pytest.raises(CapabilityError):
        dc.u_gate(3)


# --------------------------------------------------------------- measuring


@pytest.mark.parametrize("N", [1, 2, 4])
def test_golden_measurement(N):
    table = {r["state"]: r for r in dc.measurement_table(N)}
    for rec in load_golden(N)["measurement"]:
        row = table[rec["state"]]
        assert [row["outcome_alice"], row["outcome_bob"]] == rec["outcome"]
        assert row["renamed"] == rec["renamed"]
        for key in ("after_pcs", "after_hadamards"):
            if key in rec:
                v = np.zeros(4 * N * N)
                for coef, a, b in rec[key]:
                    v[dc.pair_index(a, b, N)] = coef
                v /= np.linalg.norm(v)
                ours = dc.parse_ket_terms(row[key], N)
                assert min(np.abs(ours - v).max(), np.abs(ours + v).max()) < 1e-12


def test_rename_examples():
    assert dc.rename_string(1, -1, 1) == "01"
    assert dc.rename_string(1, -1, 2) == "0⊔1⊔"
    assert dc.rename_string(1, -2, 2) == "0⊔⊔1"


@pytest.mark.parametrize("N", [1, 2, 4])
def test_decoder_is_bijective(N):
    dec = dc.build_decoder(N)
    assert len(dec.by_outcome) == 4 * N * N


def test_order16_chain_cannot_decode():
    with pytest.raises(CapabilityError):
        dc.build_decoder(8)


def test_bsm_exact_and_noisy():
    N = 2
    lab = dc.BellLabel(2, 1, 3)
    state = dc.bell_state(N, None, lab)
    res = dc.bsm_dense(N, None, state)
    assert res.label == lab and res.exact
    rng = np.random.default_rng(3)
    noise = 1e-3 * (rng.normal(size=16) + 1j * rng.normal(size=16))
    res = dc.bsm_dense(N, None, state + noise)
    assert res.label == lab and not res.exact


def test_bsm_ambiguous_superposition():
    N = 2
    a = dc.bell_state(N, None, dc.BellLabel(1, 1, 1))
    b = dc.bell_state(N, None, dc.BellLabel(2, -1, 2))
    with pytest.raises(AmbiguityError):
        dc.bsm_dense(N, None, a + b)


def test_bsm_large_noise_is_ambiguous():
    N = 2
    state = dc.bell_state(N, None, dc.INITIAL_LABEL)
    rng = np.random.default_rng(3)
    noise = 0.5 * (rng.normal(size=16) + 1j * rng.normal(size=16))
    with pytest.raises(AmbiguityError):
        dc.bsm_dense(N, None, state + noise)


# ---------------------------------------------------------------- messages


@pytest.mark.parametrize("N", [1, 2, 4])
def test_roundtrip_all_messages(N):
    for value in range(4 * N * N):
        msg = format(value, f"0{dc.message_bits(N)}b")
        rt = dc.dense_roundtrip(N, None, msg)
        assert rt.message_out == msg


def test_roundtrip_report_shape():
    d = dc.dense_roundtrip(2, None, "0110").as_dict()
    assert set(d) == {"N", "label", "outcome", "renamed", "message_in", "message_out"}
    assert set(d["label"]) == {"k", "sign", "j"}


def test_message_bits():
    assert [dc.message_bits(n) for n in (1, 2, 4, 3)] == [2, 4, 6, None]
    with pytest.raises(ValueError):
        dc.message_to_label("101", 2)


# ------------------------------------------------------------------- rates


def test_rates_equal_times():
    r = dc.info_rates(4, dc.GateTimes.equal(4, 0.25))
    assert math.isclose(r["r_p"], 4.0) and math.isclose(r["r_m"], 4.0)
    assert r["bits_per_particle"] == 6


def test_rate_baseline_single_qubit():
    assert dc.info_rates(1, dc.GateTimes.equal(1))["R_m"] is None


def test_rate_maximal_baseline_closed_form():
    # equals 1/((q-1) t) at equal times; 1/(q t) only as q grows
    for q in (2, 5, 50):
        r = dc.info_rates(q, dc.GateTimes.equal(q, 1.0))
        assert math.isclose(r["R_m"], 1 / (q - 1), rel_tol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 64), st.floats(0.01, 10), st.floats(0.01, 10))
def test_pair_baseline_independent_of_count(N, tc, th):
    r = dc.info_rates(N, dc.GateTimes(tc, th, 1.0, 1.0))
    assert math.isclose(r["r_p"], 2 / (tc + th), rel_tol=1e-12)


def test_gate_times_must_be_positive():
    with pytest.raises(ValueError):
        dc.GateTimes(0, 1, 1, 1)


# -------------------------------------------------------------------- spin


def test_spin_extension_capacity():
    ext = dc.spin_extended_dim(2, 0.5)
    assert ext.dimension == 8
    assert ext.capacity_bits == 6
    assert ext.factorizes
    assert ext.reduced_alice_error < 1e-12


def test_spin_zero_is_plain_channel():
    assert dc.spin_extended_dim(2, 0).capacity_bits == 2 * math.log2(4)


# ------------------------------------------------------------------ tables


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.data())
def test_ket_terms_round_trip(N, data):
    lab = data.draw(labels_for(N))
    v = dc.bell_state(N, None, lab)
    assert np.array_equal(dc.parse_ket_terms(dc.format_ket_terms(v, N), N), v)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.data())
def test_every_label_decodes_to_itself(N, data):
    lab = data.draw(labels_for(N))
    res = dc.bsm_dense(N, None, dc.bell_state(N, None, lab))
    assert res.label == lab and res.exact


def test_sylvester_bell_matrix_matches_default():
    assert np.array_equal(dc.bell_basis(2, sylvester_hadamard(2)), dc.bell_basis(2))
