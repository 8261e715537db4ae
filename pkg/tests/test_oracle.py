import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rnnlink.config import OracleConfig, preset
from rnnlink.oracle import (DatasetError, LinkModel, WaveformDataset, channel_fir, generate,
                            pam_map, prbs_bits, read_dataset, simulate_link, write_dataset)


def test_prbs7_period_and_balance():
    bits = prbs_bits(7, 254)
    assert np.array_equal(bits[:127], bits[127:])
    assert all(not np.array_equal(bits[:127], np.roll(bits[:127], p)) for p in range(1, 127))
    assert int(bits[:127].sum()) == 64


def test_prbs7_satisfies_feedback_recurrence():
    # output of the x^7+x^6+1 shift register obeys b[k+7] = b[k] xor b[k+1]
    b = prbs_bits(7, 400, seed=0x35)
    assert np.array_equal(b[7:], b[:-7] ^ b[1:-6])
    b = prbs_bits(15, 5000, seed=1)
    assert np.array_equal(b[15:], b[:-15] ^ b[1:-14])


def test_prbs15_period():
    bits = prbs_bits(15, 2 * 32767 + 5)
    assert np.array_equal(bits[:32767], bits[32767:65534])
    assert int(bits[:32767].sum()) == 16384


def test_prbs_determinism_and_zero_seed():
    assert np.array_equal(prbs_bits(15, 300, 9), prbs_bits(15, 300, 9))
    with pytest.raises(ValueError):
        prbs_bits(7, 10, seed=0)


def test_pam_mapping():
    assert pam_map([0, 1, 1], "pam2").tolist() == [-1, 1, 1]
    assert pam_map([0, 0, 1, 0], "pam4").tolist() == [-1, 1]
    assert pam_map([0, 1], "pam4")[0] == pytest.approx(-1 / 3)
    assert pam_map([1, 1], "pam4")[0] == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        pam_map([0, 1, 1], "pam4")


def test_all_zero_symbols_give_zero_columns():
    ds = simulate_link(LinkModel.from_config(OracleConfig()), np.zeros(20))
    for c in ("v_tx0", "v_tx", "v_rx", "v_ro"):
        assert not np.any(getattr(ds, c))


def test_causality():
    cfg = OracleConfig()
    ds = simulate_link(LinkModel.from_config(cfg), np.array([1.0, -1.0, 1.0, 1.0, -1.0]))
    assert not np.any(ds.v_rx[:cfg.delay]) and not np.any(ds.v_ro[:cfg.delay])
    assert ds.v_rx[cfg.delay] != 0.0


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 200, elements=st.floats(-2, 2)),
       hnp.arrays(np.float64, 200, elements=st.floats(-2, 2)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_channel_superposition(x, y, a, b):
    m = LinkModel.from_config(OracleConfig())
    lhs = m.channel(a * x + b * y)
    rhs = a * m.channel(x) + b * m.channel(y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, 50, elements=st.floats(-5, 5)))
def test_tx_rx_odd(v):
    m = LinkModel.from_config(OracleConfig())
    assert np.array_equal(m.transmitter(-v), -m.transmitter(v))
    assert np.array_equal(m.receiver(-v), -m.receiver(v))


def test_symmetric_symbols_give_symmetric_waveforms():
    m = LinkModel.from_config(OracleConfig())
    sym = pam_map(prbs_bits(7, 60), "pam2")
    a, b = simulate_link(m, sym), simulate_link(m, -sym)
    for c in ("v_tx0", "v_tx", "v_rx", "v_ro"):
        assert np.allclose(getattr(a, c), -getattr(b, c), atol=1e-15)


def test_fir_structure():
    cfg = OracleConfig()
    h = channel_fir(cfg)
    assert len(h) == 6 * 16 and np.all(np.isfinite(h))
    assert h.sum() == pytest.approx(cfg.dc_gain)
    k = 4 * 16
    assert h[k] > h[k - 1] and h[k] > h[k + 1]


def test_regeneration_bit_identical():
    a, b = generate(OracleConfig()), generate(OracleConfig())
    assert all(np.array_equal(getattr(a, c), getattr(b, c)) for c in ("v_tx0", "v_tx", "v_rx", "v_ro"))


def test_default_sizes():
    assert len(generate(preset("pam2_narx").oracle)) == 11_200
    pam4 = preset("pam4_ernn").oracle
    assert len(generate(pam4)) == 10_000
    assert pam4.ui == pytest.approx(71.43e-12, rel=1e-4)


def test_csv_round_trip(tmp_path):
    ds = generate(dataclasses.replace(OracleConfig(), n_symbols=30))
    write_dataset(ds, tmp_path / "d.csv", "comment line")
    back = read_dataset(tmp_path / "d.csv")
    for c in ("v_tx0", "v_tx", "v_rx", "v_ro"):
        assert np.array_equal(getattr(back, c), getattr(ds, c))
    assert back.dt == pytest.approx(ds.dt, rel=1e-12)
    assert (tmp_path / "d.csv").read_text().splitlines()[1] == "t,v_tx0,v_tx,v_rx,v_ro"


def test_eleven_thousand_rows(tmp_path):
    ds = generate(OracleConfig()).slice(0, 11_000)
    write_dataset(ds, tmp_path / "d.csv")
    assert len(read_dataset(tmp_path / "d.csv")) == 11_000


@pytest.mark.parametrize("text,match", [
    ("t,v_tx0,v_tx,v_rx\n0,1,2,3\n", "v_ro"),
    ("t,v_tx0,v_tx,v_rx,v_ro\n0,1,2,3\n", "fields"),
    ("t,v_tx0,v_tx,v_rx,v_ro\n0,1,2,3,x\n", "malformed"),
    ("t,v_tx0,v_tx,v_rx,v_ro\n1,1,2,3,4\n0,1,2,3,4\n", "increasing"),
    ("", "empty"),
])
def test_csv_errors(tmp_path, text, match):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DatasetError, match=match):
        read_dataset(p)


def test_unequal_columns_rejected():
    with pytest.raises(DatasetError):
        WaveformDataset(1.0, np.zeros(3), np.zeros(3), np.zeros(2), np.zeros(3))
