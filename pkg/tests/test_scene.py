import json

import numpy as np
import pytest

from binacue.audiometry import Audiogram, design_half_gain
from binacue.bands import ThirdOctaveBand, estimate_itd
from binacue.cues import make_condition
from binacue.io import read_wav
from binacue.scene import (
    SceneError, SceneSpec, better_ear_snr, mix_scene, render_source, stem_level_db, write_scene,
)

FS = 44100


@pytest.fixture(scope="module")
def conditions(sphere):
    return {c: make_condition(sphere, c) for c in
            ("unprocessed", "noITD", "noILD", "transformITD_add", "transformITD_sub")}


@pytest.fixture
def signals():
    rng = np.random.default_rng(5)
    return rng.standard_normal(FS // 2), rng.standard_normal(FS // 2)


def test_impulse_gives_ir_pair(sphere):
    x = np.zeros(64)
    x[0] = 1.0
    stem = render_source(x, 30.0, sphere)
    assert stem.shape == (2, 64 + sphere.n_ir - 1)
    np.testing.assert_allclose(stem[:, :sphere.n_ir], sphere.pair(30.0), atol=1e-12)


def test_frontal_source_is_diotic(sphere, signals):
    stem = render_source(signals[0], 0.0, sphere)
    np.testing.assert_array_equal(stem[0], stem[1])


def test_lateral_noise_itd(sphere, signals, head):
    stem = render_source(signals[0], 90.0, sphere)
    itd = estimate_itd(stem[0], stem[1], ThirdOctaveBand.from_nominal(1000), FS)
    assert itd == pytest.approx(head.itd_seconds(90.0) * 1e6, abs=10.0)
    assert itd == pytest.approx(510.0, abs=10.0)


def test_render_is_linear(sphere, signals):
    a = render_source(3.5 * signals[0], -45.0, sphere)
    b = 3.5 * render_source(signals[0], -45.0, sphere)
    assert np.abs(a - b).max() <= 1e-12 * np.abs(b).max()


def test_render_errors(sphere):
    with pytest.raises(SceneError, match="empty"):
        render_source(np.array([]), 0.0, sphere)
    with pytest.raises(SceneError, match="mono"):
        render_source(np.zeros((2, 10)), 0.0, sphere)


def test_nearest_azimuth_warns(sphere, caplog):
    render_source(np.ones(8), 37.0, sphere)
    assert "nearest" in caplog.text


def test_spec_validation():
    with pytest.raises(SceneError, match="layout"):
        SceneSpec(layout="rear")
    with pytest.raises(SceneError, match="colocated"):
        SceneSpec(layout="central", condition="colocated")
    with pytest.raises(SceneError, match="unprocessed"):
        SceneSpec(layout="colocated", condition="noITD")
    with pytest.raises(SceneError, match="finite"):
        SceneSpec(snr_db=float("inf"))
    with pytest.raises(SceneError, match="unknown scene keys"):
        SceneSpec.from_mapping({"layout": "central", "volume": 3})
    assert SceneSpec(layout="lateral").interferer_azimuths == (-60.0, 0.0)


def test_snr_zero_equal_stem_levels(conditions, signals):
    spec = SceneSpec("central", "unprocessed", snr_db=0.0)
    sc = mix_scene(spec, conditions, signals[0], signals[0])
    n_ir = conditions["unprocessed"].n_ir
    levels = [stem_level_db(s, n_ir) for s in sc.stems.values()]
    np.testing.assert_allclose(levels, 65.0, atol=1e-9)
    assert 20 * np.log10(np.sqrt(np.mean(sc.stems["target"][:, n_ir:] ** 2))
                         / np.sqrt(np.mean(sc.stems["interferer_1"][:, n_ir:] ** 2))) \
        == pytest.approx(0.0, abs=1e-6)


def test_mix_is_sum_of_stems(conditions, signals):
    sc = mix_scene(SceneSpec("lateral", "transformITD_add", snr_db=-3), conditions, *signals)
    total = sc.stems["target"] + sc.stems["interferer_1"] + sc.stems["interferer_2"]
    np.testing.assert_array_equal(sc.mix, total)


def test_colocated_uses_unprocessed_front(conditions, signals, sphere):
    spec = SceneSpec("colocated", "colocated", snr_db=0.0)
    sc = mix_scene(spec, {"unprocessed": sphere}, *signals)
    assert sc.metadata["hrtf_set"] == "unprocessed"
    assert set(sc.metadata["azimuths_deg"].values()) == {0.0}
    assert np.abs(sc.mix[0] - sc.mix[1]).max() <= 1e-10
    be = better_ear_snr(sc)
    assert np.abs(be["snr_db"][0] - be["snr_db"][1]).max() <= 0.1


def test_missing_condition_dataset(signals, sphere):
    with pytest.raises(SceneError, match="noITD"):
        mix_scene(SceneSpec("central", "noITD"), {"unprocessed": sphere}, *signals)


@pytest.mark.parametrize("calibration", ["ear", "source"])
def test_snr_sweep_is_exact(conditions, signals, calibration):
    n_ir = conditions["noILD"].n_ir
    ratios = []
    for snr in (-10.0, -4.0, 0.0, 5.0, 12.0):
        sc = mix_scene(SceneSpec("lateral", "noILD", snr_db=snr, calibration=calibration),
                       conditions, *signals)
        ratios.append(stem_level_db(sc.stems["target"], n_ir)
                      - stem_level_db(sc.stems["interferer_1"], n_ir))
    steps = np.diff(ratios)
    np.testing.assert_allclose(steps, np.diff([-10.0, -4.0, 0.0, 5.0, 12.0]), atol=0.01)


def test_band_snr_rises_with_snr(conditions, signals):
    a = better_ear_snr(mix_scene(SceneSpec("central", "noITD", snr_db=0.0), conditions, *signals))
    b = better_ear_snr(mix_scene(SceneSpec("central", "noITD", snr_db=5.0), conditions, *signals))
    np.testing.assert_allclose(b["snr_db"] - a["snr_db"], 5.0, atol=1e-9)
    np.testing.assert_array_equal(a["better_ear_db"], a["snr_db"].max(axis=0))


def test_transform_raises_right_ear_low_band_snr(conditions, signals):
    def right_low(cond):
        sc = mix_scene(SceneSpec("lateral", cond, snr_db=0.0), conditions, *signals)
        be = better_ear_snr(sc)
        low = (be["band_centers_hz"] >= 400) & (be["band_centers_hz"] <= 1000)
        return be["snr_db"][1, low]

    assert np.all(right_low("transformITD_add") - right_low("noITD") > 0)


def test_limiter_caps_mix(conditions, signals):
    hg = design_half_gain(Audiogram.symmetric([40, 50, 60, 70, 80, 80, 80]), FS)
    sc = mix_scene(SceneSpec("central", "unprocessed", snr_db=10.0), conditions, *signals,
                   half_gain=hg)
    assert sc.metadata["limiter_reduction_db"] > 0
    rms = np.sqrt(np.mean(sc.mix ** 2, axis=1)).max()
    assert 100 + 20 * np.log10(rms) == pytest.approx(85.0, abs=1e-9)
    np.testing.assert_allclose(sc.mix, sum(sc.stems.values()), rtol=0, atol=1e-15)


def test_interferer_count_checked(conditions, signals):
    with pytest.raises(SceneError, match="needs 2"):
        mix_scene(SceneSpec(), conditions, signals[0], [signals[1]])


def test_write_scene(tmp_path, conditions, signals):
    sc = mix_scene(SceneSpec(), conditions, *signals)
    write_scene(sc, tmp_path / "mix.wav", {"seed": 3}, write_stems=True)
    fs, data = read_wav(tmp_path / "mix.wav")
    assert fs == FS and data.shape == sc.mix.shape
    meta = json.loads((tmp_path / "mix.json").read_text())
    assert meta["seed"] == 3 and meta["layout"] == "central"
    assert (tmp_path / "mix_target.wav").exists()
