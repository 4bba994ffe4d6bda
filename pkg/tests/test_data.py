import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal

from bccrn.data import (HEAD_RADIUS, HRIR_BULK_DELAY, SPEED_OF_SOUND, DatasetManifest, Hrir, HrirSet,
                        build_dataset, channel_snrs, isotropic_noise, load_hrir_set, make_ssn, mean_snr,
                        mix_at_snr, noise_source, save_hrir_set, spatialize, synth_hrir, synthetic_corpus,
                        white_noise, woodworth_itd)
from bccrn.dsp import BinauralWaveform, read_wav

FS = 16000


def test_frontal_hrir_is_symmetric():
    h = synth_hrir(0.0)
    assert np.array_equal(h.left, h.right)


@pytest.mark.parametrize("az", [5.0, 30.0, 90.0, 137.5, 180.0])
def test_negation_mirrors_channels_exactly(az):
    a, b = synth_hrir(az), synth_hrir(-az)
    assert np.array_equal(a.left, b.right) and np.array_equal(a.right, b.left)


def test_woodworth_itd_at_90_degrees():
    expected = HEAD_RADIUS / SPEED_OF_SOUND * (math.pi / 2 + 1)
    assert woodworth_itd(90.0) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(0.656e-3, abs=1e-6)
    assert woodworth_itd(0.0) == 0.0
    assert woodworth_itd(-90.0) == -woodworth_itd(90.0)


def _lag(x, y):
    # delay of y relative to x from the cross-correlation peak, parabolic refinement
    c = signal.correlate(y, x, mode="full", method="direct")
    k = int(np.argmax(c))
    a, b, d = c[k - 1], c[k], c[k + 1]
    return k - (len(x) - 1) + 0.5 * (a - d) / (a - 2 * b + d)


def test_measured_itd_matches_woodworth_and_right_leads_for_positive_azimuth():
    h = synth_hrir(90.0, shadow=False)
    lag = _lag(h.right, h.left) / FS  # left relative to right
    assert lag == pytest.approx(woodworth_itd(90.0), abs=2e-6)
    assert int(np.argmax(np.abs(h.right))) == HRIR_BULK_DELAY


def test_far_ear_is_attenuated_at_high_frequency():
    h = synth_hrir(60.0)
    H_l = np.abs(np.fft.rfft(h.left))
    H_r = np.abs(np.fft.rfft(h.right))
    hi = slice(len(H_l) * 3 // 4, None)
    assert H_l[hi].mean() < 0.5 * H_r[hi].mean()
    # a first-order shelf is transparent at DC
    assert H_l[0] == pytest.approx(H_r[0], rel=1e-3)
    with pytest.raises(ValueError):
        synth_hrir(181.0)


def test_hrir_set_nearest_and_errors(tmp_path):
    save_hrir_set([synth_hrir(a) for a in (-90.0, 0.0, 90.0)], tmp_path)
    hs = load_hrir_set(tmp_path)
    assert hs.nearest(85.0).azimuth == 90.0
    assert hs.nearest(-50.0).azimuth == -90.0
    assert load_hrir_set(tmp_path, 16000).sample_rate == FS
    with pytest.raises(ValueError):
        load_hrir_set(tmp_path, 44100)
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ValueError):
        load_hrir_set(empty)
    with pytest.raises(FileNotFoundError):
        load_hrir_set(tmp_path / "missing")
    with pytest.raises(ValueError):
        HrirSet([])


def test_hrir_round_trip_is_byte_identical(tmp_path):
    grid = HrirSet.synthetic(30.0)
    save_hrir_set(grid, tmp_path / "a")
    back = load_hrir_set(tmp_path / "a")
    assert len(back) == 12
    for h, g in zip(grid, back):
        assert h.azimuth == g.azimuth
        assert np.array_equal(h.left.astype(np.float32), g.left.astype(np.float32))
        assert np.array_equal(h.right.astype(np.float32), g.right.astype(np.float32))
    save_hrir_set(back, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_spatialize_identity_and_delay():
    x = np.random.default_rng(0).standard_normal(500)
    delta = np.zeros(64)
    delta[0] = 1
    out = spatialize(x, Hrir(0.0, delta, delta))
    np.testing.assert_allclose(out.left, x, atol=1e-12)
    np.testing.assert_allclose(out.right, x, atol=1e-12)
    shifted = np.zeros(64)
    shifted[10] = 0.5
    out = spatialize(x, Hrir(0.0, delta, shifted))
    np.testing.assert_allclose(out.right[10:], 0.5 * x[:-10], atol=1e-12)
    np.testing.assert_allclose(out.right[:10], 0, atol=1e-12)
    with pytest.raises(ValueError):
        spatialize(np.zeros(0), Hrir(0.0, delta, delta))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), shift=st.integers(0, 50))
def test_spatialize_linear_and_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(400), rng.standard_normal(400)
    h = synth_hrir(float(rng.uniform(-90, 90)))
    sa, sb, sab = spatialize(a, h), spatialize(b, h), spatialize(a + b, h)
    np.testing.assert_allclose(sab.left, sa.left + sb.left, atol=1e-10)
    np.testing.assert_allclose(sab.right, sa.right + sb.right, atol=1e-10)
    moved = spatialize(np.concatenate([np.zeros(shift), a])[:400], h)
    np.testing.assert_allclose(moved.left[shift:], sa.left[:400 - shift], atol=1e-10)


@pytest.fixture(scope="module")
def hrirs():
    return HrirSet.synthetic(5.0)


def test_isotropic_noise_channel_balance(hrirs):
    diffs = []
    for seed in range(10):
        v = isotropic_noise(0.5, white_noise, hrirs, 5.0, seed)
        diffs.append(10 * np.log10(np.mean(v.left**2) / np.mean(v.right**2)))
        assert (np.mean(v.left**2) + np.mean(v.right**2)) / 2 == pytest.approx(1.0, rel=1e-12)
    assert abs(np.mean(diffs)) < 1.0


def test_isotropic_noise_independent_across_seeds_and_reproducible(hrirs):
    a = isotropic_noise(0.5, white_noise, hrirs, 5.0, 1)
    b = isotropic_noise(0.5, white_noise, hrirs, 5.0, 2)
    rho = np.corrcoef(a.left, b.left)[0, 1]
    assert abs(rho) < 0.1
    again = isotropic_noise(0.5, white_noise, hrirs, 5.0, 1)
    assert np.array_equal(a.left, again.left)


def test_isotropic_noise_errors(hrirs):
    with pytest.raises(ValueError):
        isotropic_noise(0.1, white_noise, hrirs, 7.0, 0)
    sparse = HrirSet.synthetic(30.0)
    with pytest.raises(ValueError):
        isotropic_noise(0.1, white_noise, sparse, 5.0, 0)


def third_octave_levels(x, lo=100.0, hi=7000.0):
    f, p = signal.welch(x, FS, nperseg=1024)
    centres = 1000 * 2.0 ** (np.arange(-10, 9) / 3)
    centres = centres[(centres >= lo) & (centres <= hi)]
    levels = []
    for c in centres:
        band = (f >= c * 2 ** (-1 / 6)) & (f < c * 2 ** (1 / 6))
        levels.append(10 * np.log10(p[band].mean()))
    levels = np.array(levels)
    return levels - levels.mean()


@pytest.fixture(scope="module")
def reference_speech():
    return synthetic_corpus(30, 2.0, seed=4)


def test_ssn_matches_reference_spectrum(reference_speech):
    gen = make_ssn(reference_speech, seed=0)
    noise = gen(60 * FS)
    ref = third_octave_levels(np.concatenate(reference_speech))
    got = third_octave_levels(noise)
    assert np.max(np.abs(got - ref)) < 3.0
    assert np.mean(noise**2) == pytest.approx(1.0, rel=0.05)


def test_ssn_from_flat_reference_is_white():
    flat = [np.random.default_rng(i).standard_normal(20 * FS) for i in range(3)]
    noise = make_ssn(flat, seed=1)(60 * FS)
    white = np.random.default_rng(9).standard_normal(60 * FS)
    assert np.max(np.abs(third_octave_levels(noise) - third_octave_levels(white))) < 3.0


def test_ssn_deterministic_and_needs_reference(reference_speech):
    a = make_ssn(reference_speech, seed=3)(1000)
    b = make_ssn(reference_speech, seed=3)(1000)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        make_ssn(reference_speech[:5])
    with pytest.raises(ValueError):
        noise_source("ssn")
    with pytest.raises(ValueError):
        noise_source("pink")


def test_file_noise_source(tmp_path):
    from bccrn.dsp import write_wav

    write_wav(tmp_path / "n.wav", np.random.default_rng(0).uniform(-0.5, 0.5, 3000), FS)
    src = noise_source(f"file:{tmp_path / 'n.wav'}")
    x = src(8000, np.random.default_rng(1))
    assert x.shape == (8000,) and np.any(x)


def pair(seed, n=4000):
    rng = np.random.default_rng(seed)
    s = BinauralWaveform(rng.standard_normal(n), 0.5 * rng.standard_normal(n))
    v = BinauralWaveform(rng.standard_normal(n), rng.standard_normal(n) * 2)
    return s, v


def test_mix_equal_snrs_zero_target():
    rng = np.random.default_rng(0)
    s = BinauralWaveform(rng.standard_normal(4000), rng.standard_normal(4000))
    v = BinauralWaveform(3 * rng.standard_normal(4000), 3 * rng.standard_normal(4000))
    # force equal per-channel SNRs
    v = BinauralWaveform(v.left * np.sqrt(np.mean(s.left**2) / np.mean(v.left**2)),
                         v.right * np.sqrt(np.mean(s.right**2) / np.mean(v.right**2)))
    y = mix_at_snr(s, v, 0.0)
    vn = BinauralWaveform(y.left - s.left, y.right - s.right)
    for a, b in zip(channel_snrs(s, vn), (0.0, 0.0)):
        assert abs(a - b) < 0.01


def test_mix_high_snr_is_clean():
    s, v = pair(1)
    y = mix_at_snr(s, v, 60.0)
    assert np.max(np.abs(y.left - s.left)) < 1e-2 * np.max(np.abs(s.left))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), target=st.floats(-20, 30))
def test_mix_hits_target_mean_snr(seed, target):
    s, v = pair(seed)
    y = mix_at_snr(s, v, target)
    noise = BinauralWaveform(y.left - s.left, y.right - s.right)
    assert abs(mean_snr(s, noise) - target) < 0.01


def test_mix_errors():
    s, v = pair(2)
    with pytest.raises(ValueError):
        mix_at_snr(s, BinauralWaveform(v.left[:10], v.right[:10]), 0.0)
    with pytest.raises(ValueError):
        mix_at_snr(s, BinauralWaveform(np.zeros(4000), v.right), 0.0)


SPLITS = {"train": 6, "valid": 2, "test": 2}


def _build(root, hrirs, name):
    from bccrn.dsp import write_wav

    noise_file = root / "babble.wav"
    if not noise_file.exists():
        write_wav(noise_file, np.random.default_rng(0).uniform(-0.5, 0.5, 2 * FS), FS)
    speech = synthetic_corpus(10, 0.5, seed=2)
    return build_dataset(speech, ["wgn", f"file:{noise_file}"], hrirs, SPLITS, root / name, seed=8)


@pytest.fixture(scope="module")
def built(tmp_path_factory, hrirs):
    root = tmp_path_factory.mktemp("ds")
    return _build(root, hrirs, "a"), root


def test_build_dataset_entries(built):
    a, root = built
    assert len(a.entries) == 10
    assert all(-90 <= e.azimuth <= 90 for e in a.entries)
    assert a.splits == ["test", "train", "valid"]
    assert len({e.noise_type for e in a.entries}) == 2
    for e in a.entries:
        lo, hi = (-6, 15) if e.split == "test" else (-7, 16)
        assert lo <= e.target_snr <= hi
        assert e.distance in (0.8, 3.0)
    names = {e.clean for e in a.split("train")}
    assert not names & {e.clean for e in a.split("test")}


def test_build_dataset_is_byte_reproducible(built, hrirs):
    a, root = built
    _build(root, hrirs, "c")
    for e in a.entries:
        assert (root / "a" / e.clean).read_bytes() == (root / "c" / e.clean).read_bytes()
        assert (root / "a" / e.noisy).read_bytes() == (root / "c" / e.noisy).read_bytes()
    assert (root / "a" / "manifest.json").read_bytes() == (root / "c" / "manifest.json").read_bytes()


def test_written_pairs_remeasure_at_target(built):
    a, _ = built
    for e in a.entries:
        clean, noisy = a.load_pair(e)
        noise = BinauralWaveform(noisy.left - clean.left, noisy.right - clean.right)
        assert abs(mean_snr(clean, noise) - e.target_snr) < 0.05


def test_manifest_round_trip(built, tmp_path):
    a, root = built
    loaded = DatasetManifest.load(root / "a" / "manifest.json")
    assert loaded.entries == a.entries
    clean, noisy = loaded.load_split("test")
    assert clean.shape == noisy.shape == (2, 2, 8000)
    data, sr = read_wav(root / "a" / a.entries[0].noisy)
    assert sr == FS and data.shape == (2, 8000)
    with pytest.raises(ValueError):
        build_dataset([], ["wgn"], HrirSet.synthetic(), {"train": 1}, tmp_path)
