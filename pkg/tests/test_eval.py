import json
import math
import random

import numpy as np
import pytest

from bccrn.checkpoint import ModelCheckpoint
from bccrn.cues import speech_activity_mask
from bccrn.data import HrirSet, build_dataset, mix_at_snr, spatialize, synth_hrir, synth_speech, synthetic_corpus
from bccrn.dsp import BinauralWaveform, StftConfig, istft, stft
from bccrn.evaluation import (FW_BANDS, FW_MAX_DB, STOI_LABEL, EvalReport, IdentityEnhancer, PairRecord,
                              emit_report, enhance, evaluate_dataset, evaluate_pair, fw_band_matrix, fw_segsnr,
                              load_report, plot_reports, read_csv, write_csv)
from bccrn.loss import ipd_loss
from bccrn.model import ModelConfig, crm_apply, crm_compute

FS = 16000
CFG = StftConfig()


@pytest.fixture(scope="module")
def scene():
    rng = np.random.default_rng(0)
    mono = synth_speech(1.0, FS, 21)
    clean = spatialize(mono, synth_hrir(40.0))
    noise = BinauralWaveform(rng.standard_normal(FS), rng.standard_normal(FS))
    noisy = mix_at_snr(clean, noise, 0.0)
    return clean, noisy


def test_band_layout():
    W = fw_band_matrix(FS)
    assert W.shape == (FW_BANDS, 257)
    assert np.all(W >= 0) and np.all(W.sum(axis=1) > 0)
    # triangular bands overlap their neighbours only
    assert np.count_nonzero(W[0] * W[2]) == 0


def test_fw_segsnr_clamps(scene):
    clean, _ = scene
    s = clean.left
    assert fw_segsnr(s, s) == pytest.approx(FW_MAX_DB, abs=1e-12)
    # error energy is 4x the signal in every band: 10 log10(1/4)
    assert fw_segsnr(s, -s) == pytest.approx(10 * math.log10(0.25), abs=1e-9)
    assert fw_segsnr(s, 0 * s) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        fw_segsnr(s, s[:-1])
    with pytest.raises(ValueError):
        fw_segsnr(np.zeros(4000), np.zeros(4000))


def test_fw_segsnr_monotone_in_noise(scene):
    clean, _ = scene
    s = clean.left
    n = np.random.default_rng(1).standard_normal(len(s)) * np.std(s)
    vals = [fw_segsnr(s, s + g * n) for g in (1.0, 0.3, 0.1)]
    assert vals[0] < vals[1] < vals[2]


def ideal_crm_output(clean, noisy):
    out = []
    for c, y in ((clean.left, noisy.left), (clean.right, noisy.right)):
        Y = stft(y, CFG)
        M = crm_compute(stft(c, CFG), Y)
        out.append(istft(crm_apply(M.values, Y), len(c)).numpy())
    return BinauralWaveform(out[0], out[1], FS)


def test_ideal_crm_beats_noisy_and_preserves_cues(scene):
    clean, noisy = scene
    enhanced = ideal_crm_output(clean, noisy)
    rec = evaluate_pair(clean, noisy, enhanced, CFG)
    assert rec.fwsegsnr_enhanced_l > rec.fwsegsnr_noisy_l
    assert rec.fwsegsnr_enhanced_r > rec.fwsegsnr_noisy_r
    assert rec.ild_error_db < 1e-6 and rec.ipd_error_rad < 1e-6


def test_perfect_and_identity_enhancement(scene):
    clean, noisy = scene
    rec = evaluate_pair(clean, noisy, clean, CFG, id="x")
    assert rec.ild_error_db == 0 and rec.ipd_error_rad == 0
    assert abs(rec.stoi_mean - 1.0) < 1e-3
    assert rec.fwsegsnr_enhanced_l == FW_MAX_DB
    rec = evaluate_pair(clean, noisy, noisy, CFG)
    assert rec.delta_fwsegsnr_l == 0.0 and rec.delta_fwsegsnr_r == 0.0
    assert rec.input_snr == pytest.approx(0.0, abs=1e-9)
    assert rec.ild_error_db >= 0 and rec.ipd_error_rad >= 0


def test_cue_errors_invariant_to_common_gain_and_rotation(scene):
    clean, noisy = scene
    base = evaluate_pair(clean, noisy, noisy, CFG)
    scaled = BinauralWaveform(3 * noisy.left, 3 * noisy.right, FS)
    assert evaluate_pair(clean, noisy, scaled, CFG).ild_error_db == pytest.approx(base.ild_error_db, abs=1e-6)
    # a common rotation of both enhanced spectra leaves every interaural phase unchanged
    S = (stft(clean.left, CFG), stft(clean.right, CFG))
    Y = (stft(noisy.left, CFG), stft(noisy.right, CFG))
    rot = complex(math.cos(0.7), math.sin(0.7))
    mask = speech_activity_mask(S[0], S[1], CFG)
    turned = (Y[0].with_bins(Y[0].bins * rot), Y[1].with_bins(Y[1].bins * rot))
    assert float(ipd_loss(S, turned, mask)) == pytest.approx(float(ipd_loss(S, Y, mask)), abs=1e-9)
    assert float(ipd_loss(S, Y, mask)) == pytest.approx(base.ipd_error_rad, abs=1e-12)


def test_evaluate_pair_errors(scene):
    clean, noisy = scene
    with pytest.raises(ValueError):
        evaluate_pair(clean, noisy, BinauralWaveform(noisy.left[:-5], noisy.right[:-5], FS), CFG)
    with pytest.raises(ValueError):
        evaluate_pair(clean, noisy, BinauralWaveform(noisy.left, noisy.right, 8000), CFG)


def _record(i, snr, value):
    return PairRecord(f"u{i}", snr, 1.0, 1.0, 1.0 + value, 1.0 + value, value, value, 2 * value, value / 4,
                      0.5, 0.7, 0.6)


def test_aggregation_by_bucket_and_permutation_invariance():
    recs = [_record(0, -5.5, 1.0), _record(1, -4.0, 3.0), _record(2, 2.9, 5.0), _record(3, 0.0, 7.0)]
    rep = EvalReport(recs)
    rows = rep.aggregates()
    assert [r["bucket"] for r in rows] == ["-6", "0"]
    assert rows[0]["n"] == 2 and rows[0]["delta_fwsegsnr_l"] == pytest.approx(2.0)
    assert rows[1]["ild_error_db"] == pytest.approx(12.0)
    shuffled = recs[:]
    random.Random(0).shuffle(shuffled)
    assert EvalReport(shuffled).aggregates() == rows
    assert rep.mean("delta_fwsegsnr") == pytest.approx(4.0)
    assert rep.overall()["n"] == 4


def test_csv_and_json_round_trip(tmp_path):
    recs = [_record(0, -5.5, 1.0), _record(1, 4.0, 0.1234567890123)]
    rep = EvalReport(recs, meta={"split": "test"})
    path = write_csv(rep, tmp_path / "r.csv")
    lines = path.read_text().splitlines()
    assert sum(l.startswith("aggregate") for l in lines) == 2
    assert sum(l.startswith("utterance") for l in lines) == 2
    back, aggs = read_csv(path)
    assert back.records == rep.records
    assert aggs == rep.aggregates()
    written = emit_report(rep, tmp_path / "out", label="silp")
    names = {p.name for p in written}
    assert {"report.csv", "report.json"} <= names
    assert load_report(tmp_path / "out" / "report.json").records == rep.records
    doc = json.loads((tmp_path / "out" / "report.json").read_text())
    assert doc["stoi_mean_label"] == STOI_LABEL and doc["version"] == 1


def test_plots_exist_and_nonempty(tmp_path):
    a = EvalReport([_record(0, -5.5, 1.0), _record(1, 4.0, 2.0)])
    b = EvalReport([_record(0, -5.5, 0.5), _record(1, 4.0, 1.0)])
    paths = plot_reports({"silp": a, "snr": b}, tmp_path)
    assert len(paths) == 4
    for p in paths:
        assert p.suffix == ".svg" and p.stat().st_size > 0
        assert "<svg" in p.read_text()[:2000]


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("evalds")
    return build_dataset(synthetic_corpus(4, 0.6, seed=5), ["wgn"], HrirSet.synthetic(), {"test": 4}, out, seed=5)


def test_identity_model_has_zero_improvement(manifest):
    rep = evaluate_dataset(manifest, IdentityEnhancer())
    assert len(rep.records) == 4 and not rep.failures
    for r in rep.records:
        assert abs(r.delta_fwsegsnr_l) < 1e-6 and abs(r.delta_fwsegsnr_r) < 1e-6


def test_model_enhancement_runs_and_checks_rate(manifest):
    ckpt = ModelCheckpoint.create(ModelConfig.toy())
    clean, noisy = manifest.load_pair(manifest.entries[0])
    out = enhance(ckpt, noisy)
    assert out.stacked().shape == noisy.stacked().shape
    with pytest.raises(ValueError):
        enhance(ckpt, BinauralWaveform(noisy.left, noisy.right, 8000))
    rep = evaluate_dataset(manifest, ckpt)
    assert len(rep.records) == 4
    with pytest.raises(ValueError):
        evaluate_dataset(manifest, ckpt, split="train")
