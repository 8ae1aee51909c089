import struct

import numpy as np
import pytest

from sernas.audio import (
    Spectrogram,
    Utterance,
    band_energy_classifier,
    fit_stats,
    frame_count,
    label_index,
    load_spectrogram,
    load_wav,
    normalize,
    read_manifest,
    save_spectrogram,
    segment,
    stft_spectrogram,
    synth_dataset,
    write_manifest,
    write_wav,
)


def _sine(freq=1000.0, seconds=1.0, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return Utterance(0.5 * np.sin(2 * np.pi * freq * t), sr, 0, "s", "ses1")


def test_frame_count_formula():
    assert frame_count(16000, 640, 160) == 97
    spec = stft_spectrogram(_sine())
    assert spec.values.shape == (97, 801)
    assert spec.shift_s == pytest.approx(0.01)


def test_sine_peak_bin():
    spec = stft_spectrogram(_sine(1000.0), log=False)
    # 1000 Hz at 16 kHz with a 1600-point DFT lands on bin 100
    assert int(np.argmax(spec.values.mean(axis=0))) == 100


def test_max_freq_truncates_bins():
    spec = stft_spectrogram(_sine(), max_freq_hz=4000)
    assert spec.values.shape[1] == 401


def test_log_compression():
    u = _sine()
    lin = stft_spectrogram(u, log=False).values
    np.testing.assert_allclose(stft_spectrogram(u).values, np.log1p(lin))


def test_silence_is_zero():
    u = Utterance(np.zeros(8000), 16000, 0, "s", "ses1")
    assert np.all(stft_spectrogram(u).values == 0)


def test_short_waveform_rejected():
    with pytest.raises(ValueError, match="shorter than"):
        stft_spectrogram(Utterance(np.zeros(100), 16000, 0, "s", "ses1"))


def test_dft_shorter_than_window_rejected():
    with pytest.raises(ValueError):
        stft_spectrogram(_sine(), dft_len=512)


def test_empty_waveform_rejected():
    with pytest.raises(ValueError):
        Utterance(np.zeros(0), 16000, 0, "s", "ses1")


def test_segment_counts():
    spec = Spectrogram(np.ones((250, 3)), 0.01, label=2)
    segs = segment(spec)
    # 200-frame pieces; the 50-frame tail is below half a segment and dropped
    assert len(segs) == 1 and segs[0].values.shape == (200, 3) and segs[0].label == 2
    segs = segment(Spectrogram(np.ones((350, 3)), 0.01))
    assert len(segs) == 2
    assert np.all(segs[1].values[150:] == 0) and np.all(segs[1].values[:150] == 1)


def test_segment_short_input():
    assert segment(Spectrogram(np.ones((50, 3)), 0.01)) == []


def test_normalization_uses_given_stats():
    rng = np.random.default_rng(0)
    train = [Spectrogram(rng.normal(3, 2, size=(100, 4)), 0.01) for _ in range(3)]
    stats = fit_stats(train)
    z = np.concatenate([normalize(s, stats).values for s in train])
    np.testing.assert_allclose(z.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1, atol=1e-12)
    other = Spectrogram(rng.normal(size=(10, 4)), 0.01)
    np.testing.assert_allclose(normalize(other, stats).values, (other.values - stats.mean) / stats.std)


def test_normalization_constant_bin_is_finite():
    stats = fit_stats([np.ones((5, 2))])
    assert np.all(np.isfinite(normalize(np.ones((5, 2)), stats)))


def test_normalization_bin_mismatch():
    stats = fit_stats([np.ones((5, 2))])
    with pytest.raises(ValueError, match="bins"):
        normalize(np.ones((5, 3)), stats)


def test_stats_digest_changes_with_data():
    a = fit_stats([np.arange(10.0).reshape(5, 2)])
    b = fit_stats([np.arange(10.0).reshape(5, 2) + 1])
    assert a.digest() != b.digest() and a.digest() == fit_stats([np.arange(10.0).reshape(5, 2)]).digest()


def test_synthetic_corpus_structure():
    utts = synth_dataset(40, np.random.default_rng(0), sample_rate=4000, min_s=1, max_s=2)
    assert [u.label for u in utts[:8]] == [0, 1, 2, 3, 0, 1, 2, 3]
    assert len({u.speaker for u in utts}) == 10
    assert {u.session for u in utts} == {f"ses{i}" for i in range(1, 6)}
    for u in utts:
        assert 4000 <= len(u.samples) <= 8000
        assert np.max(np.abs(u.samples)) <= 0.25 + 1e-12
    by_spk = {}
    for u in utts:
        by_spk.setdefault(u.speaker, set()).add(u.session)
    assert all(len(s) == 1 for s in by_spk.values())


def test_synthetic_corpus_deterministic():
    a = synth_dataset(8, np.random.default_rng(5), sample_rate=4000, min_s=1, max_s=1.5)
    b = synth_dataset(8, np.random.default_rng(5), sample_rate=4000, min_s=1, max_s=1.5)
    assert all(np.array_equal(x.samples, y.samples) for x, y in zip(a, b))


def test_synthetic_classes_are_separable_but_not_trivially():
    utts = synth_dataset(200, np.random.default_rng(1), sample_rate=4000, min_s=1, max_s=2)
    train = [u for u in utts if u.session != "ses5"]
    test = [u for u in utts if u.session == "ses5"]
    acc = band_energy_classifier(train, test)
    assert 0.5 < acc <= 1.0


def test_synth_rejects_too_few():
    with pytest.raises(ValueError):
        synth_dataset(2, np.random.default_rng(0))


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-0.9, 0.9, size=4000)
    write_wav(tmp_path / "a.wav", x, 8000)
    u = load_wav(tmp_path / "a.wav")
    assert u.sample_rate == 8000
    assert np.max(np.abs(u.samples - x)) < 1 / 32768 + 1e-12


def test_stereo_is_averaged(tmp_path):
    left = np.full(100, 0.5)
    right = np.full(100, -0.25)
    write_wav(tmp_path / "s.wav", np.stack([left, right], axis=1), 8000)
    np.testing.assert_allclose(load_wav(tmp_path / "s.wav").samples, 0.125, atol=1e-4)


def test_wav_with_manifest(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(800), 8000)
    write_manifest(tmp_path / "m.csv", [{"path": "a.wav", "label": "Angry", "speaker": "F1", "session": "ses2"}])
    u = load_wav(tmp_path / "a.wav", tmp_path / "m.csv")
    assert (u.label, u.speaker, u.session) == (1, "F1", "ses2")


def test_wav_not_in_manifest(tmp_path):
    write_wav(tmp_path / "a.wav", np.zeros(800), 8000)
    write_manifest(tmp_path / "m.csv", [])
    with pytest.raises(ValueError, match="not listed"):
        load_wav(tmp_path / "a.wav", tmp_path / "m.csv")


def test_malformed_wav(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"RIFF0000WAVEjunk")
    with pytest.raises(ValueError, match="malformed"):
        load_wav(tmp_path / "bad.wav")


def test_8bit_wav_rejected(tmp_path):
    import wave

    with wave.open(str(tmp_path / "b.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(1)
        w.setframerate(8000)
        w.writeframes(bytes(100))
    with pytest.raises(ValueError, match="unsupported encoding"):
        load_wav(tmp_path / "b.wav")


def test_manifest_missing_columns(tmp_path):
    (tmp_path / "m.csv").write_text("path,label\na.wav,0\n")
    with pytest.raises(ValueError, match="lacks columns"):
        read_manifest(tmp_path / "m.csv")


@pytest.mark.parametrize("label,idx", [(2, 2), ("3", 3), ("neutral", 0), ("Sad", 3)])
def test_label_index(label, idx):
    assert label_index(label) == idx


def test_label_index_unknown():
    with pytest.raises(ValueError):
        label_index("bored")


def test_spectrogram_cache_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=(7, 5)).astype(np.float32)
    save_spectrogram(tmp_path / "x.spg", Spectrogram(v, 0.01))
    back = load_spectrogram(tmp_path / "x.spg")
    assert np.array_equal(back.values, v) and back.shift_s == 0.01
    assert not list(tmp_path.glob("*.tmp"))


def test_spectrogram_cache_layout(tmp_path):
    save_spectrogram(tmp_path / "x.spg", Spectrogram(np.ones((2, 3)), 0.01))
    raw = (tmp_path / "x.spg").read_bytes()
    assert struct.unpack_from("<4sIId", raw) == (b"SPG1", 2, 3, 0.01)
    assert len(raw) == struct.calcsize("<4sIId") + 6 * 4


def test_spectrogram_cache_corruption(tmp_path):
    save_spectrogram(tmp_path / "x.spg", Spectrogram(np.ones((2, 3)), 0.01))
    raw = (tmp_path / "x.spg").read_bytes()
    (tmp_path / "t.spg").write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="expected 6 values"):
        load_spectrogram(tmp_path / "t.spg")
    (tmp_path / "m.spg").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="bad magic"):
        load_spectrogram(tmp_path / "m.spg")
    (tmp_path / "h.spg").write_bytes(raw[:5])
    with pytest.raises(ValueError, match="truncated"):
        load_spectrogram(tmp_path / "h.spg")
