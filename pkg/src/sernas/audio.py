"""Spectrogram front end, WAV/manifest I/O, a binary spectrogram cache and a synthetic corpus."""

from __future__ import annotations

import csv
import os
import struct
import tempfile
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EMOTIONS = ("Neutral", "Angry", "Happy", "Sad")


@dataclass
class Utterance:
    samples: np.ndarray
    sample_rate: int
    label: int
    speaker: str
    session: str
    uid: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if len(self.samples) == 0:
            raise ValueError("empty waveform")


@dataclass
class Spectrogram:
    """``values`` is ``[frames, bins]``."""

    values: np.ndarray
    shift_s: float
    normalized: bool = False
    label: int | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.values.shape[0]


def frame_count(n_samples, window, shift):
    return (n_samples - window) // shift + 1


def stft_spectrogram(u, window_ms=40.0, shift_ms=10.0, dft_len=1600, max_freq_hz=None, log=True):
    """Hanning-windowed magnitude STFT of an utterance.

    Frames are zero-padded to ``dft_len`` and the first ``dft_len//2 + 1``
    bins are kept (optionally only those at or below ``max_freq_hz``).
    Magnitudes are compressed with ``log(1 + |X|)`` unless ``log`` is False.
    """
    x = np.asarray(u.samples, dtype=np.float64)
    sr = u.sample_rate
    win = int(round(window_ms * sr / 1000.0))
    hop = int(round(shift_ms * sr / 1000.0))
    if dft_len < win:
        raise ValueError(f"DFT length {dft_len} shorter than the {win}-sample window")
    if len(x) < win:
        raise ValueError(f"waveform of {len(x)} samples is shorter than the {win}-sample window")
    n = frame_count(len(x), win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n]
    mag = np.abs(np.fft.rfft(frames * np.hanning(win), n=dft_len, axis=1))
    if max_freq_hz is not None:
        mag = mag[:, : int(np.floor(max_freq_hz * dft_len / sr)) + 1]
    if log:
        mag = np.log1p(mag)
    return Spectrogram(mag, hop / sr, label=u.label, meta={"speaker": u.speaker, "session": u.session})


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def digest(self):
        import hashlib

        return hashlib.sha256(self.mean.tobytes() + self.std.tobytes()).hexdigest()


def fit_stats(specs, floor=1e-8):
    """Per-bin mean/std over every frame of the given (training) spectrograms."""
    allv = np.concatenate([np.asarray(s.values if isinstance(s, Spectrogram) else s) for s in specs])
    return NormStats(allv.mean(axis=0), np.maximum(allv.std(axis=0), floor))


def normalize(spec, stats):
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if values.shape[1] != stats.mean.shape[0]:
        raise ValueError(f"spectrogram has {values.shape[1]} bins, stats have {stats.mean.shape[0]}")
    out = (values - stats.mean) / stats.std
    if isinstance(spec, Spectrogram):
        return Spectrogram(out, spec.shift_s, True, spec.label, dict(spec.meta))
    return out


def segment(spec, seconds=2.0, min_fraction=0.5):
    """Cut into non-overlapping fixed-length pieces that inherit the label.

    A trailing remainder of at least ``min_fraction`` of a segment is
    zero-padded to full length; shorter remainders are dropped.
    """
    n = int(round(seconds / spec.shift_s))
    v = spec.values
    out = []
    for start in range(0, v.shape[0], n):
        piece = v[start : start + n]
        if piece.shape[0] < n:
            if piece.shape[0] < min_fraction * n:
                break
            piece = np.concatenate([piece, np.zeros((n - piece.shape[0], v.shape[1]), v.dtype)])
        out.append(Spectrogram(piece, spec.shift_s, spec.normalized, spec.label, dict(spec.meta)))
    return out


# ---------------------------------------------------------------- synthetic corpus

# (low Hz, high Hz, amplitude-modulation Hz) per class
CLASS_SIGNATURES = (
    (200.0, 450.0, 2.0),
    (350.0, 700.0, 6.0),
    (450.0, 800.0, 4.0),
    (150.0, 350.0, 1.0),
)


def _band_noise(rng, n, sr, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    return x / (np.std(x) + 1e-12)


def synth_dataset(n_utts, rng, classes=4, sample_rate=16000, min_s=2.0, max_s=6.0,
                  n_speakers=10, n_sessions=5, noise=1.5):
    """Labelled utterances with class-specific band-limited noise and modulation rate.

    Labels and speakers are assigned round-robin (two speakers per session),
    so each class is spread evenly over speakers.  Speakers shift the bands
    slightly and every utterance carries broadband background noise.
    """
    if n_utts < classes:
        raise ValueError("need at least one utterance per class")
    if classes > len(CLASS_SIGNATURES):
        raise ValueError(f"at most {len(CLASS_SIGNATURES)} synthetic classes")
    per_session = n_speakers // n_sessions
    spk_shift = rng.uniform(0.9, 1.1, size=n_speakers)
    utts = []
    for i in range(n_utts):
        label = i % classes
        spk = (i // classes) % n_speakers
        dur = rng.uniform(min_s, max_s)
        n = int(dur * sample_rate)
        lo, hi, am = CLASS_SIGNATURES[label]
        lo, hi = lo * spk_shift[spk], hi * spk_shift[spk]
        t = np.arange(n) / sample_rate
        env = 0.6 + 0.4 * np.sin(2 * np.pi * am * t + rng.uniform(0, 2 * np.pi))
        x = env * _band_noise(rng, n, sample_rate, lo, hi)
        x += noise * _band_noise(rng, n, sample_rate, 100.0, min(3500.0, 0.45 * sample_rate))
        x *= 0.25 / (np.max(np.abs(x)) + 1e-12)
        utts.append(
            Utterance(
                x.astype(np.float64),
                sample_rate,
                label,
                speaker=f"spk{spk:02d}",
                session=f"ses{spk // per_session + 1}",
                uid=f"utt{i:05d}",
            )
        )
    return utts


def band_energy_classifier(train, test, n_bands=16):
    """Nearest-centroid classifier on log band energies; returns test accuracy."""

    def feats(u):
        p = np.abs(np.fft.rfft(u.samples)) ** 2
        f = np.fft.rfftfreq(len(u.samples), 1.0 / u.sample_rate)
        edges = np.linspace(100, 900, n_bands + 1)
        return np.log([p[(f >= a) & (f < b)].mean() + 1e-12 for a, b in zip(edges[:-1], edges[1:])])

    xtr = np.array([feats(u) for u in train])
    ytr = np.array([u.label for u in train])
    cents = np.array([xtr[ytr == c].mean(axis=0) for c in np.unique(ytr)])
    xte = np.array([feats(u) for u in test])
    pred = np.argmin(((xte[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    return float(np.mean(pred == np.array([u.label for u in test])))


# ---------------------------------------------------------------- WAV / manifest


def write_wav(path, samples, sample_rate):
    """16-bit PCM writer; ``samples`` is ``[n]`` (mono) or ``[n, channels]`` in [-1, 1]."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(x.shape[1])
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_manifest(path):
    """CSV with columns ``path,label,speaker,session``; relative paths resolve against the manifest."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            missing = {"path", "label", "speaker", "session"} - set(row)
            if missing:
                raise ValueError(f"manifest {path} lacks columns {sorted(missing)}")
            p = Path(row["path"])
            row["path"] = str(p if p.is_absolute() else path.parent / p)
            rows.append(row)
    return rows


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["path", "label", "speaker", "session"])
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ("path", "label", "speaker", "session")})


def label_index(label):
    if isinstance(label, (int, np.integer)):
        return int(label)
    s = str(label).strip()
    if s.isdigit():
        return int(s)
    names = [e.lower() for e in EMOTIONS]
    if s.lower() not in names:
        raise ValueError(f"unknown emotion label {label!r}")
    return names.index(s.lower())


def load_wav(path, manifest=None):
    """Read a 16-bit PCM WAV as a mono Utterance scaled to [-1, 1].

    Stereo is averaged.  Label, speaker and session come from the matching
    manifest row (a path or a list of rows) when given.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getcomptype() != "NONE":
                raise ValueError(f"{path}: unsupported encoding {w.getcomptype()}")
            if w.getsampwidth() != 2:
                raise ValueError(f"{path}: unsupported encoding ({8 * w.getsampwidth()}-bit PCM)")
            nch, sr, n = w.getnchannels(), w.getframerate(), w.getnframes()
            raw = w.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ValueError(f"{path}: malformed WAV header ({exc})") from exc
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    x = x.reshape(-1, nch).mean(axis=1)
    meta = {"label": 0, "speaker": "unknown", "session": "unknown"}
    if manifest is not None:
        rows = read_manifest(manifest) if isinstance(manifest, (str, os.PathLike)) else manifest
        for r in rows:
            if Path(r["path"]).resolve() == path.resolve():
                meta = r
                break
        else:
            raise ValueError(f"{path} not listed in manifest")
    return Utterance(x, sr, label_index(meta["label"]), meta["speaker"], meta["session"], path.stem)


# ---------------------------------------------------------------- spectrogram cache
#
# Layout (little-endian): magic b"SPG1", uint32 frames, uint32 bins,
# float64 frame shift in seconds, then frames*bins float32 values row-major.

_MAGIC = b"SPG1"
_HEADER = struct.Struct("<4sIId")


def save_spectrogram(path, spec):
    """Write atomically: a temporary file in the same directory is renamed into place."""
    v = np.ascontiguousarray(spec.values, dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, v.shape[0], v.shape[1], float(spec.shift_s)))
        fh.write(v.tobytes())
    os.replace(tmp, path)


def load_spectrogram(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated spectrogram header")
    magic, t, f, shift = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    if payload.size != t * f:
        raise ValueError(f"{path}: expected {t * f} values, found {payload.size}")
    return Spectrogram(payload.reshape(t, f).astype(np.float32), shift)
