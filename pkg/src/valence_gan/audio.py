"""Audio ingestion and spectrogram preprocessing.

Raw 16 kHz mono PCM clips become Hann-windowed STFT magnitude spectrograms
(window 1024, hop 512), reduced from 512 linear bins to 128 bands covering
0-8 kHz, log-compressed, and affinely normalized to [-1, 1]. Fixed-width
training crops are centered inside a randomly chosen transcript word.
"""

from __future__ import annotations

import json
import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IngestionError

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
WINDOW = 1024
HOP = 512
BANDS = 128
FRAME_HOP_SEC = HOP / SAMPLE_RATE
PAD_VALUE = -1.0  # normalization minimum; represents zero energy

CACHE_MAGIC = b"VGS1"


@dataclass
class Utterance:
    """One audio clip with word alignments and optional annotator ratings."""

    id: str
    samples: np.ndarray
    words: list  # (token, start_sec, end_sec)
    session_id: str
    speaker_id: str
    annotator_valence: list | None = None
    annotator_activation: list | None = None

    @property
    def corpus_tag(self):
        return "labeled" if self.annotator_valence is not None else "unlabeled"

    def validate(self):
        duration = len(self.samples) / SAMPLE_RATE
        for token, start, end in self.words:
            if not (start < end):
                raise IngestionError(f"{self.id}: word '{token}' has start >= end")
            if start < 0 or end > duration + 1e-6:
                raise IngestionError(
                    f"{self.id}: word '{token}' outside audio duration {duration:.3f}s")
        if (self.annotator_valence is None) != (self.annotator_activation is None):
            raise IngestionError(
                f"{self.id}: labeled utterances need both valence and activation ratings")
        return self


@dataclass
class Spectrogram:
    """frames x 128 magnitude matrix, values normalized to [-1, 1]."""

    values: np.ndarray
    utterance_id: str = ""
    frame_hop_sec: float = FRAME_HOP_SEC

    @property
    def frames(self):
        return self.values.shape[0]

    @property
    def bands(self):
        return self.values.shape[1]


# -- WAV I/O ------------------------------------------------------------------


def load_wav(path):
    """Read a 16-bit mono 16 kHz PCM WAV into float samples in [-1, 1]."""
    with wave.open(str(path), "rb") as wav:
        if wav.getframerate() != SAMPLE_RATE:
            raise IngestionError(
                f"{path}: sample rate {wav.getframerate()} != {SAMPLE_RATE}")
        if wav.getnchannels() != 1:
            raise IngestionError(f"{path}: {wav.getnchannels()} channels, expected mono")
        if wav.getsampwidth() != 2:
            raise IngestionError(
                f"{path}: sample width {wav.getsampwidth() * 8} bits, expected 16")
        raw = wav.readframes(wav.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0


def save_wav(path, samples):
    """Write float samples in [-1, 1] as 16-bit mono 16 kHz PCM."""
    pcm = np.clip(np.asarray(samples) * 32768.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(SAMPLE_RATE)
        wav.writeframes(pcm.tobytes())


# -- STFT ---------------------------------------------------------------------


def stft_bands(samples):
    """Raw log-magnitude band matrix (frames x 128), before normalization."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < WINDOW:
        raise IngestionError(
            f"clip of {len(samples)} samples is shorter than one {WINDOW}-sample window")
    n_frames = 1 + (len(samples) - WINDOW) // HOP
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(WINDOW) / WINDOW)
    idx = np.arange(WINDOW)[None, :] + HOP * np.arange(n_frames)[:, None]
    frames = samples[idx] * window
    mags = np.abs(np.fft.rfft(frames, axis=1))  # 513 bins, 0-8 kHz
    bands = mags[:, :512].reshape(n_frames, BANDS, 4).mean(axis=2)
    return np.log1p(bands)


class SpectrogramNormalizer:
    """Affine map of log magnitudes onto [-1, 1] from corpus percentiles."""

    def __init__(self, lo=0.0, hi=1.0):
        self.lo = float(lo)
        self.hi = float(hi)

    @classmethod
    def fit(cls, band_matrices):
        values = np.concatenate([m.ravel() for m in band_matrices])
        lo, hi = np.percentile(values, [1.0, 99.0])
        if hi <= lo:
            hi = lo + 1.0
        return cls(lo, hi)

    def apply(self, bands):
        scaled = 2.0 * (bands - self.lo) / (self.hi - self.lo) - 1.0
        return np.clip(scaled, -1.0, 1.0)

    def to_dict(self):
        return {"lo": self.lo, "hi": self.hi}

    @classmethod
    def from_dict(cls, d):
        return cls(d["lo"], d["hi"])


def stft_spectrogram(samples, normalizer, utterance_id=""):
    """Full preprocessing of one clip into a normalized Spectrogram."""
    values = normalizer.apply(stft_bands(samples)).astype(np.float32)
    return Spectrogram(values=values, utterance_id=utterance_id)


# -- cropping -----------------------------------------------------------------


def word_centered_crop(spec, words, crop_width, rng):
    """Fixed-width crop centered inside a random transcript word.

    Returns a (crop_width, 128) array; frames outside the clip are padded
    with the normalization minimum. An empty transcript falls back to a
    uniform random center over the whole clip.
    """
    n = spec.frames
    if words:
        token, start, end = words[int(rng.integers(len(words)))]
        center_sec = start + (end - start) * rng.random()
        center = int(center_sec / spec.frame_hop_sec)
        center = min(max(center, 0), n - 1)
    else:
        log.debug("empty transcript for %s; uniform random crop", spec.utterance_id)
        center = int(rng.integers(n))
    lo = center - crop_width // 2
    hi = lo + crop_width
    crop = np.full((crop_width, BANDS), PAD_VALUE, dtype=spec.values.dtype)
    src_lo, src_hi = max(lo, 0), min(hi, n)
    if src_lo < src_hi:
        crop[src_lo - lo:src_hi - lo] = spec.values[src_lo:src_hi]
    return crop


# -- corpus manifest ----------------------------------------------------------


@dataclass
class ManifestEntry:
    """One utterance as recorded in the JSON-lines corpus manifest."""

    id: str
    wav: str
    transcript: str
    session: str
    speaker: str
    valence: list | None = None
    activation: list | None = None

    @property
    def labeled(self):
        return self.valence is not None


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entries.append(ManifestEntry(
                    id=obj["id"], wav=obj["wav"], transcript=obj["transcript"],
                    session=obj["session"], speaker=obj["speaker"],
                    valence=obj.get("valence"), activation=obj.get("activation")))
            except (KeyError, json.JSONDecodeError) as exc:
                raise IngestionError(f"{path}:{line_no}: bad manifest line: {exc}") from exc
    return entries


def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps({
                "id": e.id, "wav": e.wav, "transcript": e.transcript,
                "session": e.session, "speaker": e.speaker,
                "valence": e.valence, "activation": e.activation,
            }) + "\n")


def read_transcript(path):
    """JSON-lines transcript: one {"t","s","e"} object per word."""
    words = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                words.append((obj["t"], float(obj["s"]), float(obj["e"])))
            except (KeyError, json.JSONDecodeError, TypeError) as exc:
                raise IngestionError(f"{path}:{line_no}: bad transcript line: {exc}") from exc
    return words


def write_transcript(path, words):
    with open(path, "w") as fh:
        for token, start, end in words:
            fh.write(json.dumps({"t": token, "s": start, "e": end}) + "\n")


def load_utterance(entry, base_dir="."):
    base = Path(base_dir)
    return Utterance(
        id=entry.id,
        samples=load_wav(base / entry.wav),
        words=read_transcript(base / entry.transcript),
        session_id=entry.session,
        speaker_id=entry.speaker,
        annotator_valence=entry.valence,
        annotator_activation=entry.activation,
    ).validate()


# -- spectrogram cache ("VGS1") -------------------------------------------------


def save_spectrogram(path, values):
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[1] != BANDS:
        raise IngestionError(f"cache expects frames x {BANDS}, got {values.shape}")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", values.shape[0], values.shape[1]))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_spectrogram(path, utterance_id=""):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise IngestionError(f"{path}: bad cache magic {magic!r}")
        frames, bands = struct.unpack("<II", fh.read(8))
        if bands != BANDS:
            raise IngestionError(f"{path}: cache has {bands} bands, expected {BANDS}")
        values = np.frombuffer(fh.read(4 * frames * bands), dtype="<f4")
    return Spectrogram(values=values.reshape(frames, bands).copy(),
                       utterance_id=utterance_id)
