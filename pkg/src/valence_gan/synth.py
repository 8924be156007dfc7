"""Deterministic synthetic corpus standing in for the licensed speech data.

Each clip is a harmonic tone stack whose spectral tilt is monotone in its
true valence class (so classes are separable by band-energy ratio) and
whose overall energy is monotone in activation. Word alignments tile the
clip, and three simulated annotators rate each labeled clip with discrete
+-0.5 noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio

# Spectral tilt per valence class: harmonic h gets amplitude h**(-tilt).
# Strictly decreasing tilt moves energy into higher bands as valence rises.
TILTS = {1: 3.2, 2: 1.9, 3: 1.15, 4: 0.6, 5: 0.1}
ACTIVATION_GAIN = {1: 0.15, 2: 0.25, 3: 0.35, 4: 0.45, 5: 0.55}
F0_RANGE = (110.0, 150.0)
MAX_HARMONIC_HZ = 6000.0
WORD_SEC = 0.25


@dataclass
class SynthSpec:
    n_sessions: int = 5
    speakers_per_session: int = 2
    labeled_per_speaker: int = 15
    unlabeled_clips: int = 24
    duration_range: tuple = (1.0, 4.0)
    seed: int = 0


def synth_clip(valence, activation, duration, rng):
    """One harmonic tone stack as float samples in [-1, 1]."""
    n = int(duration * audio.SAMPLE_RATE)
    t = np.arange(n) / audio.SAMPLE_RATE
    f0 = rng.uniform(*F0_RANGE)
    tilt = TILTS[valence]
    wave = np.zeros(n)
    h = 1
    while h * f0 < MAX_HARMONIC_HZ:
        phase = rng.uniform(0.0, 2.0 * np.pi)
        wave += h ** (-tilt) * np.sin(2.0 * np.pi * h * f0 * t + phase)
        h += 1
    wave /= np.max(np.abs(wave))
    return (ACTIVATION_GAIN[activation] * wave).astype(np.float32)


def _tile_words(duration):
    words = []
    start = 0.0
    i = 0
    while start + WORD_SEC <= duration:
        words.append((f"w{i:03d}", round(start, 4), round(start + WORD_SEC, 4)))
        start += WORD_SEC
        i += 1
    if not words:  # clip shorter than one word
        words.append(("w000", 0.0, round(duration, 4)))
    return words


def _annotate(true_rating, rng):
    noise = rng.choice([-0.5, 0.0, 0.5], size=3)
    return [float(np.clip(true_rating + d, 1.0, 5.0)) for d in noise]


def generate(spec, out_dir):
    """Write wavs, transcripts, and a manifest; returns the manifest path.

    Byte-identical output for identical specs.
    """
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    (out_dir / "transcripts").mkdir(parents=True, exist_ok=True)
    entries = []
    clip_index = 0

    def emit(clip_id, session, speaker, valence_true, activation_true, rng):
        duration = rng.uniform(*spec.duration_range)
        samples = synth_clip(valence_true, activation_true, duration, rng)
        words = _tile_words(len(samples) / audio.SAMPLE_RATE)
        wav_rel = f"wavs/{clip_id}.wav"
        tr_rel = f"transcripts/{clip_id}.jsonl"
        audio.save_wav(out_dir / wav_rel, samples)
        audio.write_transcript(out_dir / tr_rel, words)
        entry = audio.ManifestEntry(
            id=clip_id, wav=wav_rel, transcript=tr_rel,
            session=session, speaker=speaker)
        if valence_true is not None and session != "U":
            entry.valence = _annotate(valence_true, rng)
            entry.activation = _annotate(activation_true, rng)
        entries.append(entry)

    for s in range(1, spec.n_sessions + 1):
        session = f"s{s:02d}"
        for sp in range(spec.speakers_per_session):
            speaker = f"{session}_spk{chr(ord('A') + sp)}"
            for c in range(spec.labeled_per_speaker):
                rng = np.random.default_rng([spec.seed, clip_index])
                clip_index += 1
                valence = c % 5 + 1
                activation = int(rng.integers(1, 6))
                emit(f"{speaker}_{c:03d}", session, speaker, valence, activation, rng)

    for c in range(spec.unlabeled_clips):
        rng = np.random.default_rng([spec.seed, clip_index])
        clip_index += 1
        valence = int(rng.integers(1, 6))
        activation = int(rng.integers(1, 6))
        emit(f"unl_{c:03d}", "U", "u1", valence, activation, rng)

    manifest_path = out_dir / "manifest.jsonl"
    audio.write_manifest(manifest_path, entries)
    return manifest_path


def band_energy_ratio(bands):
    """High/low band energy ratio of a raw log-band matrix; rises with valence."""
    profile = np.expm1(bands).mean(axis=0)
    low = profile[:32].sum()
    high = profile[32:].sum()
    return float(high / max(low, 1e-12))


def centroid_accuracy(manifest_path):
    """5-class accuracy of a nearest-centroid rule on mean band energies.

    A sanity bound: if this is high and a trained classifier fails, the
    failure is in the pipeline, not the task.
    """
    from .labels import encode

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    entries = [e for e in audio.read_manifest(manifest_path) if e.labeled]
    feats, klass = [], []
    for e in entries:
        utt = audio.load_utterance(e, base)
        bands = audio.stft_bands(utt.samples)
        profile = np.expm1(bands).mean(axis=0)
        # Pool to 16 coarse bands so harmonic comb positions (which move
        # with f0) average out, leaving only the spectral tilt.
        profile = profile.reshape(16, -1).sum(axis=1)
        feats.append(profile / max(profile.sum(), 1e-12))  # energy-normalized
        klass.append(encode(float(np.mean(e.valence))).primary_class())
    feats = np.array(feats)
    klass = np.array(klass)
    centroids = np.stack([feats[klass == c].mean(axis=0) for c in range(1, 6)])
    pred = 1 + np.argmin(
        ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2), axis=1)
    return float((pred == klass).mean())
