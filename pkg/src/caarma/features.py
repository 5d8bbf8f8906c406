"""Log-mel filterbank front end and a procedural corpus of synthetic speakers.

No voice activity detection and no augmentation happen anywhere here.
"""

from __future__ import annotations

import functools
import hashlib
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import ExperimentConfig, ManifestEntry, write_manifest
from .errors import TooShortError, ValidationError

LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class FbankMatrix:
    frames: np.ndarray  # [T, n_mels] float64
    frame_rate: float

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@functools.lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filters on the rfft bin grid, shape [n_fft // 2 + 1, n_mels]."""
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    edges = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins[None, :] - lo) / (mid - lo)
    down = (hi - bins[None, :]) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.setflags(write=False)
    return fb.T


@functools.lru_cache(maxsize=8)
def _hamming(n: int) -> np.ndarray:
    w = np.hamming(n)
    w.setflags(write=False)
    return w


def extract_fbank(waveform, cfg: ExperimentConfig) -> FbankMatrix:
    """Log-mel energies of ``waveform`` framed with the configured window and hop.

    Frame count is ``1 + (len - window) // hop``; the last partial frame is dropped.
    """
    x = np.asarray(waveform, dtype=np.float64)
    win, hop = cfg.window_samples, cfg.hop_samples
    if x.ndim != 1 or x.shape[0] < win:
        raise TooShortError(f"need at least {win} samples, got {x.shape[-1] if x.ndim else 0}")
    n_frames = 1 + (x.shape[0] - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    spec = np.fft.rfft(frames * _hamming(win), n=cfg.n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(cfg.sample_rate, cfg.n_fft, cfg.fbank_dims, cfg.mel_fmin, cfg.mel_fmax)
    energies = power @ fb
    return FbankMatrix(np.log(np.maximum(energies, LOG_FLOOR)), cfg.sample_rate / hop)


def random_segment(waveform, cfg: ExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    """Fixed-length crop at a random offset; short inputs are wrap-padded from offset 0."""
    x = np.asarray(waveform)
    n = cfg.segment_samples
    if x.shape[0] < n:
        reps = -(-n // x.shape[0])
        return np.tile(x, reps)[:n]
    offset = int(rng.integers(0, x.shape[0] - n + 1))
    return x[offset:offset + n]


# -- synthetic speakers -----------------------------------------------------------

_FORMANT_RANGES = ((300.0, 800.0), (900.0, 2300.0), (2400.0, 3400.0), (3500.0, 4300.0))
_FORMANT_GAINS = np.array([1.0, 0.7, 0.45, 0.3])
_CONTROL_HOP = 80  # samples between envelope control points
_KNOT_S = 0.12  # spacing of the slow random contours


@dataclass(frozen=True)
class SyntheticSpeakerSpec:
    speaker_id: int
    fundamental_hz: float
    formant_hz: tuple[float, ...]
    jitter: float
    breathiness: float = 0.1

    def __post_init__(self):
        if self.fundamental_hz <= 0:
            raise ValidationError("fundamental_hz", "must be positive")
        if any(b <= a for a, b in zip(self.formant_hz, self.formant_hz[1:])):
            raise ValidationError("formant_hz", "must be strictly increasing")


def speaker_spec(seed: int, speaker_id: int) -> SyntheticSpeakerSpec:
    rng = np.random.default_rng([seed, speaker_id])
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(255.0))))
    formants = tuple(float(rng.uniform(lo, hi)) for lo, hi in _FORMANT_RANGES)
    return SyntheticSpeakerSpec(
        speaker_id=speaker_id,
        fundamental_hz=f0,
        formant_hz=formants,
        jitter=float(rng.uniform(0.03, 0.06)),
        breathiness=float(rng.uniform(0.05, 0.3)),
    )


def _envelope(freqs: np.ndarray, formants: np.ndarray) -> np.ndarray:
    """Spectral envelope at ``freqs`` [..., K] for formant tracks ``formants`` [..., F]."""
    bw = 50.0 + 0.05 * formants
    dev = (freqs[..., :, None] - formants[..., None, :]) / bw[..., None, :]
    peaks = (_FORMANT_GAINS[: formants.shape[-1]] / np.sqrt(1.0 + dev ** 2)).sum(-1)
    return peaks / (1.0 + freqs / 1000.0)


def _contour(rng, n_knots: int, n_points: int, sigma: float, dims: int = 1) -> np.ndarray:
    knots = rng.normal(0.0, sigma, size=(n_knots, dims))
    grid = np.linspace(0, n_knots - 1, n_points)
    return np.stack([np.interp(grid, np.arange(n_knots), knots[:, k]) for k in range(dims)], -1)


def synthesize_utterance(spec: SyntheticSpeakerSpec, utt_index: int, cfg: ExperimentConfig,
                         seed: int) -> np.ndarray:
    """One utterance of ``spec`` as int16 PCM.

    Harmonic source on a jittered pitch contour, shaped by slowly moving formants,
    plus formant-filtered noise. Fully determined by (seed, speaker, utterance).
    """
    rng = np.random.default_rng([seed, spec.speaker_id, utt_index, 1])
    sr = cfg.sample_rate
    n = int(round(cfg.corpus_utt_s * sr))
    n_ctrl = n // _CONTROL_HOP + 2
    n_knots = max(2, int(cfg.corpus_utt_s / _KNOT_S) + 2)
    j = spec.jitter

    # per-utterance offsets plus slow within-utterance wander
    f0_track = spec.fundamental_hz * np.exp(rng.normal(0.0, j) + _contour(rng, n_knots, n_ctrl, j)[:, 0])
    formant_shift = rng.normal(0.0, j, size=len(spec.formant_hz))
    formant_track = np.asarray(spec.formant_hz) * np.exp(
        formant_shift + _contour(rng, n_knots, n_ctrl, 1.5 * j, dims=len(spec.formant_hz)))
    formant_track = np.sort(formant_track, axis=-1)
    loudness = np.exp(_contour(rng, n_knots, n_ctrl, 0.5)[:, 0])

    ctrl_pos = np.arange(n_ctrl) * _CONTROL_HOP
    t = np.arange(n)
    f0 = np.interp(t, ctrl_pos, f0_track)
    phase = 2.0 * np.pi * np.cumsum(f0) / sr

    n_harm = max(1, int(5000.0 / spec.fundamental_hz))
    k = np.arange(1, n_harm + 1)
    harm_freqs = f0_track[:, None] * k[None, :]
    amps = _envelope(harm_freqs, formant_track) * loudness[:, None]
    amps[harm_freqs >= 0.45 * sr] = 0.0
    offsets = rng.uniform(0, 2 * np.pi, size=n_harm)
    voiced = np.zeros(n)
    for h in range(n_harm):
        voiced += np.interp(t, ctrl_pos, amps[:, h]) * np.sin(k[h] * phase + offsets[h])

    noise = rng.normal(size=n)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spectrum *= _envelope(freqs, np.asarray(spec.formant_hz))
    shaped = np.fft.irfft(spectrum, n=n) * np.interp(t, ctrl_pos, loudness)
    shaped *= spec.breathiness * voiced.std() / (shaped.std() + 1e-12)

    x = voiced + shaped
    x *= 0.5 / (np.abs(x).max() + 1e-12)
    return np.round(x * 32767).astype(np.int16)


def pcm_to_float(pcm: np.ndarray) -> np.ndarray:
    return pcm.astype(np.float32) / 32768.0


# -- corpus files -----------------------------------------------------------------


def generator_source(seed: int, speaker_id: int, utt_index: int) -> str:
    return f"gen:{seed}:{speaker_id}:{utt_index}"


def utterance_id(speaker_id: int, utt_index: int) -> str:
    return f"spk{speaker_id:04d}-utt{utt_index:03d}"


def speaker_label(speaker_id: int) -> str:
    return f"spk{speaker_id:04d}"


def generate_corpus(n_speakers: int, utts_per_speaker: int, cfg: ExperimentConfig, seed: int,
                    first_speaker: int = 0):
    """Manifest entries and int16 waveforms for a block of generated speakers.

    Sources are generator specs, so the manifest alone can regenerate the audio.
    """
    if n_speakers < 2:
        raise ValueError("need at least two speakers")
    entries, waves = [], {}
    for spk in range(first_speaker, first_speaker + n_speakers):
        spec = speaker_spec(seed, spk)
        for u in range(utts_per_speaker):
            uid = utterance_id(spk, u)
            entries.append(ManifestEntry(uid, speaker_label(spk), generator_source(seed, spk, u)))
            waves[uid] = synthesize_utterance(spec, u, cfg, seed)
    return entries, waves


def write_wav(path, pcm: np.ndarray, sample_rate: int) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(np.ascontiguousarray(pcm, dtype="<i2").tobytes())


def read_wav(path, sample_rate: int | None = None) -> np.ndarray:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        if sample_rate is not None and fh.getframerate() != sample_rate:
            raise ValueError(f"{path}: sample rate {fh.getframerate()} != {sample_rate}")
        data = fh.readframes(fh.getnframes())
    return np.frombuffer(data, dtype="<i2").astype(np.int16)


def write_corpus(entries, waves, out_dir, manifest_name="manifest.txt", sample_rate=16000):
    """Write wav files under ``out_dir/wav`` and a manifest pointing at them.

    Returns (manifest path, sha256 over manifest and audio bytes).
    """
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    digest = hashlib.sha256()
    file_entries = []
    for e in entries:
        rel = f"wav/{e.utt_id}.wav"
        write_wav(out / rel, waves[e.utt_id], sample_rate)
        file_entries.append(ManifestEntry(e.utt_id, e.speaker, rel))
    manifest = out / manifest_name
    write_manifest(file_entries, manifest)
    digest.update(manifest.read_bytes())
    for e in file_entries:
        digest.update((out / e.source).read_bytes())
    return manifest, digest.hexdigest()


def load_waveform(source: str, cfg: ExperimentConfig, root=None) -> np.ndarray:
    """Float waveform for a manifest source (wav path or ``gen:seed:speaker:utt``)."""
    if source.startswith("gen:"):
        _, seed, spk, utt = source.split(":")
        spec = speaker_spec(int(seed), int(spk))
        pcm = synthesize_utterance(spec, int(utt), cfg, int(seed))
    else:
        path = Path(source)
        if root is not None and not path.is_absolute():
            path = Path(root) / path
        pcm = read_wav(path, cfg.sample_rate)
    return pcm_to_float(pcm)
