"""Audio ingestion, log-mel filterbank extraction, and feature-set persistence.

All feature extraction is pure per utterance, so utterances may be processed
in parallel; loaded feature sets are immutable in practice and safe to share.
"""

from __future__ import annotations

import json
import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"MTGF"
FORMAT_VERSION = 1

DEFAULT_SAMPLE_RATE = 16_000
DEFAULT_SLICE_SECONDS = 2.0
DEFAULT_WINDOW_SECONDS = 0.025
DEFAULT_N_FFT = 512
DEFAULT_N_MELS = 128
DEFAULT_N_FRAMES = 128

# Floor applied to filterbank energies before the log.
LOG_FLOOR = 1e-10
# Slices with standard deviation below this are left unscaled (silence guard).
STD_GUARD = 1e-8


class FeatureError(ValueError):
    """Malformed audio input or invalid feature configuration."""


class FeatureFileError(ValueError):
    """A feature container could not be parsed."""


@dataclass
class Utterance:
    """A mono waveform with amplitude in [-1, 1] plus its identity labels."""

    samples: np.ndarray
    sample_rate: int
    speaker_id: str
    utterance_id: str

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise FeatureError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise FeatureError(f"expected mono waveform, got shape {self.samples.shape}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FbankSlice:
    """One normalized log-mel matrix (frames x mel bins) with its labels."""

    matrix: np.ndarray
    speaker_id: str
    utterance_id: str
    slice_index: int = 0

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise FeatureError(f"slice matrix must be 2-D, got shape {self.matrix.shape}")
        if self.slice_index < 0:
            raise FeatureError(f"slice_index must be >= 0, got {self.slice_index}")


@dataclass
class FeatureSet:
    """A collection of slices plus a contiguous speaker -> class-label index."""

    slices: list[FbankSlice]
    speaker_index: dict[str, int]
    tag: str = "features"

    @classmethod
    def from_slices(cls, slices: Iterable[FbankSlice], tag: str = "features") -> "FeatureSet":
        slices = list(slices)
        speakers = sorted({s.speaker_id for s in slices})
        index = {spk: i for i, spk in enumerate(speakers)}
        return cls(slices=slices, speaker_index=index, tag=tag)

    @property
    def n_classes(self) -> int:
        return len(self.speaker_index)

    def labels(self) -> np.ndarray:
        return np.array([self.speaker_index[s.speaker_id] for s in self.slices], dtype=np.int64)

    def matrices(self) -> np.ndarray:
        return np.stack([s.matrix for s in self.slices]) if self.slices else np.zeros((0, 0, 0), np.float32)

    def by_speaker(self) -> dict[str, list[int]]:
        groups: dict[str, list[int]] = {spk: [] for spk in self.speaker_index}
        for i, s in enumerate(self.slices):
            groups[s.speaker_id].append(i)
        return groups

    def subset(self, indices: Sequence[int], tag: str | None = None) -> "FeatureSet":
        """New FeatureSet over the given slices, with a rebuilt contiguous index."""
        return FeatureSet.from_slices([self.slices[i] for i in indices], tag=tag or self.tag)

    def validate(self) -> None:
        labels = sorted(self.speaker_index.values())
        if labels != list(range(len(labels))):
            raise FeatureError(f"speaker labels are not contiguous 0..C-1: {labels}")
        for s in self.slices:
            if s.speaker_id not in self.speaker_index:
                raise FeatureError(f"slice speaker {s.speaker_id!r} missing from speaker index")


def normalize_slice(matrix: np.ndarray) -> np.ndarray:
    """Zero-mean / unit-variance over the whole slice, guarding near-constant input."""
    m = np.asarray(matrix, dtype=np.float64)
    centered = m - m.mean()
    std = centered.std()
    if std < STD_GUARD:
        return centered
    return centered / std


def slice_utterance(
    utt: Utterance,
    slice_seconds: float = DEFAULT_SLICE_SECONDS,
    hop_seconds: float = DEFAULT_SLICE_SECONDS,
) -> list[np.ndarray]:
    """Cut a waveform into fixed-length segments; a short trailing remainder is dropped.

    Returns floor((len - slice) / hop) + 1 segments, or none at all when the
    utterance is shorter than one slice.
    """
    if slice_seconds <= 0 or hop_seconds <= 0:
        raise FeatureError("slice_seconds and hop_seconds must be positive")
    slice_len = int(round(slice_seconds * utt.sample_rate))
    hop_len = int(round(hop_seconds * utt.sample_rate))
    n = len(utt.samples)
    if n < slice_len or slice_len == 0:
        return []
    count = (n - slice_len) // hop_len + 1
    return [utt.samples[i * hop_len : i * hop_len + slice_len] for i in range(count)]


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters (peak 1.0) sampled at FFT bin frequencies.

    Returns an (n_mels, n_fft // 2 + 1) weight matrix.
    """
    n_bins = n_fft // 2 + 1
    bin_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lower, center, upper = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lower) / (center - lower)
        down = (upper - bin_freqs) / (upper - center)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def compute_fbank(
    segment: np.ndarray,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    n_mels: int = DEFAULT_N_MELS,
    n_frames: int = DEFAULT_N_FRAMES,
    window_seconds: float = DEFAULT_WINDOW_SECONDS,
    n_fft: int = DEFAULT_N_FFT,
) -> np.ndarray:
    """Log mel-filterbank matrix of exactly (n_frames, n_mels), slice-normalized.

    The hop is segment_length / n_frames so the frame count is exact; the tail
    is zero-padded to fit the last analysis window. Energies are floored at a
    small epsilon before the log, then the whole slice is mean/variance
    normalized.
    """
    segment = np.asarray(segment, dtype=np.float64)
    if segment.ndim != 1:
        raise FeatureError(f"segment must be 1-D, got shape {segment.shape}")
    win_len = int(round(window_seconds * sample_rate))
    if win_len > n_fft:
        raise FeatureError(f"window of {win_len} samples exceeds n_fft={n_fft}")
    if len(segment) < n_frames:
        raise FeatureError(f"segment of {len(segment)} samples too short for {n_frames} frames")
    hop_len = len(segment) // n_frames

    needed = (n_frames - 1) * hop_len + win_len
    if needed > len(segment):
        segment = np.concatenate([segment, np.zeros(needed - len(segment))])
    window = np.hamming(win_len)
    starts = np.arange(n_frames) * hop_len
    frames = np.stack([segment[s : s + win_len] for s in starts]) * window

    spectrum = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(n_mels, n_fft, sample_rate)
    energies = spectrum @ fb.T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    return normalize_slice(logmel).astype(np.float32)


def extract_features(
    utterances: Iterable[Utterance],
    slice_seconds: float = DEFAULT_SLICE_SECONDS,
    hop_seconds: float | None = None,
    sample_rate: int | None = None,
    n_mels: int = DEFAULT_N_MELS,
    n_frames: int = DEFAULT_N_FRAMES,
) -> FeatureSet:
    """Slice every utterance and extract one FbankSlice per segment."""
    hop_seconds = slice_seconds if hop_seconds is None else hop_seconds
    slices: list[FbankSlice] = []
    for utt in utterances:
        sr = sample_rate or utt.sample_rate
        if sr != utt.sample_rate:
            raise FeatureError(
                f"utterance {utt.utterance_id!r} has sample rate {utt.sample_rate}, expected {sr}"
            )
        for k, segment in enumerate(slice_utterance(utt, slice_seconds, hop_seconds)):
            matrix = compute_fbank(segment, sample_rate=sr, n_mels=n_mels, n_frames=n_frames)
            slices.append(FbankSlice(matrix, utt.speaker_id, utt.utterance_id, slice_index=k))
    return FeatureSet.from_slices(slices)


def make_synthetic_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    seed: int,
    *,
    n_frames: int = DEFAULT_N_FRAMES,
    n_mels: int = DEFAULT_N_MELS,
    n_formants: int = 4,
    formant_grid: int = 7,
    jitter: float = 1.2,
    envelope_depth: float = 0.25,
    noise_scale: float = 0.5,
) -> FeatureSet:
    """Deterministic desk-scale corpus rendered directly as feature slices.

    Each speaker gets a persistent spectral template built from a few
    formant-like Gaussian band profiles; every utterance perturbs the formant
    positions and amplitudes, applies a slow temporal envelope, and adds
    broadband noise. Same seed, same corpus, bit for bit.
    """
    if n_speakers < 2:
        raise FeatureError(f"need at least 2 speakers, got {n_speakers}")
    if utts_per_speaker < 1:
        raise FeatureError(f"utts_per_speaker must be >= 1, got {utts_per_speaker}")
    rng = np.random.default_rng(seed)
    mel_axis = np.arange(n_mels, dtype=np.float64)
    grid = np.arange(6, n_mels - 6, formant_grid, dtype=np.float64)

    templates = []
    for _ in range(n_speakers):
        centers = rng.choice(grid, size=n_formants, replace=False)
        widths = rng.uniform(2.0, 6.0, size=n_formants)
        amps = rng.uniform(0.6, 1.4, size=n_formants)
        templates.append((centers, widths, amps))

    slices: list[FbankSlice] = []
    t_axis = np.arange(n_frames, dtype=np.float64)
    for spk in range(n_speakers):
        centers, widths, amps = templates[spk]
        speaker_id = f"spk{spk:03d}"
        for u in range(utts_per_speaker):
            c = centers + rng.normal(0.0, jitter, size=n_formants)
            a = amps * rng.uniform(0.8, 1.25, size=n_formants)
            profile = np.zeros(n_mels)
            for j in range(n_formants):
                profile += a[j] * np.exp(-0.5 * ((mel_axis - c[j]) / widths[j]) ** 2)
            envelope = np.ones(n_frames)
            for h in (1, 2, 3):
                envelope += (
                    envelope_depth
                    / h
                    * rng.uniform(0.5, 1.0)
                    * np.sin(2 * np.pi * h * t_axis / n_frames + rng.uniform(0, 2 * np.pi))
                )
            matrix = np.outer(envelope, profile)
            matrix += noise_scale * rng.standard_normal((n_frames, n_mels))
            slices.append(
                FbankSlice(
                    normalize_slice(matrix).astype(np.float32),
                    speaker_id=speaker_id,
                    utterance_id=f"{speaker_id}-u{u:03d}",
                )
            )
    return FeatureSet.from_slices(slices)


# ---------------------------------------------------------------------------
# Container persistence
#
# Layout: magic "MTGF", version u16, tag (u16 length + ascii bytes),
# n_slices/n_frames/n_mels u32, then all matrices as little-endian float32
# in slice order, then a JSON index of speaker/utterance metadata to EOF.
# ---------------------------------------------------------------------------

_HEAD = struct.Struct("<4sHH")
_COUNTS = struct.Struct("<III")


def save_features(fs: FeatureSet, path: str | Path) -> None:
    """Write a feature container; round-trips bit-exactly through load_features."""
    fs.validate()
    path = Path(path)
    if fs.slices:
        n_frames, n_mels = fs.slices[0].matrix.shape
    else:
        n_frames = n_mels = 0
    tag_bytes = fs.tag.encode("ascii")
    blob = bytearray()
    blob += _HEAD.pack(MAGIC, FORMAT_VERSION, len(tag_bytes))
    blob += tag_bytes
    blob += _COUNTS.pack(len(fs.slices), n_frames, n_mels)
    for s in fs.slices:
        if s.matrix.shape != (n_frames, n_mels):
            raise FeatureFileError(
                f"inconsistent slice shape {s.matrix.shape}, expected {(n_frames, n_mels)}"
            )
        blob += np.ascontiguousarray(s.matrix, dtype="<f4").tobytes()
    index = {
        "speaker_index": fs.speaker_index,
        "slices": [
            {"speaker_id": s.speaker_id, "utterance_id": s.utterance_id, "slice_index": s.slice_index}
            for s in fs.slices
        ],
    }
    blob += json.dumps(index, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(blob))
    tmp.replace(path)


def load_features(path: str | Path) -> FeatureSet:
    """Read a feature container written by save_features.

    Raises FeatureFileError naming the byte offset of the first problem.
    """
    data = Path(path).read_bytes()
    off = 0
    if len(data) < _HEAD.size:
        raise FeatureFileError(f"truncated header at offset {len(data)}: need {_HEAD.size} bytes")
    magic, version, tag_len = _HEAD.unpack_from(data, off)
    if magic != MAGIC:
        raise FeatureFileError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"unsupported version {version} at offset 4")
    off = _HEAD.size
    if len(data) < off + tag_len + _COUNTS.size:
        raise FeatureFileError(f"truncated tag/counts at offset {len(data)}")
    tag = data[off : off + tag_len].decode("ascii")
    off += tag_len
    n_slices, n_frames, n_mels = _COUNTS.unpack_from(data, off)
    off += _COUNTS.size

    matrix_bytes = n_frames * n_mels * 4
    matrices = []
    for i in range(n_slices):
        if len(data) < off + matrix_bytes:
            raise FeatureFileError(
                f"truncated matrix block at offset {off}: slice {i} needs {matrix_bytes} bytes,"
                f" only {len(data) - off} remain"
            )
        m = np.frombuffer(data, dtype="<f4", count=n_frames * n_mels, offset=off)
        matrices.append(m.reshape(n_frames, n_mels).copy())
        off += matrix_bytes

    try:
        index = json.loads(data[off:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FeatureFileError(f"unparseable metadata index at offset {off}: {exc}") from exc
    meta = index.get("slices")
    speaker_index = index.get("speaker_index")
    if meta is None or speaker_index is None or len(meta) != n_slices:
        raise FeatureFileError(f"metadata index at offset {off} does not match {n_slices} slices")
    slices = [
        FbankSlice(m, rec["speaker_id"], rec["utterance_id"], rec["slice_index"])
        for m, rec in zip(matrices, meta)
    ]
    fs = FeatureSet(slices=slices, speaker_index={k: int(v) for k, v in speaker_index.items()}, tag=tag)
    try:
        fs.validate()
    except FeatureError as exc:
        raise FeatureFileError(f"invalid metadata index at offset {off}: {exc}") from exc
    return fs


def read_wav(path: str | Path, speaker_id: str | None = None, utterance_id: str | None = None) -> Utterance:
    """Load a mono 16-bit PCM WAV file. Stereo and other sample widths are rejected."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            n_channels = w.getnchannels()
            sampwidth = w.getsampwidth()
            sample_rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FeatureError(f"cannot read WAV {path}: {exc}") from exc
    if n_channels != 1:
        raise FeatureError(f"{path}: {n_channels}-channel audio rejected, mono required")
    if sampwidth != 2:
        raise FeatureError(f"{path}: only 16-bit PCM supported, got {8 * sampwidth}-bit")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Utterance(
        samples=samples,
        sample_rate=sample_rate,
        speaker_id=speaker_id if speaker_id is not None else path.parent.name,
        utterance_id=utterance_id if utterance_id is not None else path.stem,
    )


def read_wav_tree(root: str | Path) -> list[Utterance]:
    """Read root/<speaker>/<utterance>.wav into utterances, sorted for determinism."""
    root = Path(root)
    utts = []
    for wav in sorted(root.glob("*/*.wav")):
        utts.append(read_wav(wav, speaker_id=wav.parent.name, utterance_id=f"{wav.parent.name}/{wav.stem}"))
    if not utts:
        raise FeatureError(f"no <speaker>/<utterance>.wav files found under {root}")
    return utts
