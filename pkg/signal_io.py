#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
NFSep - Signal I/O

WAV reading/writing, short-time Fourier analysis and overlap-add synthesis,
and conversion of STFT magnitudes to the "sound quanta" counts consumed by
every inference engine.

Conventions:
- Spectrogram matrices are frequency x time (L rows, T columns)
- Frame t starts at sample t * hop_length; no boundary padding
- L = fft_length // 2 + 1 non-negative frequency bins
"""

import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np
import soundfile as sf
from scipy.signal import check_COLA, check_NOLA, get_window

from nfsep_common import (
    AudioIOError,
    ValidationError,
    log_warn,
    read_container,
    split_payload,
    write_container,
)

DEFAULT_SAMPLE_RATE = 16000

# 64ms window / 16ms hop at 16 kHz
DEFAULT_WINDOW_LENGTH = 1024
DEFAULT_HOP_LENGTH = 256

# WAV subtypes accepted by load_wav
SUPPORTED_SUBTYPES = {"PCM_16", "PCM_24", "PCM_32", "FLOAT", "DOUBLE"}

SPECTROGRAM_MAGIC = b"NFSPEC01"


class WindowKind(Enum):
    HANN = "hann"
    HAMMING = "hamming"
    RECTANGULAR = "boxcar"


# Stable integer codes for the spectrogram container header
WINDOW_CODES = {kind: code for code, kind in enumerate(WindowKind)}


# ============================================================
# Types
# ============================================================


@dataclass(frozen=True, eq=False)
class TimeSignal:
    """Mono audio samples with their sample rate"""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValidationError("TimeSignal samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValidationError(f"Invalid sample rate: {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("TimeSignal contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def rms(self) -> float:
        if self.samples.size == 0:
            return 0.0
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis settings; fft_length defaults to window_length"""

    window_length: int = DEFAULT_WINDOW_LENGTH
    hop_length: int = DEFAULT_HOP_LENGTH
    window_kind: WindowKind = WindowKind.HANN
    fft_length: Optional[int] = None

    def __post_init__(self):
        kind = self.window_kind
        if not isinstance(kind, WindowKind):
            try:
                kind = WindowKind(kind)
            except ValueError:
                raise ValidationError(f"Unknown window kind: {kind}") from None
            object.__setattr__(self, "window_kind", kind)
        if self.fft_length is None:
            object.__setattr__(self, "fft_length", self.window_length)

        if not 0 < self.hop_length <= self.window_length <= self.fft_length:
            raise ValidationError(
                "Need 0 < hop_length <= window_length <= fft_length, got "
                f"hop={self.hop_length}, window={self.window_length}, fft={self.fft_length}"
            )

        window = self.window()
        noverlap = self.window_length - self.hop_length
        if not check_COLA(window, self.window_length, noverlap):
            raise ValidationError(
                f"{self.window_kind.value} window of {self.window_length} samples "
                f"is not COLA at hop {self.hop_length}"
            )
        if not check_NOLA(window, self.window_length, noverlap):
            raise ValidationError("Window overlap-add normaliser vanishes")

    @property
    def n_bins(self) -> int:
        return self.fft_length // 2 + 1

    def window(self) -> np.ndarray:
        """Periodic analysis window (fftbins=True)"""
        return get_window(self.window_kind.value, self.window_length, fftbins=True)

    @classmethod
    def for_bins(cls, n_bins: int, overlap: int = 4) -> "StftConfig":
        """Hann config whose spectrogram has n_bins rows"""
        window_length = 2 * (n_bins - 1)
        if window_length <= 0 or window_length % overlap:
            overlap = 2
        return cls(window_length=window_length, hop_length=window_length // overlap)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    """STFT bins (L x T) with the config and sample rate that produced them"""

    bins: np.ndarray
    config: StftConfig
    sample_rate: int
    signal_length: Optional[int] = None

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[0] != self.config.n_bins:
            raise ValidationError(
                f"Spectrogram shape {bins.shape} does not match "
                f"{self.config.n_bins} bins from the config"
            )
        if not np.all(np.isfinite(bins)):
            raise ValidationError("Spectrogram contains non-finite bins")
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self):
        return self.bins.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    def phase(self) -> np.ndarray:
        """Unit-modulus phase factors; zero bins get phase 1"""
        mag = np.abs(self.bins)
        phase = np.ones_like(self.bins)
        nonzero = mag > 0
        phase[nonzero] = self.bins[nonzero] / mag[nonzero]
        return phase


@dataclass(frozen=True, eq=False)
class CountSpectrogram:
    """Non-negative quanta V (L x T); frame totals v_t are column sums"""

    values: np.ndarray
    frame_totals: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ValidationError("CountSpectrogram must be a matrix")
        if not np.all(np.isfinite(values)):
            raise ValidationError("CountSpectrogram contains non-finite values")
        if np.any(values < 0):
            raise ValidationError("CountSpectrogram contains negative values")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "frame_totals", values.sum(axis=0))

    @property
    def n_bins(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    @property
    def total(self) -> float:
        return float(self.frame_totals.sum())

    def is_empty(self) -> bool:
        return self.values.size == 0 or self.total <= 0


# ============================================================
# WAV I/O
# ============================================================


def load_wav(path: str, channel: int = 0) -> TimeSignal:
    """
    Load one channel of a WAV file, normalized to [-1, 1].

    Multichannel files contribute only the selected channel (default 0).
    """
    if not os.path.isfile(path):
        raise AudioIOError(f"WAV file not found: {path}")

    try:
        info = sf.info(path)
    except (RuntimeError, sf.SoundFileError) as e:
        raise AudioIOError(f"Unsupported or corrupt audio file {path}: {e}") from e

    if info.format not in ("WAV", "WAVEX") or info.subtype not in SUPPORTED_SUBTYPES:
        raise AudioIOError(
            f"Unsupported encoding {info.format}/{info.subtype} in {path}"
        )
    if info.frames == 0:
        raise AudioIOError(f"Zero-length audio: {path}")
    if not 0 <= channel < info.channels:
        raise ValidationError(
            f"Channel {channel} out of range for {info.channels}-channel file {path}"
        )

    try:
        data, sample_rate = sf.read(path, dtype="float64", always_2d=True)
    except (RuntimeError, sf.SoundFileError) as e:
        raise AudioIOError(f"Cannot decode {path}: {e}") from e

    return TimeSignal(samples=data[:, channel], sample_rate=int(sample_rate))


def save_wav(path: str, signal: TimeSignal, subtype: str = "FLOAT"):
    """Write a mono WAV; integer subtypes are clipped to [-1, 1] first"""
    if subtype not in SUPPORTED_SUBTYPES:
        raise ValidationError(f"Unsupported WAV subtype: {subtype}")

    samples = signal.samples
    if subtype.startswith("PCM"):
        peak = np.max(np.abs(samples)) if samples.size else 0.0
        if peak > 1.0:
            log_warn(f"Clipping {path}: peak amplitude {peak:.3f}")
        samples = np.clip(samples, -1.0, 1.0)

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    try:
        sf.write(path, samples, signal.sample_rate, subtype=subtype, format="WAV")
    except (RuntimeError, sf.SoundFileError) as e:
        raise AudioIOError(f"Cannot write {path}: {e}") from e


def concatenate(signals) -> TimeSignal:
    """Join signals end to end; all must share a sample rate"""
    signals = list(signals)
    if not signals:
        raise ValidationError("Nothing to concatenate")
    rates = {s.sample_rate for s in signals}
    if len(rates) != 1:
        raise ValidationError(f"Mismatched sample rates: {sorted(rates)}")
    return TimeSignal(
        samples=np.concatenate([s.samples for s in signals]),
        sample_rate=signals[0].sample_rate,
    )


# ============================================================
# Short-Time Fourier Transform
# ============================================================


def stft(signal: TimeSignal, config: StftConfig) -> ComplexSpectrogram:
    """Windowed DFT of frames starting at t * hop_length"""
    n = len(signal)
    if n < config.window_length:
        raise ValidationError(
            f"Signal of {n} samples is shorter than the {config.window_length}-sample window"
        )

    frames = np.lib.stride_tricks.sliding_window_view(
        signal.samples, config.window_length
    )[:: config.hop_length]
    windowed = frames * config.window()[None, :]
    bins = np.fft.rfft(windowed, n=config.fft_length, axis=1).T

    return ComplexSpectrogram(
        bins=bins,
        config=config,
        sample_rate=signal.sample_rate,
        signal_length=n,
    )


def istft(spec: ComplexSpectrogram, length: Optional[int] = None) -> TimeSignal:
    """
    Weighted overlap-add inverse of stft.

    Each frame is inverse transformed, tapered by the window again and
    summed; the sum is divided by the overlapped squared window. Samples
    where that normaliser vanishes (window edges) are left at zero.
    """
    config = spec.config
    n_bins, n_frames = spec.bins.shape
    if n_bins != config.n_bins:
        raise ValidationError(
            f"Spectrogram has {n_bins} bins, config expects {config.n_bins}"
        )

    window = config.window()
    frames = np.fft.irfft(spec.bins.T, n=config.fft_length, axis=1)
    frames = frames[:, : config.window_length] * window[None, :]

    out_length = (n_frames - 1) * config.hop_length + config.window_length
    output = np.zeros(out_length)
    norm = np.zeros(out_length)
    squared = window**2
    for t in range(n_frames):
        start = t * config.hop_length
        output[start : start + config.window_length] += frames[t]
        norm[start : start + config.window_length] += squared

    valid = norm > 1e-10 * norm.max()
    output[valid] /= norm[valid]
    output[~valid] = 0.0

    if length is None:
        length = spec.signal_length
    if length is not None:
        if length > out_length:
            output = np.concatenate([output, np.zeros(length - out_length)])
        else:
            output = output[:length]

    return TimeSignal(samples=output, sample_rate=spec.sample_rate)


def to_counts(spec: ComplexSpectrogram, gain: float = 1.0) -> CountSpectrogram:
    """Scale STFT magnitudes into real-valued quanta: V = gain * |X|"""
    if not gain > 0:
        raise ValidationError(f"Count gain must be positive, got {gain}")
    return CountSpectrogram(values=gain * np.abs(spec.bins))


def gain_for_quanta(spec: ComplexSpectrogram, quanta_per_frame: float) -> float:
    """Gain that makes the mean frame total equal quanta_per_frame"""
    if not quanta_per_frame > 0:
        raise ValidationError(f"quanta_per_frame must be positive, got {quanta_per_frame}")
    mean_total = float(np.abs(spec.bins).sum(axis=0).mean())
    if mean_total <= 0:
        return 1.0
    return quanta_per_frame / mean_total


# ============================================================
# Spectrogram Persistence
# ============================================================
#
# Header: kind (0 counts, 1 complex), L, T, sample_rate, window_length,
# hop_length, fft_length, window code, signal_length (-1 if unknown).
# Complex payload stores the real plane then the imaginary plane.


def save_spectrogram(path: str, spec: Union[ComplexSpectrogram, CountSpectrogram]):
    """Dump a spectrogram to the flat binary container"""
    if isinstance(spec, ComplexSpectrogram):
        c = spec.config
        n_bins, n_frames = spec.bins.shape
        header = [
            1,
            n_bins,
            n_frames,
            spec.sample_rate,
            c.window_length,
            c.hop_length,
            c.fft_length,
            WINDOW_CODES[c.window_kind],
            -1 if spec.signal_length is None else spec.signal_length,
        ]
        arrays = [spec.bins.real, spec.bins.imag]
    else:
        n_bins, n_frames = spec.values.shape
        header = [0, n_bins, n_frames, 0, 0, 0, 0, 0, -1]
        arrays = [spec.values]
    write_container(path, SPECTROGRAM_MAGIC, header, arrays)


def load_spectrogram(path: str) -> Union[ComplexSpectrogram, CountSpectrogram]:
    """Inverse of save_spectrogram (bit-exact)"""
    header, payload = read_container(path, SPECTROGRAM_MAGIC)
    if len(header) != 9:
        raise AudioIOError(f"{path}: unexpected spectrogram header")
    kind, n_bins, n_frames, sample_rate, win, hop, fft, code, length = header

    if kind == 0:
        (values,) = split_payload(path, payload, [(n_bins, n_frames)])
        return CountSpectrogram(values=values)

    real, imag = split_payload(path, payload, [(n_bins, n_frames)] * 2)
    config = StftConfig(
        window_length=win,
        hop_length=hop,
        window_kind=list(WindowKind)[code],
        fft_length=fft,
    )
    return ComplexSpectrogram(
        bins=real + 1j * imag,
        config=config,
        sample_rate=sample_rate,
        signal_length=None if length < 0 else length,
    )
