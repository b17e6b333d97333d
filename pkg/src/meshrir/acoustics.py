"""Room-acoustics measures on impulse responses.

Energy decay relief (EDR) over six octave bands, the Schroeder energy decay
curve (EDC), and the T60 / EDT / DRR estimators used for evaluation.

Band energies use a Hann(256) STFT with zero-padded centred frames, so frame
``m`` covers samples ``[m*hop - 128, m*hop + 128)``. Each band sums one-sided
bins scaled by ``2 / n_fft``; with a Hann window at 50% overlap the squared
windows sum to at most 1 per sample, so the total band energy never exceeds
the signal energy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BAND_CENTERS = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0)
STFT_SIZE = 256
STFT_HOP = 128
ANALYSIS_RATE = 16000


class AcousticsError(ValueError):
    pass


@dataclass
class EDRMatrix:
    values: np.ndarray  # (frames, bands)
    band_centers: tuple = BAND_CENTERS
    frame_times: np.ndarray | None = None


@dataclass
class AcousticMetrics:
    t60: float
    edt: float
    drr: float


def hann(n: int = STFT_SIZE) -> np.ndarray:
    # periodic Hann, the STFT convention
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def band_mask(n_fft: int = STFT_SIZE, rate: int = ANALYSIS_RATE) -> np.ndarray:
    """(n_fft//2 + 1, 6) 0/1 matrix assigning rfft bins to octave bands."""
    freqs = np.arange(n_fft // 2 + 1) * rate / n_fft
    mask = np.zeros((len(freqs), len(BAND_CENTERS)))
    for k, fc in enumerate(BAND_CENTERS):
        lo, hi = fc / math.sqrt(2.0), fc * math.sqrt(2.0)
        mask[(freqs >= lo) & (freqs < hi), k] = 1.0
    return mask


def band_energy_stft(ir, rate: int = ANALYSIS_RATE, hop: int = STFT_HOP) -> np.ndarray:
    """Per-frame octave-band energies |H(m, k)|^2, shape (frames, 6)."""
    if rate != ANALYSIS_RATE:
        raise AcousticsError(f"band edges assume {ANALYSIS_RATE} Hz input, got {rate} Hz")
    x = np.asarray(ir, dtype=np.float64)
    if x.ndim != 1 or len(x) < STFT_SIZE:
        raise AcousticsError(f"need a 1-D signal of at least {STFT_SIZE} samples")
    half = STFT_SIZE // 2
    padded = np.pad(x, (half, half))
    n_frames = 1 + len(x) // hop
    frames = np.lib.stride_tricks.sliding_window_view(padded, STFT_SIZE)[::hop][:n_frames]
    spec = np.fft.rfft(frames * hann(), axis=-1)
    power = (spec.real ** 2 + spec.imag ** 2) * (2.0 / STFT_SIZE)
    return power @ band_mask()


def edr(ir, rate: int = ANALYSIS_RATE, hop: int = STFT_HOP) -> EDRMatrix:
    energy = band_energy_stft(ir, rate, hop)
    values = np.cumsum(energy[::-1], axis=0)[::-1]
    return EDRMatrix(values, BAND_CENTERS, np.arange(len(values)) * hop / rate)


def edc(ir) -> np.ndarray:
    """Schroeder backward integral in dB, 0 dB at the first sample."""
    x = np.asarray(ir, dtype=np.float64)
    energy = np.cumsum((x ** 2)[::-1])[::-1]
    total = energy[0] if len(energy) else 0.0
    if not total > 0:
        raise AcousticsError("EDC undefined for a silent IR")
    # the float cumsum can wobble in the last ulp; keep the curve monotone
    energy = np.minimum.accumulate(energy)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / total)


def _decay_slope(curve: np.ndarray, rate: int, hi_db: float, lo_db: float) -> float:
    """Least-squares slope (dB/s) of the EDC restricted to [lo_db, hi_db]."""
    sel = np.flatnonzero((curve <= hi_db) & (curve >= lo_db))
    if len(sel) < 2:
        raise AcousticsError(f"too few EDC samples between {hi_db} and {lo_db} dB")
    t = sel / rate
    slope, _ = np.polyfit(t, curve[sel], 1)
    if not slope < 0:
        raise AcousticsError("EDC fit has non-negative slope")
    return float(slope)


def t60(ir, rate: int = ANALYSIS_RATE) -> float:
    """T20-extrapolated reverberation time: fit on [-5, -25] dB."""
    curve = edc(ir)
    if not curve[-1] <= -25.0:
        raise AcousticsError(
            f"EDC only decays to {curve[-1]:.1f} dB; T60 needs -25 dB (use a longer IR)"
        )
    return -60.0 / _decay_slope(curve, rate, -5.0, -25.0)


def edt(ir, rate: int = ANALYSIS_RATE) -> float:
    """Early decay time: fit on [0, -10] dB, scaled to a 60 dB fall."""
    curve = edc(ir)
    if not curve[-1] <= -10.0:
        raise AcousticsError(f"EDC only decays to {curve[-1]:.1f} dB; EDT needs -10 dB")
    return -60.0 / _decay_slope(curve, rate, 0.0, -10.0)


def drr(ir, rate: int = ANALYSIS_RATE, direct_window: float = 0.0025) -> float:
    """Direct-to-reverberant ratio in dB.

    Direct energy is taken within +/- ``direct_window`` seconds of the absolute
    peak. Returns ``math.inf`` when there is no reverberant energy.
    """
    x = np.asarray(ir, dtype=np.float64)
    if len(x) == 0 or not np.any(x):
        raise AcousticsError("DRR needs a non-silent IR")
    peak = int(np.argmax(np.abs(x)))
    w = int(round(direct_window * rate))
    lo, hi = max(0, peak - w), min(len(x), peak + w + 1)
    e = x ** 2
    direct = float(e[lo:hi].sum())
    reverberant = float(e.sum() - direct)
    if reverberant <= 0:
        return math.inf
    return 10.0 * math.log10(direct / reverberant)


def power_spectrum(ir, rate: int = ANALYSIS_RATE):
    """One-sided power spectrum in dB; returns (frequencies, level_db)."""
    x = np.asarray(ir, dtype=np.float64)
    if len(x) == 0:
        raise AcousticsError("power spectrum of an empty signal")
    spec = np.fft.rfft(x)
    power = spec.real ** 2 + spec.imag ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
    return freqs, 10.0 * np.log10(np.maximum(power, 1e-300))


def acoustic_metrics(ir, rate: int = ANALYSIS_RATE) -> AcousticMetrics:
    return AcousticMetrics(t60(ir, rate), edt(ir, rate), drr(ir, rate))
