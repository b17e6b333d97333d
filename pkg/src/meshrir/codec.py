"""Impulse-response representations: raw, cropped (3968) and packed (4096).

The packed form stores a unit-scale body (STD fixed to 0.1) followed by a
128-sample tag holding the original STD, so a generator can emit both the
shape and the magnitude of an IR in a single fixed-length vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

RATE = 16000
CROP_LENGTH = 3968
TAG_LENGTH = 128
PACKED_LENGTH = CROP_LENGTH + TAG_LENGTH
BODY_STD = 0.1
# a generator conv with kernel 41 smears the 20 samples on each side of the
# body/tag boundary; the tag is read only where all 41 neighbours are tag
TAG_GUARD = 21
TAG_WINDOW = slice(CROP_LENGTH + TAG_GUARD, PACKED_LENGTH - TAG_GUARD)

FORMS = ("raw", "cropped", "packed")


class CodecError(ValueError):
    pass


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    rate: int = RATE
    form: str = "raw"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise CodecError(f"IR must be 1-D, got shape {self.samples.shape}")
        if self.form not in FORMS:
            raise CodecError(f"unknown IR form {self.form!r}")
        if self.form == "cropped" and len(self.samples) != CROP_LENGTH:
            raise CodecError(f"cropped IR must have {CROP_LENGTH} samples")
        if self.form == "packed" and len(self.samples) != PACKED_LENGTH:
            raise CodecError(f"packed IR must have {PACKED_LENGTH} samples")

    def __len__(self):
        return len(self.samples)


def resample(ir: ImpulseResponse, to_rate: int) -> ImpulseResponse:
    """Band-limited polyphase resampling (Kaiser-windowed sinc)."""
    if ir.rate <= 0 or to_rate <= 0:
        raise CodecError("sample rates must be positive")
    if to_rate == ir.rate:
        return ImpulseResponse(ir.samples.copy(), ir.rate, ir.form)
    ratio = Fraction(int(to_rate), int(ir.rate))
    out = signal.resample_poly(ir.samples, ratio.numerator, ratio.denominator)
    return ImpulseResponse(out, int(to_rate), "raw")


def crop_or_pad(ir: ImpulseResponse, length: int = CROP_LENGTH) -> ImpulseResponse:
    if len(ir.samples) == 0:
        raise CodecError("cannot crop an empty IR")
    if ir.rate != RATE:
        raise CodecError(f"crop expects {RATE} Hz input, got {ir.rate} Hz; resample first")
    out = np.zeros(length)
    n = min(length, len(ir.samples))
    out[:n] = ir.samples[:n]
    form = "cropped" if length == CROP_LENGTH else "raw"
    return ImpulseResponse(out, ir.rate, form)


def ir_std(x: np.ndarray) -> float:
    """Population STD (mean removed) of an IR body."""
    return float(np.std(np.asarray(x, dtype=np.float64)))


def pack_samples(body: np.ndarray) -> np.ndarray:
    body = np.asarray(body, dtype=np.float64)
    if body.shape != (CROP_LENGTH,):
        raise CodecError(f"pack expects {CROP_LENGTH} samples, got {body.shape}")
    if not np.all(np.isfinite(body)):
        raise CodecError("IR contains non-finite samples")
    s = ir_std(body)
    if s <= 0:
        raise CodecError("cannot pack a silent IR (STD is zero)")
    return np.concatenate([body / (10.0 * s), np.full(TAG_LENGTH, s)])


def recover_std(packed: np.ndarray) -> float:
    return float(np.mean(np.asarray(packed, dtype=np.float64)[..., TAG_WINDOW], axis=-1))


def unpack_samples(packed: np.ndarray) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.float64)
    if packed.shape != (PACKED_LENGTH,):
        raise CodecError(f"unpack expects {PACKED_LENGTH} samples, got {packed.shape}")
    s = recover_std(packed)
    if not s > 0:
        raise CodecError(f"recovered STD tag is not positive ({s!r})")
    return packed[:CROP_LENGTH] * (10.0 * s)


def pack(ir: ImpulseResponse) -> ImpulseResponse:
    if ir.form != "cropped":
        raise CodecError(f"pack expects a cropped IR, got form {ir.form!r}")
    return ImpulseResponse(pack_samples(ir.samples), ir.rate, "packed")


def unpack(packed: ImpulseResponse) -> ImpulseResponse:
    return ImpulseResponse(unpack_samples(packed.samples), packed.rate, "cropped")


def write_wav(ir: ImpulseResponse, path) -> None:
    wavfile.write(str(path), int(ir.rate), np.asarray(ir.samples, dtype=np.float32))


def read_wav(path, form: str | None = None) -> ImpulseResponse:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise CodecError(
            f"{path}: expected mono audio, got {data.shape[1]} channels "
            "(mix down first, e.g. take channel 0 or average channels)"
        )
    if data.dtype != np.float32:
        raise CodecError(
            f"{path}: expected 32-bit float samples, got {data.dtype} "
            "(convert, e.g. `sox in.wav -e floating-point -b 32 out.wav`)"
        )
    if form is None:
        form = {CROP_LENGTH: "cropped", PACKED_LENGTH: "packed"}.get(len(data), "raw")
        if rate != RATE:
            form = "raw"
    return ImpulseResponse(data.astype(np.float64), int(rate), form)
