import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from meshrir import codec
from meshrir.codec import CROP_LENGTH, PACKED_LENGTH, ImpulseResponse


def cropped(x):
    return ImpulseResponse(np.asarray(x, float), codec.RATE, "cropped")


def test_lengths():
    assert CROP_LENGTH + codec.TAG_LENGTH == PACKED_LENGTH == 4096


def test_pack_divides_by_ten_std():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(CROP_LENGTH)
    x = (x - x.mean()) / x.std() * 0.02
    p = codec.pack(cropped(x)).samples
    np.testing.assert_allclose(p[:CROP_LENGTH], x / 0.2, rtol=1e-12)
    assert np.all(p[CROP_LENGTH:] == pytest.approx(0.02, rel=1e-12))


def test_pack_body_std_is_point_one():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(CROP_LENGTH)
    x = (x - x.mean()) / x.std() * 0.01
    body = codec.pack(cropped(x)).samples[:CROP_LENGTH]
    np.testing.assert_allclose(body, 10 * x, rtol=1e-12)
    assert np.std(body) == pytest.approx(0.1, rel=1e-9)


def test_pack_silent_raises():
    with pytest.raises(codec.CodecError):
        codec.pack(cropped(np.zeros(CROP_LENGTH)))


def test_pack_nonfinite_raises():
    x = np.ones(CROP_LENGTH)
    x[5] = np.nan
    with pytest.raises(codec.CodecError):
        codec.pack_samples(x)


def test_unpack_constant_example():
    packed = np.concatenate([np.full(CROP_LENGTH, 0.1), np.full(128, 0.05)])
    np.testing.assert_allclose(codec.unpack_samples(packed), 0.05, rtol=1e-12)


def test_unpack_reads_tag_interior_only():
    rng = np.random.default_rng(2)
    packed = np.concatenate([rng.standard_normal(CROP_LENGTH) * 0.1, np.full(128, 0.03)])
    # corrupt the samples a 41-tap kernel would smear across the boundary and the end
    packed[CROP_LENGTH:CROP_LENGTH + 21] = 5.0
    packed[-21:] = -5.0
    assert codec.recover_std(packed) == pytest.approx(0.03, rel=1e-12)
    noisy = packed.copy()
    noisy[codec.TAG_WINDOW] += rng.normal(0, 1e-4, 86)
    assert codec.recover_std(noisy) == pytest.approx(np.mean(noisy[3989:4075]))


def test_unpack_nonpositive_tag_raises():
    packed = np.concatenate([np.ones(CROP_LENGTH), np.full(128, -0.01)])
    with pytest.raises(codec.CodecError):
        codec.unpack_samples(packed)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-6, -1))
def test_round_trip_property(seed, log_std):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(CROP_LENGTH)
    x = x / x.std() * 10 ** log_std
    back = codec.unpack(codec.pack(cropped(x))).samples
    assert np.max(np.abs(back - x) / np.max(np.abs(x))) <= 1e-5
    np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-12 * np.max(np.abs(x)))


def test_crop_rules():
    long = ImpulseResponse(np.arange(16000.0), 16000)
    np.testing.assert_array_equal(codec.crop_or_pad(long).samples, np.arange(CROP_LENGTH))
    short = codec.crop_or_pad(ImpulseResponse(np.ones(1000), 16000)).samples
    assert len(short) == CROP_LENGTH and short[:1000].sum() == 1000 and not short[1000:].any()
    exact = np.random.default_rng(0).standard_normal(CROP_LENGTH)
    np.testing.assert_array_equal(codec.crop_or_pad(ImpulseResponse(exact, 16000)).samples, exact)
    with pytest.raises(codec.CodecError):
        codec.crop_or_pad(ImpulseResponse(np.zeros(0), 16000))
    with pytest.raises(codec.CodecError):
        codec.crop_or_pad(ImpulseResponse(np.ones(100), 48000))


def test_resample_length_and_identity():
    x = np.random.default_rng(0).standard_normal(48000)
    out = codec.resample(ImpulseResponse(x, 48000), 16000)
    assert len(out) == 16000 and out.rate == 16000
    same = codec.resample(ImpulseResponse(x, 48000), 48000)
    assert np.array_equal(same.samples, x)
    with pytest.raises(codec.CodecError):
        codec.resample(ImpulseResponse(x, 48000), 0)


def test_resample_tone_amplitude():
    t = np.arange(48000) / 48000
    out = codec.resample(ImpulseResponse(np.sin(2 * np.pi * 400 * t), 48000), 16000).samples
    t16 = np.arange(16000) / 16000
    mid = slice(2000, 14000)  # away from the filter edges
    np.testing.assert_allclose(out[mid], np.sin(2 * np.pi * 400 * t16)[mid], atol=0.01)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
def test_resample_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 960))
    r = lambda s: codec.resample(ImpulseResponse(s, 48000), 16000).samples  # noqa: E731
    np.testing.assert_allclose(r(a * x + b * y), a * r(x) + b * r(y), atol=1e-9 * (1 + abs(a) + abs(b)))


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal(PACKED_LENGTH).astype(np.float32)
    codec.write_wav(ImpulseResponse(x, 16000, "packed"), tmp_path / "a.wav")
    back = codec.read_wav(tmp_path / "a.wav")
    assert back.rate == 16000 and back.form == "packed"
    assert np.array_equal(back.samples.astype(np.float32), x)


def test_wav_rejects_stereo_and_int(tmp_path):
    wavfile.write(tmp_path / "s.wav", 16000, np.zeros((100, 2), np.float32))
    with pytest.raises(codec.CodecError, match="mono"):
        codec.read_wav(tmp_path / "s.wav")
    wavfile.write(tmp_path / "i.wav", 16000, np.zeros(100, np.int16))
    with pytest.raises(codec.CodecError, match="float"):
        codec.read_wav(tmp_path / "i.wav")


def test_form_length_invariants():
    with pytest.raises(codec.CodecError):
        ImpulseResponse(np.zeros(10), 16000, "cropped")
    with pytest.raises(codec.CodecError):
        ImpulseResponse(np.zeros(10), 16000, "packed")
