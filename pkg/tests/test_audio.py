import wave

import numpy as np
import pytest

from lhdff import audio
from lhdff.audio import (AudioClip, AugmentPolicy, MelBatch, MelSpectrogram, apply_mask, augment_batch, load_lmel,
                         load_wav, log_mel, mel_band_edges, mel_filterbank, n_frames_for, save_lmel, spec_augment,
                         stft_magnitude, write_wav)


def _write_pcm(path, pcm, rate=16000, channels=1, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(pcm).tobytes())


def test_silence_file(tmp_path):
    _write_pcm(tmp_path / "s.wav", np.zeros(16000, dtype="<i2"))
    clip = load_wav(tmp_path / "s.wav")
    assert clip.sample_rate == 16000 and clip.samples.shape == (16000,)
    assert np.all(clip.samples == 0)


def test_full_scale_square_wave(tmp_path):
    pcm = np.tile(np.array([32767, -32768], dtype="<i2"), 100)
    _write_pcm(tmp_path / "sq.wav", pcm)
    s = load_wav(tmp_path / "sq.wav").samples
    assert s.min() == -1.0 and s.max() == pytest.approx(32767 / 32768)


def test_stereo_cancels_to_zero(tmp_path):
    x = np.random.default_rng(0).integers(-30000, 30000, 500).astype("<i2")
    _write_pcm(tmp_path / "st.wav", np.stack([x, -x], axis=1).ravel(), channels=2)
    assert np.all(load_wav(tmp_path / "st.wav").samples == 0)


def test_unsupported_sample_width(tmp_path):
    _write_pcm(tmp_path / "u8.wav", np.zeros(100, dtype=np.uint8), width=1)
    with pytest.raises(audio.AudioFormatError):
        load_wav(tmp_path / "u8.wav")


def test_not_a_wav(tmp_path):
    (tmp_path / "x.wav").write_bytes(b"OggS" + bytes(60))
    with pytest.raises(audio.AudioFormatError):
        load_wav(tmp_path / "x.wav")


def test_truncated_data(tmp_path):
    _write_pcm(tmp_path / "t.wav", np.zeros(1000, dtype="<i2"))
    blob = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(blob[:-500])
    with pytest.raises(audio.AudioIOError):
        load_wav(tmp_path / "t.wav")


def test_wav_round_trip(tmp_path):
    x = np.sin(np.linspace(0, 20, 3000)) * 0.5
    write_wav(tmp_path / "r.wav", x, 22050)
    clip = load_wav(tmp_path / "r.wav")
    assert clip.sample_rate == 22050
    np.testing.assert_allclose(clip.samples, x, atol=1 / 32768)


def test_frame_count_30s_44k():
    # the frame-count formula 1 + floor((1323000 - 1024) / 512) evaluates to 2582
    n = 44100 * 30
    assert n_frames_for(n) == 1 + (n - 1024) // 512 == 2582
    assert stft_magnitude(np.zeros(n)).shape == (2582, 513)


def test_too_short_clip():
    with pytest.raises(audio.ClipTooShortError):
        log_mel(AudioClip(np.zeros(1000), 16000))


def test_silence_is_log_floor():
    mel = log_mel(AudioClip(np.zeros(4096), 16000))
    assert mel.frames.shape == (7, 64)
    np.testing.assert_allclose(mel.frames, np.float32(np.log(audio.MEL_EPS)))


@pytest.mark.parametrize("band", [5, 20, 40, 60])
def test_sine_at_band_centre(band):
    rate = 16000
    centre = mel_band_edges(rate)[band + 1]
    n = np.arange(rate)
    mel = log_mel(AudioClip(0.5 * np.sin(2 * np.pi * centre * n / rate), rate))
    assert np.all(mel.frames.argmax(axis=1) == band)


def test_filterbank_unit_area():
    fb = mel_filterbank(16000)
    edges = mel_band_edges(16000)
    # triangles scaled to area 1 in Hz; bins are spaced rate / n_fft apart
    area = fb.sum(axis=1) * (16000 / 1024)
    high = edges[2:] - edges[:-2] > 200
    np.testing.assert_allclose(area[high], 1.0, rtol=0.05)


def test_mel_batch_padding():
    a, b = MelSpectrogram(np.ones((3, 4), np.float32), 1.0), MelSpectrogram(np.ones((5, 4), np.float32), 1.0)
    batch = MelBatch.from_mels([a, b])
    assert batch.data.shape == (2, 5, 4)
    assert list(batch.lengths) == [3, 5]
    assert np.all(batch.data[0, 3:] == 0)
    np.testing.assert_array_equal(batch.frame_mask()[0], [True, True, True, False, False])


def test_lmel_round_trip_and_errors(tmp_path):
    mel = MelSpectrogram(np.random.default_rng(0).normal(size=(7, 64)).astype(np.float32), 31.25, "c")
    save_lmel(tmp_path / "c.lmel", mel)
    back = load_lmel(tmp_path / "c.lmel", source_id="c")
    np.testing.assert_array_equal(back.frames, mel.frames)
    blob = (tmp_path / "c.lmel").read_bytes()
    (tmp_path / "bad.lmel").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(audio.AudioFormatError):
        load_lmel(tmp_path / "bad.lmel")
    (tmp_path / "short.lmel").write_bytes(blob[:-8])
    with pytest.raises(audio.AudioIOError):
        load_lmel(tmp_path / "short.lmel")


# ---------------------------------------------------------------- SpecAugment

def _mel(rng, t=40, f=64):
    return MelSpectrogram(rng.normal(size=(t, f)).astype(np.float32), 31.25)


def test_zero_width_policy_is_identity(rng):
    mel = _mel(rng)
    out = spec_augment(mel, rng, AugmentPolicy(time_width=0, freq_width=0))
    np.testing.assert_array_equal(out.frames, mel.frames)


def test_explicit_time_mask(rng):
    mel = _mel(rng)
    mask = np.zeros(mel.frames.shape, bool)
    mask[10:20] = True
    policy = AugmentPolicy(fill=-3.5)
    out = apply_mask(mel, mask, policy)
    assert np.all(out.frames[10:20] == np.float32(-3.5))
    np.testing.assert_array_equal(out.frames[:10], mel.frames[:10])
    np.testing.assert_array_equal(out.frames[20:], mel.frames[20:])


def test_self_mixture_is_identity(rng):
    mel = _mel(rng)
    out = spec_augment(mel, rng, AugmentPolicy(variant="mixture"), donor=mel)
    np.testing.assert_array_equal(out.frames, mel.frames)


def test_oversized_width_is_clipped(rng):
    mel = _mel(rng, t=10, f=6)
    out, mask = spec_augment(mel, rng, AugmentPolicy(time_width=500, freq_width=500), return_mask=True)
    assert out.frames.shape == (10, 6) and mask.shape == (10, 6)


def test_mixture_needs_donor(rng):
    with pytest.raises(ValueError):
        spec_augment(_mel(rng), rng, AugmentPolicy(variant="mixture"))


def test_augment_batch_deterministic():
    mels = [_mel(np.random.default_rng(i)) for i in range(4)]
    a = augment_batch(mels, np.random.default_rng(5))
    b = augment_batch(mels, np.random.default_rng(5))
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.frames, y.frames)
