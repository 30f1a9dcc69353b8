"""Tests for the complex U-Net extraction model and its checkpoint format."""

import struct

import numpy as np
import pytest

from mctse import ConfigError, ContractError, InputError, constant
from mctse import ops
from mctse.clue_net import ClueSet
from mctse.dccrn import (
    CKPT_MAGIC,
    ClueConfig,
    DccrnConfig,
    Model,
    extract,
    load_checkpoint,
    model_from_config,
    run_model,
    save_checkpoint,
)
from mctse.gradcheck import check_gradients
from mctse.signal import AudioClip, StftConfig, stft_array

# Small enough to be fast, deep enough to exercise every code path: two conv
# layers over a 9-bin spectrum (9 -> 5 -> 3), one bidirectional LSTM layer.
MINI_STFT = StftConfig(fft_size=16, win_len=16, hop=8)
MINI_CFG = DccrnConfig(channels=(2, 2), lstm_hidden=3, lstm_layers=1, stft=MINI_STFT)
MINI_CLUE = ClueConfig(sound_channels=2, downsample=2, text_raw_dim=4, video_raw_dim=5, heads=2)
NUM_CLASSES = 3
VOCAB = 6

# Thinner still, for finite-difference sweeps over every parameter.
MICRO_CFG = DccrnConfig(channels=(1, 1), lstm_hidden=2, lstm_layers=1, stft=MINI_STFT)
MICRO_CLUE = ClueConfig(sound_channels=1, downsample=2, text_raw_dim=2, video_raw_dim=2, heads=1)


def mini_model(stage=1, seed=0, dtype=np.float64):
    return Model(
        np.random.default_rng(seed),
        MINI_CFG,
        num_classes=NUM_CLASSES,
        vocab_size=VOCAB,
        clue_cfg=MINI_CLUE,
        stage=stage,
        dtype=dtype,
    )


def micro_model(stage=1, seed=0):
    return Model(
        np.random.default_rng(seed),
        MICRO_CFG,
        num_classes=2,
        vocab_size=4,
        clue_cfg=MICRO_CLUE,
        stage=stage,
        dtype=np.float64,
    )


def mini_clip(seed=0, n=40):
    return np.random.default_rng(seed).standard_normal(n) * 0.1


def onehot(idx, size=NUM_CLASSES):
    vec = np.zeros(size)
    vec[idx] = 1.0
    return vec


def full_clues(seed=0):
    rng = np.random.default_rng(seed)
    return ClueSet(
        tag=onehot(1),
        text=np.array([0, 2, 5]),
        video=rng.standard_normal((4, 5)),
    )


class TestConfig:
    def test_default_frequency_chain(self):
        cfg = DccrnConfig()
        assert cfg.freq_sizes() == [257, 129, 65, 33, 17]
        assert cfg.feature_dim == 32 * 17

    def test_mini_frequency_chain(self):
        assert MINI_CFG.freq_sizes() == [9, 5, 3]
        assert MINI_CFG.feature_dim == 2 * 3

    def test_even_intermediate_size_rejected(self):
        # 14-point FFT gives 8 bins; 8 halves to 4, and neither 8 nor 4 can be
        # recovered by the mirrored transposed convolution (it emits 2f-1).
        with pytest.raises(ConfigError, match="even"):
            DccrnConfig(channels=(2, 2), stft=StftConfig(fft_size=14, win_len=14, hop=7))

    def test_empty_channels_rejected(self):
        with pytest.raises(ConfigError):
            DccrnConfig(channels=())

    def test_nonpositive_channel_rejected(self):
        with pytest.raises(ConfigError):
            DccrnConfig(channels=(8, 0))

    def test_nonpositive_lstm_rejected(self):
        with pytest.raises(ConfigError):
            DccrnConfig(lstm_hidden=0)

    def test_bad_stage_rejected(self):
        with pytest.raises(ConfigError):
            mini_model(stage=3)


class TestEncodeDecode:
    def spectrum(self, seed=0, n=40):
        spec = stft_array(mini_clip(seed, n), MINI_STFT)
        from mctse.signal import ComplexSpec

        return ComplexSpec(spec.real.copy(), spec.imag.copy(), MINI_STFT)

    def test_encoder_shapes(self):
        model = mini_model()
        y, skips = model.encode(self.spectrum())
        assert y.real.data.shape == (6, 6)
        assert [s.real.data.shape for s in skips] == [(2, 5, 6), (2, 3, 6)]

    def test_zero_spectrum_encodes_to_zero(self):
        model = mini_model()
        spec = self.spectrum()
        spec.real[:] = 0.0
        spec.imag[:] = 0.0
        y, _ = model.encode(spec)
        assert np.all(y.real.data == 0.0)
        assert np.all(y.imag.data == 0.0)

    def test_decoder_mirrors_to_spectrum_shape(self):
        model = mini_model()
        y, skips = model.encode(self.spectrum())
        out = model.decode(y, skips)
        assert out.real.data.shape == (6, 9)
        assert out.imag.data.shape == (6, 9)

    @pytest.mark.parametrize("n", [16, 40, 100])
    def test_time_length_preserved(self, n):
        model = mini_model()
        spec = self.spectrum(n=n)
        frames = spec.real.shape[0]
        y, _ = model.encode(spec)
        assert y.real.data.shape[0] == frames

    def test_wrong_bin_count_rejected(self):
        model = mini_model()
        other = stft_array(np.random.default_rng(0).standard_normal(64), StftConfig(32, 32, 16))
        from mctse.signal import ComplexSpec

        spec = ComplexSpec(other.real.copy(), other.imag.copy(), StftConfig(32, 32, 16))
        with pytest.raises(ContractError, match="bins"):
            model.encode(spec)

    def test_skip_count_mismatch_rejected(self):
        model = mini_model()
        y, skips = model.encode(self.spectrum())
        with pytest.raises(ContractError, match="skip"):
            model.decode(y, skips[:1])

    def test_skip_shape_mismatch_rejected(self):
        model = mini_model()
        y, skips = model.encode(self.spectrum())
        with pytest.raises(ContractError, match="skip"):
            model.decode(y, skips[::-1])


class TestRunModel:
    def test_stage1_needs_tag(self):
        model = mini_model(stage=1)
        clues = ClueSet(text=np.array([1, 2]))
        with pytest.raises(ContractError, match="stage-1"):
            run_model(model, mini_clip(), clues)

    def test_stage1_output_length_and_no_attention(self):
        model = mini_model(stage=1)
        mix = mini_clip()
        out = run_model(model, mix, ClueSet(tag=onehot(0)))
        assert out.wave.data.shape == mix.shape
        assert out.attention is None
        assert out.segments is None

    def test_stage2_attention_layout(self):
        model = mini_model(stage=2)
        out = run_model(model, mini_clip(), full_clues())
        # 6 frames downsampled by 2 -> 3 query rows; keys: 3 text + 4 video + 1 tag.
        assert out.attention.data.shape == (2, 3, 8)
        assert out.segments == [("text", 0, 3), ("video", 3, 7), ("tag", 7, 8)]
        sums = out.attention.data.sum(axis=2)
        assert np.allclose(sums, 1.0, atol=1e-9)

    def test_stage2_tag_only_attention_is_ones(self):
        model = mini_model(stage=2)
        out = run_model(model, mini_clip(), ClueSet(tag=onehot(2)))
        assert out.attention.data.shape == (2, 3, 1)
        assert np.all(out.attention.data == 1.0)
        assert out.segments == [("tag", 0, 1)]

    @pytest.mark.parametrize("n", [1600, 4800])
    def test_extract_preserves_length_and_rate(self, n):
        model = mini_model(stage=1)
        clip = AudioClip(mini_clip(n=n), 16000)
        est, attention = extract(clip, ClueSet(tag=onehot(1)), model)
        assert len(est.samples) == n
        assert est.sample_rate == 16000
        assert attention is None

    def test_extract_returns_attention_for_stage2(self):
        model = mini_model(stage=2)
        clip = AudioClip(mini_clip(), 16000)
        _, attention = extract(clip, full_clues(), model)
        assert isinstance(attention, np.ndarray)
        assert attention.shape == (2, 3, 8)

    def test_repeat_run_is_bit_identical(self):
        mix = mini_clip()
        clues = full_clues()
        out_a = run_model(mini_model(stage=2, seed=5), mix, clues)
        out_b = run_model(mini_model(stage=2, seed=5), mix, clues)
        assert np.array_equal(out_a.wave.data, out_b.wave.data)
        assert np.array_equal(out_a.attention.data, out_b.attention.data)

    def test_float32_model_runs(self):
        model = mini_model(stage=2, dtype=np.float32)
        out = run_model(model, mini_clip(), full_clues())
        assert np.all(np.isfinite(out.wave.data))


class TestGradients:
    def readout(self, model, mix, clues, rng):
        """Scalar projection of all three model outputs with fixed weights."""
        probe = run_model(model, mix, clues)
        ww = constant(rng.standard_normal(probe.wave.data.shape))
        wr = constant(rng.standard_normal(probe.real.data.shape))
        wi = constant(rng.standard_normal(probe.imag.data.shape))

        def f():
            out = run_model(model, mix, clues)
            return (
                ops.reduce_sum(out.wave * ww)
                + ops.reduce_sum(out.real * wr)
                + ops.reduce_sum(out.imag * wi)
            )

        return f

    @pytest.mark.parametrize("seed", range(3))
    def test_stage1_full_model_matches_finite_differences(self, seed):
        model = micro_model(stage=1, seed=seed)
        rng = np.random.default_rng(seed + 100)
        mix = rng.standard_normal(24) * 0.3
        f = self.readout(model, mix, ClueSet(tag=onehot(seed % 2, 2)), rng)
        assert check_gradients(f, model.trainable_tensors(), h=1e-5) <= 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_stage2_full_model_matches_finite_differences(self, seed):
        model = micro_model(stage=2, seed=seed)
        rng = np.random.default_rng(seed + 200)
        mix = rng.standard_normal(24) * 0.3
        clues = ClueSet(
            tag=onehot(seed % 2, 2),
            text=np.array([0, 3, 1]),
            video=rng.standard_normal((3, 2)),
        )
        f = self.readout(model, mix, clues, rng)
        assert check_gradients(f, model.trainable_tensors(), h=1e-5) <= 1e-4

    def test_stage2_leaves_tag_tile_untouched(self):
        model = micro_model(stage=2)
        rng = np.random.default_rng(0)
        mix = rng.standard_normal(24) * 0.3
        out = run_model(model, mix, ClueSet(tag=onehot(0, 2)))
        ops.reduce_sum(out.wave).backward()
        assert model.tag_tile.w.grad is None
        for t in model.trainable_tensors():
            t.grad = None

    def test_stage1_touches_every_parameter(self):
        model = micro_model(stage=1)
        rng = np.random.default_rng(1)
        mix = rng.standard_normal(24) * 0.3
        f = self.readout(model, mix, ClueSet(tag=onehot(1, 2)), rng)
        loss = f()
        loss.backward()
        named = model.named_tensors()
        dead = [name for name, t in named.items() if t.grad is None or not np.any(t.grad)]
        assert dead == []
        for t in named.values():
            t.grad = None


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = mini_model(stage=2, seed=3, dtype=np.float32)
        first = tmp_path / "a.ckpt"
        second = tmp_path / "b.ckpt"
        save_checkpoint(first, model)
        loaded = load_checkpoint(first)
        save_checkpoint(second, loaded)
        assert first.read_bytes() == second.read_bytes()

    def test_loaded_model_gives_identical_output(self, tmp_path):
        model = mini_model(stage=1, seed=7, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        mix = mini_clip()
        out_a = run_model(model, mix, ClueSet(tag=onehot(0)))
        out_b = run_model(loaded, mix, ClueSet(tag=onehot(0)))
        assert np.array_equal(out_a.wave.data, out_b.wave.data)

    def test_config_survives_round_trip(self, tmp_path):
        model = mini_model(stage=2, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.stage == 2
        assert loaded.cfg == model.cfg
        assert loaded.clue_cfg == model.clue_cfg
        assert loaded.num_classes == model.num_classes
        assert loaded.vocab_size == model.vocab_size

    def test_stage1_checkpoint_excludes_clue_net(self, tmp_path):
        model = mini_model(stage=1, dtype=np.float32)
        names = set(model.named_tensors())
        assert "tag_tile.w" in names
        assert not any(name.startswith("clue.") for name in names)

    def test_stage2_checkpoint_excludes_tag_tile(self):
        model = mini_model(stage=2, dtype=np.float32)
        names = set(model.named_tensors())
        assert "tag_tile.w" not in names
        assert any(name.startswith("clue.") for name in names)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTAMODEL" + b"\x00" * 64)
        with pytest.raises(InputError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        model = mini_model(stage=1, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(InputError):
            load_checkpoint(path)

    def test_unknown_record_rejected(self, tmp_path):
        model = mini_model(stage=1, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        extra = struct.pack("<I", 3) + b"zzz" + struct.pack("<II", 1, 2) + b"\x00" * 8
        path.write_bytes(path.read_bytes() + extra)
        with pytest.raises(InputError, match="unexpected parameter"):
            load_checkpoint(path)

    def test_missing_parameters_rejected(self, tmp_path):
        model = mini_model(stage=1, dtype=np.float32)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model)
        blob = path.read_bytes()
        # Keep only the header: magic, version, config length, config.
        (cfg_len,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC) + 4)
        path.write_bytes(blob[: len(CKPT_MAGIC) + 8 + cfg_len])
        with pytest.raises(InputError, match="missing parameters"):
            load_checkpoint(path)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(InputError, match="no such file"):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_config_missing_key_rejected(self):
        with pytest.raises(InputError, match="missing key"):
            model_from_config({"stage": 1})
