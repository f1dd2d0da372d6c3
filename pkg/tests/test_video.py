import numpy as np
import pytest

from aufd.config import ConfigError
from aufd.formats import FormatError
from aufd.video import (
    EDITS,
    EXTREME_PARAMS,
    FAMILY_RANGES,
    LANDMARKS,
    MAX_REGION_FRACTION,
    ClipGeometry,
    FrameStack,
    InsufficientFramesError,
    LabeledClip,
    PerturbationError,
    PerturbationSpec,
    apply_perturbation,
    gaussian_kernel,
    generate_synthetic_clip,
    make_corpus,
    perturb_clip,
    read_clip,
    read_corpus,
    sample_frames,
    sample_indices,
    write_clip,
    write_corpus,
)


def _gray_stack(t=4, h=64, w=64, value=0.5):
    return FrameStack(np.full((t, 3, h, w), value, dtype=np.float32), np.zeros((t, len(LANDMARKS), 2), np.float32))


class TestSampleFrames:
    def test_identity(self):
        np.testing.assert_array_equal(sample_indices(16, 16), np.arange(16))

    def test_equal_spacing(self):
        np.testing.assert_array_equal(sample_indices(64, 16), np.arange(0, 64, 4))

    def test_formula_and_monotone(self):
        for n_raw in range(8, 40):
            idx = sample_indices(n_raw, 8)
            np.testing.assert_array_equal(idx, [int(np.floor(k * n_raw / 8)) for k in range(8)])
            assert (np.diff(idx) > 0).all()

    def test_insufficient(self):
        with pytest.raises(InsufficientFramesError):
            sample_indices(10, 16)

    def test_sample_frames_selects_rows(self):
        raw = FrameStack(np.arange(16, dtype=np.float32).reshape(16, 1, 1, 1) * np.ones((1, 3, 2, 2), np.float32),
                         np.zeros((16, len(LANDMARKS), 2), np.float32))
        out = sample_frames(raw, 4)
        np.testing.assert_array_equal(out.frames[:, 0, 0, 0], [0, 4, 8, 12])


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_synthetic_clip(7), generate_synthetic_clip(7)
        assert a.stack.frames.tobytes() == b.stack.frames.tobytes()
        assert a.stack.landmarks.tobytes() == b.stack.landmarks.tobytes()

    def test_frames_and_landmarks_in_bounds(self):
        clip = generate_synthetic_clip(3, edit=("mouth_corner_shift", 1.0))
        f, lm = clip.stack.frames, clip.stack.landmarks
        assert f.shape == (8, 3, 64, 64) and f.dtype == np.float32
        assert f.min() >= 0.0 and f.max() <= 1.0
        assert lm.shape == (8, len(LANDMARKS), 2)
        assert (lm >= 0).all() and (lm[..., 0] < 64).all() and (lm[..., 1] < 64).all()

    @pytest.mark.parametrize("edit", EDITS)
    def test_edit_is_local(self, edit):
        for seed in range(5):
            real = generate_synthetic_clip(seed)
            fake = generate_synthetic_clip(seed, edit=(edit, 0.5))
            y0, y1, x0, x1 = fake.region
            assert (y1 - y0) * (x1 - x0) <= MAX_REGION_FRACTION * 64 * 64
            outside = np.ones((64, 64), bool)
            outside[y0:y1, x0:x1] = False
            diff = np.abs(real.stack.frames - fake.stack.frames)
            assert diff[:, :, outside].max() == 0.0
            assert diff[:, :, ~outside].max() > 0.0

    def test_landmarks_reflect_brow_edit(self):
        real = generate_synthetic_clip(4)
        fake = generate_synthetic_clip(4, edit=("brow_raise", 1.0))
        i = LANDMARKS.index("brow_l_inner")
        assert (fake.stack.landmarks[:, i, 1] < real.stack.landmarks[:, i, 1] - 1.0).all()
        j = LANDMARKS.index("chin")
        np.testing.assert_array_equal(fake.stack.landmarks[:, j], real.stack.landmarks[:, j])

    def test_unknown_edit(self):
        with pytest.raises(ConfigError, match="unknown edit"):
            generate_synthetic_clip(0, edit=("nose_job", 0.5))

    def test_magnitude_bounds(self):
        with pytest.raises(ConfigError):
            generate_synthetic_clip(0, edit=("brow_raise", 1.5))

    def test_fake_needs_descriptor(self):
        with pytest.raises(ValueError):
            LabeledClip(_gray_stack(), 1, None)

    def test_corpus_whole_frame_difference(self):
        # 100 fakes plus their 100 seed-matched reals: mean |fake - real| over whole frames
        corpus = make_corpus(200, 11)
        fakes = [c for c in corpus if c.label == 1]
        assert len(fakes) == 100 and len(corpus) == 200
        diffs = [np.abs(c.stack.frames - generate_synthetic_clip(c.seed).stack.frames).mean() for c in fakes]
        assert np.mean(diffs) < 0.02

    def test_corpus_balance_and_edit_cycle(self):
        corpus = make_corpus(12, 0)
        fakes = [c for c in corpus if c.label == 1]
        assert len(fakes) == 6
        assert [c.edit[0] for c in fakes] == list(EDITS) * 2

    def test_paper_scale_geometry(self):
        clip = generate_synthetic_clip(0, ClipGeometry(frames=16, height=224, width=224, raw_frames=32))
        assert clip.stack.frames.shape == (16, 3, 224, 224)


class TestPerturbations:
    def test_spec_ranges(self):
        for fam, (lo, hi) in FAMILY_RANGES.items():
            PerturbationSpec(fam, lo)
            PerturbationSpec(fam, hi)
            with pytest.raises(PerturbationError):
                PerturbationSpec(fam, hi * 1.01)
        with pytest.raises(PerturbationError):
            PerturbationSpec("sepia", 1.0)

    def test_parse(self):
        assert PerturbationSpec.parse("gaussian_noise=0.1", 3) == PerturbationSpec("gaussian_noise", 0.1, 3)
        with pytest.raises(PerturbationError):
            PerturbationSpec.parse("blur")

    def test_contrast_identity(self):
        clip = generate_synthetic_clip(1)
        out = apply_perturbation(clip.stack, PerturbationSpec("contrast", 1.0))
        np.testing.assert_array_equal(out.frames, clip.stack.frames)

    def test_saturation_identity(self):
        clip = generate_synthetic_clip(1)
        out = apply_perturbation(clip.stack, PerturbationSpec("saturation", 1.0))
        np.testing.assert_allclose(out.frames, clip.stack.frames, atol=1e-6)

    def test_contrast_on_constant_frame(self):
        stack = _gray_stack(value=0.3)
        out = apply_perturbation(stack, PerturbationSpec("contrast", 2.0))
        np.testing.assert_allclose(out.frames, 0.3, atol=1e-7)

    def test_contrast_formula(self):
        clip = generate_synthetic_clip(2)
        x = clip.stack.frames.astype(float)
        m = x.mean(axis=(2, 3), keepdims=True)
        out = apply_perturbation(clip.stack, PerturbationSpec("contrast", 0.5))
        np.testing.assert_allclose(out.frames, np.clip(m + 0.5 * (x - m), 0, 1), atol=1e-6)

    def test_saturation_preserves_luma(self):
        clip = generate_synthetic_clip(2)
        luma = lambda f: np.tensordot([0.299, 0.587, 0.114], f.astype(float), axes=([0], [1]))
        out = apply_perturbation(clip.stack, PerturbationSpec("saturation", 0.5))
        np.testing.assert_allclose(luma(out.frames), luma(clip.stack.frames), atol=1e-5)
        gray = apply_perturbation(clip.stack, PerturbationSpec("saturation", 0.5))
        assert np.abs(np.diff(gray.frames, axis=1)).mean() < np.abs(np.diff(clip.stack.frames, axis=1)).mean()

    def test_noise_statistics(self):
        out = apply_perturbation(_gray_stack(), PerturbationSpec("gaussian_noise", 0.05, seed=4))
        std = float(np.std(out.frames))
        assert out.frames.size >= 10_000
        assert 0.045 <= std <= 0.055

    def test_noise_is_seeded(self):
        a = apply_perturbation(_gray_stack(), PerturbationSpec("gaussian_noise", 0.05, seed=4))
        b = apply_perturbation(_gray_stack(), PerturbationSpec("gaussian_noise", 0.05, seed=4))
        c = apply_perturbation(_gray_stack(), PerturbationSpec("gaussian_noise", 0.05, seed=5))
        assert a.frames.tobytes() == b.frames.tobytes() != c.frames.tobytes()

    def test_blur_kernel(self):
        k = gaussian_kernel(3)
        x = np.arange(-3, 4)
        oracle = np.exp(-0.5 * x**2)  # sigma = radius / 3 = 1
        np.testing.assert_allclose(k, oracle / oracle.sum(), rtol=1e-12)

    def test_blur_preserves_constants(self):
        out = apply_perturbation(_gray_stack(value=0.7), PerturbationSpec("gaussian_blur", 11))
        np.testing.assert_allclose(out.frames, 0.7, atol=1e-6)

    def test_pixelation_blocks(self):
        clip = generate_synthetic_clip(5)
        out = apply_perturbation(clip.stack, PerturbationSpec("pixelation", 4)).frames
        blocks = clip.stack.frames.reshape(8, 3, 16, 4, 16, 4).astype(float).mean(axis=(3, 5))
        np.testing.assert_allclose(out, np.repeat(np.repeat(blocks, 4, axis=2), 4, axis=3), atol=1e-6)

    def test_blocking_flat_blocks_survive_and_detail_is_lost(self):
        flat = apply_perturbation(_gray_stack(value=128 / 255), PerturbationSpec("blocking", 10))
        np.testing.assert_allclose(flat.frames, 128 / 255, atol=1e-6)
        clip = generate_synthetic_clip(5)
        err = {q: np.abs(apply_perturbation(clip.stack, PerturbationSpec("blocking", q)).frames - clip.stack.frames).mean()
               for q in (10, 30, 50)}
        assert err[10] > err[30] > err[50] > 0

    @pytest.mark.parametrize("family", sorted(EXTREME_PARAMS))
    def test_range_landmarks_label_unchanged(self, family):
        clip = generate_synthetic_clip(6, edit=("eye_size", 0.8))
        out = perturb_clip(clip, PerturbationSpec(family, EXTREME_PARAMS[family][0], seed=1))
        assert out.stack.frames.min() >= 0.0 and out.stack.frames.max() <= 1.0
        assert out.stack.frames.dtype == np.float32
        np.testing.assert_array_equal(out.stack.landmarks, clip.stack.landmarks)
        assert (out.label, out.edit, out.region) == (clip.label, clip.edit, clip.region)


class TestClipFiles:
    def test_round_trip(self, tmp_path):
        clip = generate_synthetic_clip(9, edit=("brow_raise", 0.7))
        write_clip(clip, tmp_path / "a.clip")
        back = read_clip(tmp_path / "a.clip")
        assert back.stack.frames.tobytes() == clip.stack.frames.tobytes()
        assert back.stack.landmarks.tobytes() == clip.stack.landmarks.tobytes()
        assert (back.label, back.edit, back.seed, back.region) == (clip.label, clip.edit, clip.seed, clip.region)
        write_clip(back, tmp_path / "b.clip")
        assert (tmp_path / "a.clip").read_bytes() == (tmp_path / "b.clip").read_bytes()

    def test_truncated(self, tmp_path):
        p = tmp_path / "a.clip"
        write_clip(generate_synthetic_clip(9), p)
        data = p.read_bytes()
        p.write_bytes(data[:-100])
        with pytest.raises(FormatError, match=r"byte offset \d+"):
            read_clip(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.clip"
        write_clip(generate_synthetic_clip(9), p)
        p.write_bytes(b"JUNK" + p.read_bytes()[4:])
        with pytest.raises(FormatError, match="bad magic"):
            read_clip(p)

    def test_corpus_directory(self, tmp_path):
        clips = make_corpus(4, 3)
        write_corpus(clips, tmp_path / "c")
        back = read_corpus(tmp_path / "c")
        assert [c.seed for c in back] == [c.seed for c in clips]
