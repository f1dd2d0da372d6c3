import numpy as np
import pytest

from aufd import numerics as nx
from aufd.config import PRESETS, ConfigError
from aufd.evaluation import hierarchical_mae, pretext_mae
from aufd.numerics import ShapeError, Tensor
from aufd.params import state_dict
from aufd.pretext import (
    accumulate,
    huber_loss,
    init_pretext,
    load_pretext,
    mask_seed_for,
    masked_voxels,
    pretext_forward,
    reconstruct,
    save_pretext,
    target_channels,
    task_target,
    train_pretext,
)
from aufd.tokenizer import fold_tokens


class TestHuber:
    def test_equal_is_zero(self):
        x = Tensor(np.random.default_rng(0).random((3, 4)))
        assert huber_loss(x, x.data).item() == 0.0

    def test_quadratic_branch(self):
        assert huber_loss(Tensor([0.1]), [0.0], 1.0).item() == pytest.approx(0.005, abs=1e-9)

    def test_linear_branch(self):
        assert huber_loss(Tensor([3.0]), [0.0], 1.0).item() == 2.5

    def test_closed_form_both_branches(self):
        e = np.linspace(-4, 4, 81)
        with nx.precision(np.float64):
            got = huber_loss(Tensor(e), np.zeros_like(e), 1.5).item()
        oracle = np.where(np.abs(e) <= 1.5, 0.5 * e**2, 1.5 * (np.abs(e) - 0.75)).mean()
        assert got == pytest.approx(oracle, rel=1e-12)

    def test_nonnegative_and_zero_only_at_equality(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=5), rng.normal(size=5)
            assert huber_loss(Tensor(a), b).item() > 0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            huber_loss(Tensor(np.zeros(3)), np.zeros(4))


class TestForward:
    def test_self_consistency(self, tiny_cfg, tiny_corpus):
        model = init_pretext(tiny_cfg, "frame_recon")
        frames = tiny_corpus[0].stack.frames
        vol, _ = reconstruct(model, frames, frames, mask_seed=3)
        assert pretext_forward(frames, vol, model, 3).loss.item() == 0.0

    def test_output_shape_matches_input(self, tiny_cfg, tiny_corpus):
        model = init_pretext(tiny_cfg, "frame_recon")
        frames = tiny_corpus[0].stack.frames
        vol, mask = reconstruct(model, frames, frames, mask_seed=0)
        assert vol.shape == frames.shape
        assert len(mask.visible) == tiny_cfg.n_visible

    def test_paper_projection_arithmetic(self):
        cfg = PRESETS["paper"]
        per_token = cfg.tube_t * cfg.patch * cfg.patch * target_channels("frame_recon", cfg)
        assert cfg.n_tokens * per_token == cfg.frames * 3 * cfg.height * cfg.width
        assert fold_tokens(np.zeros((cfg.n_tokens, per_token)), cfg.grid, (cfg.tube_t, cfg.patch), 3).shape == (16, 3, 224, 224)

    def test_au_target_channels(self, tiny_cfg, tiny_corpus):
        assert task_target(tiny_corpus[0], "au_detect", tiny_cfg).shape == (4, 16, 32, 32)
        paper_shape = tiny_cfg.replace(au_paper_channels=True)
        t = task_target(tiny_corpus[0], "au_detect", paper_shape)
        assert t.shape == (4, 48, 32, 32)
        np.testing.assert_array_equal(t[:, 0], t[:, 2])
        model = init_pretext(paper_shape, "au_detect")
        assert pretext_forward(tiny_corpus[0].stack.frames, t, model, 0).pred_tokens.shape == (32, 2 * 8 * 8 * 48)

    def test_missing_target(self, tiny_cfg, tiny_corpus):
        model = init_pretext(tiny_cfg, "au_detect")
        with pytest.raises(ValueError, match="target"):
            pretext_forward(tiny_corpus[0].stack.frames, None, model, 0)

    def test_masked_loss_support(self, tiny_cfg, tiny_corpus):
        frames = tiny_corpus[0].stack.frames
        model = init_pretext(tiny_cfg.replace(loss_support="masked"), "frame_recon")
        out = pretext_forward(frames, frames, model, 2)
        diff = out.pred_tokens.data[out.mask.masked] - out.target_tokens[out.mask.masked]
        a = np.abs(diff)
        assert out.loss.item() == pytest.approx(np.where(a <= 1, 0.5 * diff**2, a - 0.5).mean(), rel=1e-5)

    def test_masked_voxels(self, tiny_cfg):
        from aufd.tokenizer import sample_mask

        mask = sample_mask(tiny_cfg.n_tokens, 0.5, 0)
        vox = masked_voxels(mask, tiny_cfg, 3)
        assert vox.shape == (4, 3, 32, 32)
        assert vox.mean() == pytest.approx(0.5)

    def test_unknown_task(self, tiny_cfg):
        with pytest.raises(ConfigError):
            init_pretext(tiny_cfg, "depth")


class TestTraining:
    def test_zero_epochs_is_initialisation(self, tiny_cfg, tiny_corpus):
        model, log = train_pretext(tiny_corpus, tiny_cfg.replace(epochs=0), "frame_recon")
        init = init_pretext(tiny_cfg, "frame_recon")
        assert log.losses == []
        for k, v in state_dict(init).items():
            assert state_dict(model)[k].tobytes() == v.tobytes()

    def test_empty_corpus(self, tiny_cfg):
        with pytest.raises(ConfigError):
            train_pretext([], tiny_cfg, "frame_recon")

    def test_accumulation_equals_single_batch(self, tiny_cfg, tiny_corpus):
        with nx.precision(np.float64):
            model = init_pretext(tiny_cfg, "frame_recon")
            params = model.parameters()
            frames = [c.stack.frames for c in tiny_corpus[:4]]

            def loss_fn(i):
                return pretext_forward(frames[i], frames[i], model, mask_seed_for(0, 0, i)).loss

            def grads(windows):
                for p in params:
                    p.grad = None
                accumulate(params, windows, loss_fn)
                return [p.grad / len(windows) for p in params]

            big = grads([np.array([0, 1, 2, 3])])
            small = grads([np.array([0, 1]), np.array([2, 3])])
            for g1, g2 in zip(big, small):
                np.testing.assert_allclose(g2, g1, atol=1e-5, rtol=1e-5)

    def test_accumulated_update_matches_large_batch(self, tiny_cfg, tiny_corpus):
        four = tiny_cfg.replace(batch=4, accum_steps=1, epochs=1)
        two_by_two = tiny_cfg.replace(batch=2, accum_steps=2, epochs=1)
        clips = tiny_corpus[:4]
        with nx.precision(np.float64):
            a, la = train_pretext(clips, four, "frame_recon")
            b, lb = train_pretext(clips, two_by_two, "frame_recon")
        assert len(la.losses) == len(lb.losses) == 1
        assert la.losses[0] == pytest.approx(lb.losses[0], rel=1e-9)
        sa, sb = state_dict(a), state_dict(b)
        for k in sa:
            np.testing.assert_allclose(sb[k], sa[k], atol=1e-5)

    def test_toy_run_reduces_loss(self, tiny_cfg, tiny_corpus):
        _, log = train_pretext(tiny_corpus, tiny_cfg.replace(epochs=50), "frame_recon")
        assert len(log.losses) == 50
        assert log.losses[-1] < log.losses[0]

    def test_bit_deterministic(self, tiny_cfg, tiny_corpus):
        cfg = tiny_cfg.replace(epochs=3)
        a, la = train_pretext(tiny_corpus, cfg, "au_detect")
        b, lb = train_pretext(tiny_corpus, cfg, "au_detect")
        assert la.losses == lb.losses
        assert all(v.tobytes() == state_dict(b)[k].tobytes() for k, v in state_dict(a).items())

    def test_checkpoint_round_trip(self, tiny_cfg, tiny_corpus, tmp_path):
        model, _ = train_pretext(tiny_corpus, tiny_cfg.replace(epochs=2, au_subset="lips"), "au_detect")
        save_pretext(model, tmp_path / "aue.ckpt")
        back = load_pretext(tmp_path / "aue.ckpt")
        assert (back.task, back.step, back.cfg) == (model.task, model.step, model.cfg)
        for k, v in state_dict(model).items():
            assert state_dict(back)[k].tobytes() == v.tobytes()
        save_pretext(back, tmp_path / "again.ckpt")
        assert (tmp_path / "aue.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_loss_curve_csv(self, tiny_cfg, tiny_corpus, tmp_path):
        _, log = train_pretext(tiny_corpus, tiny_cfg.replace(epochs=2), "frame_recon")
        log.write_csv(tmp_path / "loss.csv")
        rows = (tmp_path / "loss.csv").read_text().splitlines()
        assert rows[0] == "step,loss" and len(rows) == 3
        assert float(rows[1].split(",")[1]) == log.losses[0]


class TestMAE:
    def test_identical_is_zero(self):
        x = np.random.default_rng(0).random((4, 3, 5, 5))
        assert hierarchical_mae([(x, x)]) == 0.0

    def test_constant_offset(self):
        x = np.random.default_rng(0).random((4, 3, 5, 5))
        assert hierarchical_mae([(x + 0.1, x), (x - 0.1, x)]) == pytest.approx(0.1)

    def test_averaging_order_counterexample(self):
        # video A: one frame, error 1; video B: three frames, error 0
        a = (np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2)))
        b = (np.zeros((3, 1, 2, 2)), np.zeros((3, 1, 2, 2)))
        pooled = np.concatenate([np.abs(p - t).reshape(len(p), -1).mean(axis=1) for p, t in (a, b)]).mean()
        assert hierarchical_mae([a, b]) == 0.5
        assert pooled == 0.25

    def test_empty_corpus(self):
        with pytest.raises(ConfigError):
            hierarchical_mae([])

    def test_pretext_mae_from_checkpoint(self, tiny_cfg, tiny_corpus, tmp_path):
        model = init_pretext(tiny_cfg, "frame_recon")
        save_pretext(model, tmp_path / "v.ckpt")
        value = pretext_mae(load_pretext(tmp_path / "v.ckpt"), tiny_corpus[:3])
        assert 0.0 < value < 1.0
        assert value == pretext_mae(model, tiny_corpus[:3])
