"""Forward noising, the training objective, the training loop, and sampling."""

import math

import numpy as np
import pytest
import torch

from gradtools import assert_grads_match_fd
from viewcap.checkpoint import load_checkpoint, save_checkpoint
from viewcap.denoiser import Denoiser, DenoiserConfig, init_params, predict_x0
from viewcap.diffusion import (
    LossBreakdown,
    SamplingFault,
    TrainConfig,
    TrainingFault,
    forward_noise,
    sample_reverse,
    train,
    training_loss,
    training_losses,
)
from viewcap.embedding import InputPair, LatentSequence, embed_caption, embed_pair
from viewcap.patchgrid import FeatureSpace, ViewPatchGrid
from viewcap.schedule import build_schedule, respace, schedule_from_betas
from viewcap.vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary


def small_space():
    return FeatureSpace(
        part_kinds=("seat", "leg", "top"),
        colors=("red", "blue"),
        materials=("wood", "metal"),
        textures=("smooth", "rough"),
    )


def make_view(space, patch=(0, 1), parts=(1, 0, 1, 0)):
    cells = np.zeros((2, 2, 5), dtype=np.int64)
    cells[patch] = parts + (1,)
    return ViewPatchGrid(space=space, cells=cells)


def make_pair(space, words=(4, 5), L_cap=5, patch=(0, 1)):
    ids = [BOS_ID, *words, EOS_ID]
    ids += [PAD_ID] * (L_cap - len(ids))
    return InputPair(view=make_view(space, patch=patch), caption_ids=np.array(ids))


def tiny_model(space, T_max=2000, dtype=torch.float64, seed=17, **overrides):
    base = dict(
        H=4,
        d_model=8,
        n_layers=1,
        n_heads=2,
        ff_mult=2,
        L_img=4,
        L_cap=5,
        T_max=T_max,
        vocab_size=8,
        patch_feat_dim=space.patch_feat_dim,
    )
    base.update(overrides)
    cfg = DenoiserConfig(**base)
    return init_params(cfg, torch.Generator().manual_seed(seed), dtype=dtype)


def constant_latent(value, L_img, L_cap, H, dtype=torch.float64):
    values = torch.full((L_img + L_cap, H), value, dtype=dtype)
    return LatentSequence(values=values, img_len=L_img, cap_len=L_cap)


class TestForwardNoise:
    def test_zero_noise_scales_caption_exactly(self):
        schedule = build_schedule("sqrt", 50)
        x0 = constant_latent(1.5, 2, 3, 4)
        for t in (1, 25, 50):
            out = forward_noise(x0, t, schedule, torch.Generator(), noise=torch.zeros(3, 4, dtype=torch.float64))
            expected = math.sqrt(schedule.alpha_bar(t)) * x0.cap
            assert torch.equal(out.cap, expected)

    def test_image_segment_bit_identical(self):
        schedule = build_schedule("sqrt", 50)
        gen = torch.Generator().manual_seed(2)
        values = torch.randn(7, 4, generator=gen, dtype=torch.float64)
        x0 = LatentSequence(values=values, img_len=3, cap_len=4)
        for t in (1, 17, 50):
            out = forward_noise(x0, t, schedule, gen)
            assert torch.equal(out.img, x0.img)

    def test_rejects_out_of_range_t(self):
        schedule = build_schedule("sqrt", 50)
        x0 = constant_latent(0.0, 1, 1, 1)
        for bad in (0, 51):
            with pytest.raises(ValueError, match="timestep"):
                forward_noise(x0, bad, schedule, torch.Generator())

    def test_marginal_moments_at_final_step(self):
        # 10 draws of a (100, 100) caption segment = 1e5 scalar samples of the
        # t = T marginal around a constant latent.
        schedule = build_schedule("sqrt", 50)
        x0 = constant_latent(1.3, 1, 100, 100)
        gen = torch.Generator().manual_seed(7)
        samples = []
        for _ in range(10):
            samples.append(forward_noise(x0, 50, schedule, gen).cap.flatten())
        draws = torch.cat(samples)
        n = draws.numel()
        assert n == 100_000
        abar = schedule.alpha_bar(50)
        sigma = math.sqrt(1.0 - abar)
        assert abs(draws.mean().item() - math.sqrt(abar) * 1.3) <= 4.0 * sigma / math.sqrt(n)
        assert abs(draws.var().item() - (1.0 - abar)) / (1.0 - abar) <= 0.05

    def test_one_step_matches_iterated_small_steps(self):
        # On a schedule whose alpha-bar table starts at 1, iterating the
        # single-step kernel t times must match the one-shot marginal; checked
        # as a two-sample moment test at N = 1e5, 3 sigma.
        schedule = build_schedule("linear", 1000)
        assert schedule.alpha_bar(0) == 1.0
        t, n, start = 40, 100_000, 0.9
        gen = torch.Generator().manual_seed(11)
        iterated = torch.full((n,), start, dtype=torch.float64)
        for i in range(1, t + 1):
            beta = schedule.beta(i)
            iterated = (
                math.sqrt(1.0 - beta) * iterated
                + math.sqrt(beta) * torch.randn(n, generator=gen, dtype=torch.float64)
            )
        x0 = constant_latent(start, 1, 250, 400)
        one_shot = forward_noise(x0, t, schedule, gen).cap.flatten()
        m1, m2 = iterated.mean().item(), one_shot.mean().item()
        v1, v2 = iterated.var().item(), one_shot.var().item()
        assert abs(m1 - m2) <= 3.0 * math.sqrt(v1 / n + v2 / n)
        assert abs(v1 - v2) <= 3.0 * math.sqrt(2.0 * (v1**2 + v2**2) / (n - 1))


def pick_seed(T, want_anchor, beta0_consumes):
    """Find a generator seed whose uniform t-draw lands on (or off) t=1."""
    for seed in range(200):
        gen = torch.Generator().manual_seed(seed)
        if beta0_consumes:
            torch.randn((9, 4), generator=gen, dtype=torch.float64)
        t = int(torch.randint(1, T + 1, (1,), generator=gen).item())
        if (t == 1) == want_anchor:
            return seed
    raise AssertionError("no suitable seed found")


class TestTrainingLoss:
    def test_perfect_prediction_gives_zero_main_terms(self):
        space = small_space()
        schedule = schedule_from_betas(np.array([0.1, 0.2, 0.3]))
        assert schedule.beta0 == 0.0
        pair = make_pair(space)
        model = tiny_model(space, T_max=3)

        class Oracle(Denoiser):
            def forward(self, values, t):
                return self.target[None].expand(values.shape[0], -1, -1)

        oracle = Oracle(model.config, dtype=torch.float64)
        oracle.reset_parameters(torch.Generator().manual_seed(17))
        oracle.target = embed_pair(oracle.table, pair).values.detach()
        config = TrainConfig(
            schedule_kind="linear", T=3, batch_size=1, steps=1, lr=1e-3,
            warmup_steps=0, reg_weight=0.0, ce_weight=0.0,
        )
        seed = pick_seed(3, want_anchor=False, beta0_consumes=False)
        out = training_loss(oracle, pair, schedule, config, torch.Generator().manual_seed(seed))
        assert float(out.sum_term) == 0.0
        assert float(out.anchor_term) == 0.0
        assert float(out.total.detach()) == 0.0

    def test_anchor_path_uses_clean_caption_embedding(self):
        space = small_space()
        schedule = schedule_from_betas(np.array([0.01]))
        pair = make_pair(space)
        model = tiny_model(space, T_max=1)
        config = TrainConfig(
            schedule_kind="linear", T=1, batch_size=1, steps=1, lr=1e-3,
            warmup_steps=0, reg_weight=0.0, ce_weight=0.0,
        )
        seed = 5
        out = training_loss(model, pair, schedule, config, torch.Generator().manual_seed(seed))
        assert float(out.anchor_term) > 0.0
        assert float(out.sum_term) == 0.0
        # Replicate the draws to confirm the anchor target is the clean embedding.
        gen = torch.Generator().manual_seed(seed)
        x0 = embed_pair(model.table, pair)  # beta0 = 0 consumes no randomness
        t = torch.randint(1, 2, (1,), generator=gen)
        eps = torch.randn((1, 5, 4), generator=gen, dtype=torch.float64)
        abar = torch.tensor([schedule.alpha_bar(1)], dtype=torch.float64)
        noisy_cap = abar.sqrt()[:, None, None] * x0.cap[None] + (1 - abar).sqrt()[:, None, None] * eps
        x_t = torch.cat([x0.img[None], noisy_cap], dim=1)
        pred = model(x_t, t)[0, 4:]
        expected = ((embed_caption(model.table, pair.caption_ids) - pred) ** 2).sum()
        assert float(out.anchor_term) == pytest.approx(float(expected.detach()), rel=1e-12)

    def test_term_gating_and_breakdown_invariant(self):
        space = small_space()
        schedule = build_schedule("sqrt", 5)
        pair = make_pair(space)
        model = tiny_model(space, T_max=5)
        off = TrainConfig(
            schedule_kind="sqrt", T=5, batch_size=1, steps=1, lr=1e-3,
            warmup_steps=0, reg_weight=0.0, ce_weight=0.0,
        )
        out = training_loss(model, pair, schedule, off, torch.Generator().manual_seed(3))
        assert float(out.reg_term) == 0.0 and float(out.ce_term) == 0.0
        assert torch.equal(out.total, out.anchor_term + out.sum_term)

        on = TrainConfig(
            schedule_kind="sqrt", T=5, batch_size=1, steps=1, lr=1e-3,
            warmup_steps=0, reg_weight=1e-3, ce_weight=1.0,
        )
        out = training_loss(model, pair, schedule, on, torch.Generator().manual_seed(3))
        assert float(out.reg_term) > 0.0 and float(out.ce_term) > 0.0
        assert torch.equal(
            out.total, out.anchor_term + out.sum_term + out.reg_term + out.ce_term
        )

    def test_non_finite_output_raises_training_fault(self):
        space = small_space()
        schedule = build_schedule("sqrt", 5)
        model = tiny_model(space, T_max=5)
        with torch.no_grad():
            model.input_proj.weight.fill_(float("nan"))
        config = TrainConfig(schedule_kind="sqrt", T=5, batch_size=1, steps=1, lr=1e-3, warmup_steps=0)
        with pytest.raises(TrainingFault, match="non-finite"):
            training_loss(model, make_pair(space), schedule, config, torch.Generator().manual_seed(0))

    @pytest.mark.parametrize("want_anchor", [False, True])
    def test_gradients_match_finite_differences(self, want_anchor):
        space = small_space()
        schedule = build_schedule("sqrt", 5)
        model = tiny_model(space, T_max=5)
        assert sum(p.numel() for p in model.parameters()) <= 5000
        pair = make_pair(space)
        config = TrainConfig(
            schedule_kind="sqrt", T=5, batch_size=1, steps=1, lr=1e-3,
            warmup_steps=0, reg_weight=1e-3, ce_weight=1.0,
        )
        seed = pick_seed(5, want_anchor=want_anchor, beta0_consumes=True)

        def scalar():
            gen = torch.Generator().manual_seed(seed)
            return training_loss(model, pair, schedule, config, gen).total

        named = sorted(model.named_parameters(), key=lambda kv: kv[0])
        checked = assert_grads_match_fd(named, scalar)
        assert checked >= 20 * 4


def tiny_corpus(space, n=3):
    pairs = []
    for i in range(n):
        patch = divmod(i % 4, 2)
        pairs.append(make_pair(space, words=(4 + (i % 3), 5), patch=patch))
    return pairs


def fast_train_configs(space, seed=0, steps=5):
    model_config = DenoiserConfig(
        H=4, d_model=8, n_layers=1, n_heads=2, ff_mult=2,
        L_img=4, L_cap=5, T_max=10, vocab_size=8,
        patch_feat_dim=space.patch_feat_dim,
    )
    config = TrainConfig(
        schedule_kind="sqrt", T=10, batch_size=2, steps=steps, lr=1e-3,
        warmup_steps=2, seed=seed,
    )
    return model_config, config


class TestTrain:
    def test_one_step_updates_parameters(self, tmp_path):
        space = small_space()
        model_config, config = fast_train_configs(space, steps=1)
        init = init_params(model_config, torch.Generator().manual_seed(0), torch.float32)
        from viewcap.rng import TAG_INIT, torch_generator

        reference = init_params(model_config, torch_generator(config.seed, TAG_INIT), torch.float32)
        trained = train(tiny_corpus(space), model_config, config)
        assert not torch.equal(trained.input_proj.weight, reference.input_proj.weight)
        del init

    def test_same_seed_gives_identical_curves_and_params(self, tmp_path):
        space = small_space()
        model_config, config = fast_train_configs(space, steps=6)
        curve_a = tmp_path / "a.csv"
        curve_b = tmp_path / "b.csv"
        model_a = train(tiny_corpus(space), model_config, config, curve_path=curve_a)
        model_b = train(tiny_corpus(space), model_config, config, curve_path=curve_b)
        assert curve_a.read_bytes() == curve_b.read_bytes()
        for (na, pa), (nb, pb) in zip(model_a.named_parameters(), model_b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)
        header = curve_a.read_text().splitlines()[0]
        assert header == "step,anchor_term,sum_term,reg_term,ce_term,total,total_ma"
        assert len(curve_a.read_text().splitlines()) == 7

    def test_checkpoint_round_trip_is_byte_identical(self, tmp_path):
        space = small_space()
        vocab = Vocabulary.from_words(["red", "leg", "seat", "top"])
        model_config, config = fast_train_configs(space, steps=2)
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        first = tmp_path / "a" / "ckpt.json"
        second = tmp_path / "b" / "ckpt.json"
        model = train(
            tiny_corpus(space), model_config, config,
            checkpoint_path=first, vocab=vocab, feature_space=space,
        )
        loaded = load_checkpoint(first)
        assert loaded.step == 2
        assert loaded.vocab.tokens == vocab.tokens
        assert loaded.feature_space == space
        assert loaded.train_config["schedule_kind"] == "sqrt"
        probe = torch.randn(1, 9, 4, generator=torch.Generator().manual_seed(1))
        assert torch.equal(
            model(probe, torch.tensor([3])), loaded.model(probe, torch.tensor([3]))
        )
        save_checkpoint(
            second, loaded.model, train_config=TrainConfig.from_dict(loaded.train_config),
            vocab=loaded.vocab, feature_space=loaded.feature_space, step=loaded.step,
        )
        assert first.read_bytes() == second.read_bytes()
        assert (tmp_path / "a" / "ckpt.bin").read_bytes() == (tmp_path / "b" / "ckpt.bin").read_bytes()

    def test_fault_carries_step_index(self, monkeypatch):
        space = small_space()
        model_config, config = fast_train_configs(space, steps=10)
        original = Denoiser.forward
        calls = {"n": 0}

        def exploding(self, values, t):
            calls["n"] += 1
            out = original(self, values, t)
            return out * float("inf") if calls["n"] >= 5 else out

        monkeypatch.setattr(Denoiser, "forward", exploding)
        with pytest.raises(TrainingFault) as info:
            train(tiny_corpus(space), model_config, config)
        assert info.value.step == 5

    def test_rejects_empty_dataset_and_small_t_max(self):
        space = small_space()
        model_config, config = fast_train_configs(space)
        with pytest.raises(ValueError, match="empty"):
            train([], model_config, config)
        bad_model = DenoiserConfig(
            H=4, d_model=8, n_layers=1, n_heads=2, ff_mult=2,
            L_img=4, L_cap=5, T_max=5, vocab_size=8,
            patch_feat_dim=space.patch_feat_dim,
        )
        with pytest.raises(ValueError, match="T_max"):
            train(tiny_corpus(space), bad_model, config)

    def test_resume_continues_step_counter(self, tmp_path):
        space = small_space()
        model_config, config5 = fast_train_configs(space, steps=5)
        first = tmp_path / "first.json"
        model = train(tiny_corpus(space), model_config, config5, checkpoint_path=first)
        loaded = load_checkpoint(first)
        assert loaded.step == 5
        config8 = TrainConfig(**{**config5.to_dict(), "steps": 8})
        second = tmp_path / "second.json"
        resumed = train(
            tiny_corpus(space), model_config, config8,
            checkpoint_path=second, init_model=loaded.model, start_step=loaded.step,
            extra_meta={"origin": "resumed"},
        )
        reloaded = load_checkpoint(second)
        assert reloaded.step == 8
        assert reloaded.meta["extra"] == {"origin": "resumed"}
        assert not torch.equal(resumed.input_proj.weight, model.input_proj.weight)

    def test_resume_is_deterministic(self, tmp_path):
        space = small_space()
        model_config, config5 = fast_train_configs(space, steps=5)
        first = tmp_path / "first.json"
        train(tiny_corpus(space), model_config, config5, checkpoint_path=first)
        config8 = TrainConfig(**{**config5.to_dict(), "steps": 8})
        a = train(tiny_corpus(space), model_config, config8,
                  init_model=load_checkpoint(first).model, start_step=5)
        b = train(tiny_corpus(space), model_config, config8,
                  init_model=load_checkpoint(first).model, start_step=5)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and torch.equal(pa, pb)

    def test_resume_validation(self):
        space = small_space()
        model_config, config = fast_train_configs(space, steps=5)
        model = init_params(model_config, torch.Generator().manual_seed(0), torch.float32)
        with pytest.raises(ValueError, match="resume"):
            train(tiny_corpus(space), model_config, config, start_step=2)
        with pytest.raises(ValueError, match="resume"):
            train(tiny_corpus(space), model_config, config, init_model=model)
        with pytest.raises(ValueError, match="start_step"):
            train(tiny_corpus(space), model_config, config, init_model=model, start_step=9)
        other_config = DenoiserConfig(**{**model_config.to_dict(), "H": 8})
        other = init_params(other_config, torch.Generator().manual_seed(0), torch.float32)
        with pytest.raises(ValueError, match="different model config"):
            train(tiny_corpus(space), model_config, config, init_model=other, start_step=2)


class TestSampleReverse:
    def test_seeded_determinism(self):
        space = small_space()
        model = tiny_model(space, T_max=10, dtype=torch.float32)
        schedule = build_schedule("sqrt", 10)
        view = make_view(space)
        lat_a, tok_a = sample_reverse(model, view, schedule, torch.Generator().manual_seed(4))
        lat_b, tok_b = sample_reverse(model, view, schedule, torch.Generator().manual_seed(4))
        assert torch.equal(lat_a, lat_b)
        assert np.array_equal(tok_a, tok_b)

    def test_respacing_to_full_length_is_identity(self):
        space = small_space()
        model = tiny_model(space, T_max=10, dtype=torch.float32)
        schedule = build_schedule("sqrt", 10)
        identity = respace(schedule, 10)
        view = make_view(space)
        lat_a, tok_a = sample_reverse(model, view, schedule, torch.Generator().manual_seed(9))
        lat_b, tok_b = sample_reverse(model, view, identity, torch.Generator().manual_seed(9))
        assert torch.equal(lat_a, lat_b)
        assert np.array_equal(tok_a, tok_b)

    def test_respaced_sampler_runs_shorter_chain(self):
        space = small_space()
        model = tiny_model(space, T_max=100, dtype=torch.float32)
        schedule = build_schedule("sqrt", 100)
        short = respace(schedule, 10)
        view = make_view(space)
        lat, tokens = sample_reverse(model, view, short, torch.Generator().manual_seed(2))
        assert lat.shape == (5, 4)
        assert tokens.shape == (5,)

    def test_clamped_rows_lie_on_token_rows(self):
        space = small_space()
        model = tiny_model(space, T_max=10, dtype=torch.float32)
        schedule = build_schedule("sqrt", 10)
        lat, tokens = sample_reverse(
            model, make_view(space), schedule, torch.Generator().manual_seed(3), clamp_enabled=True
        )
        rows = model.table.token_rows.detach()
        for k in range(lat.shape[0]):
            assert torch.equal(lat[k], rows[tokens[k]])

    def test_non_finite_params_abort_with_timestep(self):
        space = small_space()
        model = tiny_model(space, T_max=10, dtype=torch.float32)
        with torch.no_grad():
            model.output_proj.weight.fill_(float("nan"))
        schedule = build_schedule("sqrt", 10)
        with pytest.raises(SamplingFault, match="timestep 10") as info:
            sample_reverse(model, make_view(space), schedule, torch.Generator().manual_seed(0))
        assert info.value.timestep == 10

    def test_rejects_view_of_wrong_size(self):
        space = small_space()
        model = tiny_model(space, T_max=10, dtype=torch.float32)
        schedule = build_schedule("sqrt", 10)
        big = ViewPatchGrid.empty(space, 3)
        with pytest.raises(ValueError, match="expects"):
            sample_reverse(model, big, schedule, torch.Generator().manual_seed(0))


class TestOverfitTinyCorpus:
    def test_sampler_reproduces_training_captions(self):
        space = small_space()
        vocab_size = 10
        L_cap = 6
        pairs = []
        for i in range(4):
            patch = divmod(i, 2)
            words = (4 + i, 5 + (i % 2) * 2, 4 + ((i + 1) % 4))
            ids = np.array([BOS_ID, *words, EOS_ID, PAD_ID])
            pairs.append(InputPair(view=make_view(space, patch=patch, parts=(i % 3, i % 2, (i + 1) % 2, i % 2)), caption_ids=ids))
        model_config = DenoiserConfig(
            H=16, d_model=32, n_layers=2, n_heads=4, ff_mult=2,
            L_img=4, L_cap=L_cap, T_max=50, vocab_size=vocab_size,
            patch_feat_dim=space.patch_feat_dim,
        )
        config = TrainConfig(
            schedule_kind="sqrt", T=50, batch_size=4, steps=3000, lr=3e-3,
            warmup_steps=30, seed=1,
        )
        model = train(pairs, model_config, config)
        schedule = build_schedule("sqrt", 50)
        matches = 0
        for i, pair in enumerate(pairs):
            _, tokens = sample_reverse(
                model, pair.view, schedule, torch.Generator().manual_seed(100 + i)
            )
            matches += int(np.array_equal(tokens, pair.caption_ids))
        assert matches >= 3, f"only {matches}/4 captions reproduced"
