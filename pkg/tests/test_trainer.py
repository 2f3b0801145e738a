import csv
import json

import numpy as np
import pytest
import torch

from diptych_router import data, routing
from diptych_router.checkpoint import read_checkpoint, save_checkpoint, state_arrays
from diptych_router.model import ModelConfig, Routing, ToyMMDiT
from diptych_router.trainer import (NumericalAbort, PretrainConfig, TrainConfig, collate, flow_loss, load_train_config,
                                    make_model, pretrain_sample, train)

from helpers import randomize


class Oracle(torch.nn.Module):
    """Predicts the exact velocity for a known clean target: (x_t - x0) / t."""

    def __init__(self, x0):
        super().__init__()
        self.x0 = x0

    def forward(self, x_t, t, *args):
        return (x_t - self.x0) / t.view(-1, 1, 1, 1)


class Zero(torch.nn.Module):
    def forward(self, x_t, *args):
        return torch.zeros_like(x_t)


def singles(corpus, count, seed=0):
    rng = np.random.default_rng(seed)
    return [data.curriculum_batch(1, corpus, rng) for _ in range(count)]


class TestFlowLoss:
    def test_perfect_predictor(self, corpus):
        batch = collate(singles(corpus, 4), ModelConfig())
        loss = flow_loss(Oracle(batch.target.double()), batch, torch.Generator().manual_seed(0))
        assert loss.item() < 1e-8

    def test_zero_predictor_matches_expectation(self, corpus):
        batch = collate(singles(corpus, 8), ModelConfig())
        g = torch.Generator().manual_seed(1)
        draws = torch.tensor([flow_loss(Zero(), batch, g).item() for _ in range(400)], dtype=torch.float64)
        expected = (batch.target.double() ** 2).mean().item() + 1.0  # E|eps - x0|^2 / dim
        assert abs(draws.mean().item() - expected) < 4 * draws.std().item() / np.sqrt(len(draws))

    def test_condition_content_irrelevant_without_conditions(self, corpus, small_config):
        model = ToyMMDiT(small_config)
        with torch.no_grad():
            for p in model.parameters():
                p.normal_(0, 0.1)
        samples = singles(corpus, 2)
        altered = [data.TrainingSample([np.zeros_like(s.cond_images[0])], s.cond_prompts, s.target_image,
                                       s.target_prompt, s.spans, s.pairing, s.specs) for s in samples]
        losses = [flow_loss(model, collate(b, small_config, text_only=True), torch.Generator().manual_seed(2)).item()
                  for b in (samples, altered)]
        assert losses[0] == losses[1]

    def test_collate_rejects_mixed_counts(self, corpus):
        rng = np.random.default_rng(0)
        mixed = [data.curriculum_batch(1, corpus, rng), data.curriculum_batch(3, corpus, rng)]
        with pytest.raises(ValueError):
            collate(mixed, ModelConfig())


class TestPretrainSamples:
    def test_composite_share(self, corpus):
        rng = np.random.default_rng(0)
        draws = [pretrain_sample(corpus, rng, 0.5) for _ in range(4000)]
        assert abs(np.mean([d.c == 2 for d in draws]) - 0.5) < 0.03
        pairs = [d for d in draws if d.c == 2]
        same = np.mean([d.specs[0].category == d.specs[1].category for d in pairs])
        assert 0.45 < same < 0.65  # half forced same-category, plus chance matches among random pairs

    def test_extremes(self, corpus):
        rng = np.random.default_rng(1)
        assert all(pretrain_sample(corpus, rng, 0.0).c == 1 for _ in range(200))
        assert all(pretrain_sample(corpus, rng, 1.0).c == 2 for _ in range(200))

    def test_share_validated(self):
        with pytest.raises(ValueError):
            PretrainConfig(composite=1.5)


class TestConfig:
    def test_json_roundtrip(self, tmp_path):
        cfg = TrainConfig(stage_iters=(3, 2, 1), dynamic_routing=False, seed=4)
        path = tmp_path / "train.json"
        path.write_text(json.dumps(cfg.to_json()))
        loaded = load_train_config(path)
        assert loaded == cfg

    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.stage_iters == (2000, 1000, 1000) and cfg.batch_size == 8 and cfg.lr == 1e-4

    def test_negative_iterations(self):
        with pytest.raises(ValueError):
            TrainConfig(stage_iters=(1, -1, 0))

    def test_dual_switch_reaches_model(self):
        assert TrainConfig(dual_lora=False).model.dual_lora is False


def small_train_config(small_config, **kw):
    return TrainConfig(model=small_config, batch_size=4, **kw)


class TestTrain:
    def test_zero_iterations_keep_initialisation(self, corpus, small_config, tmp_path):
        cfg = small_train_config(small_config, stage_iters=(0, 0, 0), seed=3)
        result = train(cfg, corpus, tmp_path)
        assert [p.name for p in result.checkpoints] == ["stage1.ckpt", "stage2.ckpt", "stage3.ckpt"]
        init = state_arrays(make_model(small_config, 3))
        _, arrays = read_checkpoint(tmp_path / "stage3.ckpt")
        assert arrays.keys() == init.keys()
        assert all(np.array_equal(arrays[k], init[k]) for k in init)

    def test_stage_one_never_builds_diptychs(self, corpus, small_config, monkeypatch):
        def refuse(*args, **kwargs):
            raise AssertionError("diptych built in stage 1")

        monkeypatch.setattr(data, "make_diptych", refuse)
        monkeypatch.setattr(data, "make_composite", refuse)
        seen = []
        train(small_train_config(small_config, stage_iters=(6, 0, 0)), corpus,
              on_step=lambda it, stage, loss, samples: seen.extend(s.c for s in samples))
        assert seen and set(seen) == {1}

    def test_base_frozen_and_lora_moves(self, corpus, small_config, tmp_path):
        init = randomize(make_model(small_config, 0), scale=0.1)
        base_ckpt = save_checkpoint(tmp_path / "base.ckpt", init)
        result = train(small_train_config(small_config, stage_iters=(2, 2, 2), base_checkpoint=str(base_ckpt)), corpus)
        before, after = state_arrays(init), state_arrays(result.model)
        for k in before:
            if k.startswith("base."):
                assert np.array_equal(before[k], after[k]), k
        assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("lora."))

    def test_bit_reproducible(self, corpus, small_config, tmp_path):
        cfg = small_train_config(small_config, stage_iters=(3, 3, 3), seed=9)
        a = train(cfg, corpus, tmp_path / "a")
        b = train(cfg, corpus, tmp_path / "b")
        assert a.losses == b.losses
        assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
        assert (tmp_path / "a" / "stage3.ckpt").read_bytes() == (tmp_path / "b" / "stage3.ckpt").read_bytes()

    def test_loss_csv(self, corpus, small_config, tmp_path):
        train(small_train_config(small_config, stage_iters=(2, 1, 1)), corpus, tmp_path)
        rows = list(csv.reader(open(tmp_path / "loss.csv")))
        assert rows[0] == ["iter", "stage", "loss"]
        assert [(r[0], r[1]) for r in rows[1:]] == [("1", "1"), ("2", "1"), ("3", "2"), ("4", "3")]

    def test_nan_aborts(self, corpus, small_config, tmp_path):
        model = ToyMMDiT(small_config)
        with torch.no_grad():
            model.head.bias.fill_(float("nan"))
        save_checkpoint(tmp_path / "bad.ckpt", model)
        cfg = small_train_config(small_config, stage_iters=(1, 0, 0), base_checkpoint=str(tmp_path / "bad.ckpt"))
        with pytest.raises(NumericalAbort, match="iter 1"):
            train(cfg, corpus)

    @pytest.mark.parametrize("dynamic", [True, False])
    def test_debug_audits_every_step(self, corpus, small_config, monkeypatch, dynamic):
        calls = []
        original = routing.audit_routing

        def spy(mask, expected_open=None):
            calls.append(expected_open)
            original(mask, expected_open)

        monkeypatch.setattr(routing, "audit_routing", spy)
        cfg = small_train_config(small_config, stage_iters=(0, 0, 2), debug=True, dynamic_routing=dynamic)
        train(cfg, corpus)
        l_prime = small_config.n_prime + small_config.m_prime
        assert len(calls) == 2 * small_config.layers
        assert set(calls) == {l_prime if dynamic else 2 * l_prime}


def test_smoke_loss_decreases(corpus, base_checkpoint):
    """First 50 iterations of the default schedule lower a fixed probe loss for >= 9 of 10 seeds."""
    probe = collate(singles(corpus, 16, seed=123), ModelConfig())
    wins = 0
    for seed in range(10):
        cfg = TrainConfig(stage_iters=(50, 0, 0), seed=seed, base_checkpoint=str(base_checkpoint))
        start = make_model(cfg.model, seed, cfg.base_checkpoint)
        trained = train(cfg, corpus).model
        with torch.no_grad():
            before, after = (flow_loss(m, probe, torch.Generator().manual_seed(7), Routing()).item() for m in (start, trained))
        wins += after < before
    assert wins >= 9
