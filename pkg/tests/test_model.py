import numpy as np
import pytest
import torch

from diptych_router import routing
from diptych_router.layout import PromptSpanTable, build_layout, segment_kinds
from diptych_router.lora import gate_codes
from diptych_router.model import (ModelConfig, Routing, TokenBatch, ToyMMDiT, embed_positions, mma_block,
                                  patchify, unpatchify)

from helpers import random_inputs, randomize
from oracles import block_oracle


class TestPatchify:
    def test_token_count(self):
        tokens = patchify(torch.rand(8, 8, 3), 4)
        assert tokens.shape == (4, 48)

    def test_roundtrip_orthonormal_embed(self):
        image = torch.rand(2, 8, 12, 3, dtype=torch.float64)
        Q, _ = torch.linalg.qr(torch.randn(48, 48, dtype=torch.float64))
        embedded = patchify(image, 4) @ Q
        back = unpatchify(embedded @ Q.T, 4, 8, 12)
        assert torch.allclose(back, image, atol=1e-12)

    def test_constant_image(self):
        tokens = patchify(torch.full((8, 8, 3), 0.25), 4)
        assert torch.equal(tokens, tokens[:1].expand_as(tokens))

    def test_row_major_order(self):
        image = torch.zeros(8, 8, 3)
        image[0:4, 4:8] = 1.0
        assert patchify(image, 4).sum(-1).tolist() == [0.0, 48.0, 0.0, 0.0]

    def test_divisibility(self):
        with pytest.raises(ValueError):
            patchify(torch.rand(6, 8, 3), 4)


class TestPositions:
    cfg = ModelConfig()

    def test_noise_origin(self):
        layout = self.cfg.layout(2)
        pos = embed_positions(layout, self.cfg)
        assert tuple(pos.grid[layout.noise.start]) == (0.0, 0.0)

    def test_condition_offset(self):
        layout = self.cfg.layout(2)
        pos = embed_positions(layout, self.cfg)
        assert tuple(pos.grid[layout.condition_image(0).start]) == (0.0, 32.0)
        assert tuple(pos.grid[layout.condition_image(1).start]) == (0.0, 64.0)

    def test_conditions_never_share_a_position(self):
        layout = self.cfg.layout(4)
        pos = embed_positions(layout, self.cfg)
        seen = set()
        for k in range(4):
            cells = {tuple(p) for p in pos.grid[layout.condition_image(k)]}
            assert len(cells) == layout.n_prime
            assert not cells & seen
            seen |= cells
        assert not seen & {tuple(p) for p in pos.grid[layout.noise]}

    def test_text_positions_sequential(self):
        layout = self.cfg.layout(1)
        pos = embed_positions(layout, self.cfg)
        assert pos.text[layout.prompt].tolist() == list(range(16))
        assert np.isnan(pos.grid[layout.prompt]).all()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(image_edge=30)
    cfg = ModelConfig()
    assert (cfg.n, cfg.n_prime, cfg.layout(2).L) == (64, 16, 120)
    assert ModelConfig.from_json(cfg.to_json()) == cfg


def _block_inputs(cfg, layout, seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, layout.L, cfg.d, generator=g)
    t_emb = torch.randn(1, cfg.d, generator=g)
    return x, t_emb


class TestBlock:
    def test_single_token(self, tiny_config):
        block = randomize(ToyMMDiT(tiny_config)).blocks[0]
        layout = build_layout(0, 0, 0, 0, 1)
        x, t_emb = _block_inputs(tiny_config, layout, 0)
        batch = TokenBatch(x, layout, segment_kinds(layout))
        out = mma_block(batch, routing.FlowMask.empty(layout), t_emb, block)
        assert torch.isfinite(out).all()
        ref = block_oracle(block, x[0].numpy(), t_emb[0].numpy(), gate_codes(batch.kinds), np.zeros((1, 1), bool))
        assert np.abs(out[0].detach().double().numpy() - ref).max() < 1e-5

    def test_dense_oracle_no_mask(self, tiny_config):
        block = randomize(ToyMMDiT(tiny_config), seed=1).blocks[1]
        layout = tiny_config.layout(2)
        x, t_emb = _block_inputs(tiny_config, layout, 1)
        kinds = segment_kinds(layout)
        out = mma_block(TokenBatch(x, layout, kinds), routing.FlowMask.empty(layout), t_emb, block)
        ref = block_oracle(block, x[0].numpy(), t_emb[0].numpy(), gate_codes(kinds), np.zeros((layout.L,) * 2, bool))
        assert np.abs(out[0].detach().double().numpy() - ref).max() < 1e-5

    def test_blocked_column_value_perturbation(self, tiny_config):
        block = randomize(ToyMMDiT(tiny_config), seed=2).blocks[0]
        layout = tiny_config.layout(2)
        x, t_emb = _block_inputs(tiny_config, layout, 2)
        kinds = segment_kinds(layout)
        j = 3  # an image token of condition 0
        blocked = torch.zeros(layout.L, layout.L, dtype=torch.bool)
        blocked[:, j] = True
        blocked[j, j] = False
        mask = routing.FlowMask(blocked, layout)
        base = mma_block(TokenBatch(x, layout, kinds), mask, t_emb, block)
        bump = torch.zeros_like(x)
        bump[0, j] = 100.0
        moved = mma_block(TokenBatch(x + bump, layout, kinds), mask, t_emb, block)
        others = [i for i in range(layout.L) if i != j]
        assert torch.equal(base[0, others], moved[0, others])
        assert not torch.equal(base[0, j], moved[0, j])


class TestForward:
    def test_default_init_is_zero_velocity(self):
        cfg = ModelConfig()
        model = ToyMMDiT(cfg)
        x_t, t, ci, ct, prompt, spans = random_inputs(cfg, 2, 2)
        v = model(x_t, t, ci, ct, prompt, spans)
        assert v.shape == (2, 32, 32, 3)
        assert torch.count_nonzero(v) == 0

    def test_deterministic(self, small_config):
        model = randomize(ToyMMDiT(small_config), 3, scale=0.1)
        args = random_inputs(small_config, 2, 2, seed=3)
        assert torch.equal(model(*args), model(*args))

    @pytest.mark.parametrize("c", [0, 1, 2, 3])
    def test_finite_on_wide_inputs(self, tiny_config, c):
        cfg = ModelConfig(**{**tiny_config.to_json(), "max_m": 12})
        model = randomize(ToyMMDiT(cfg), 4)
        x_t, t, ci, ct, prompt, spans = random_inputs(cfg, 3, c, seed=4, amplitude=10.0)
        v = model(x_t, t, ci, ct, prompt, spans)
        assert torch.isfinite(v).all()

    def test_text_to_image_path_skips_routing(self, small_config, monkeypatch):
        def boom(*args, **kwargs):
            raise AssertionError("routing code ran for c=0")

        monkeypatch.setattr(routing, "build_dynamic_mask", boom)
        monkeypatch.setattr(routing, "combine", boom)
        model = randomize(ToyMMDiT(small_config), 5, scale=0.1)
        x_t, t, _, _, prompt, _ = random_inputs(small_config, 2, 0)
        route = Routing(trace=[])
        model(x_t, t, None, None, prompt, None, route)
        assert route.trace == []

    def test_condition_content_changes_output(self, small_config):
        model = randomize(ToyMMDiT(small_config), 6, scale=0.1)
        x_t, t, ci, ct, prompt, spans = random_inputs(small_config, 1, 1, seed=6)
        a = model(x_t, t, ci, ct, prompt, spans)
        b = model(x_t, t, ci * 0.5, ct, prompt, spans)
        assert not torch.equal(a, b)

    def test_dynamic_routing_trace(self, small_config):
        model = randomize(ToyMMDiT(small_config), 7, scale=0.1)
        args = random_inputs(small_config, 2, 2, seed=7)
        route = Routing(trace=[], audit=True)
        model(*args, route=route)
        assert len(route.trace) == small_config.layers
        aff, assign = route.trace[0]
        assert aff.shape == (2, small_config.n, 2) and assign.shape == (2, small_config.n)
        assert torch.all(aff >= 0) and torch.all(aff <= 1)

    def test_per_head_routing_shapes(self, small_config):
        model = randomize(ToyMMDiT(small_config), 8, scale=0.1)
        route = Routing(trace=[], per_head=True)
        model(*random_inputs(small_config, 1, 2, seed=8), route=route)
        aff, assign = route.trace[0]
        assert aff.shape == (1, small_config.heads, small_config.n, 2)
        assert assign.shape == (1, small_config.heads, small_config.n)

    def test_dynamic_routing_needs_spans(self, small_config):
        model = ToyMMDiT(small_config)
        x_t, t, ci, ct, prompt, _ = random_inputs(small_config, 1, 2)
        with pytest.raises(ValueError):
            model(x_t, t, ci, ct, prompt, None)

    def test_permutation_consistency(self, small_config):
        """Swapping condition blocks (with their spans) permutes assignments and keeps noise outputs."""
        model = randomize(ToyMMDiT(small_config), 9, scale=0.1).double()
        x_t, t, ci, ct, prompt, spans = random_inputs(small_config, 1, 2, seed=9, dtype=torch.float64)
        batch = model.embed(x_t, ci, ct, prompt)
        layout = batch.layout
        lp = layout.l_prime
        perm = list(range(lp, 2 * lp)) + list(range(lp)) + list(range(2 * lp, layout.L))
        swapped = TokenBatch(batch.tokens[:, perm], layout, batch.kinds)
        swapped_spans = [PromptSpanTable.of([spans[0][1], spans[0][0]])]
        r1, r2 = Routing(trace=[]), Routing(trace=[])
        out1 = model.run_blocks(batch, t, spans, r1)
        out2 = model.run_blocks(swapped, t, swapped_spans, r2)
        assert torch.allclose(out1[:, layout.noise], out2[:, layout.noise], atol=1e-10)
        for (_, a1), (_, a2) in zip(r1.trace, r2.trace):
            assert torch.equal(a1, 1 - a2)
