from __future__ import annotations

import math

import numpy as np
import pytest

from conftest import MICRO, TINY, random_image, random_sequence
from reference import reference_answer_logprob, reference_logits
from vfl_workbench import numkit as nk
from vfl_workbench.errors import CapacityError, ContractError, ShapeError
from vfl_workbench.model import (
    KvCache,
    ModelConfig,
    MultimodalSequence,
    Params,
    batch_loss,
    bind,
    count_parameters,
    decode_step,
    embed_image,
    full_forward,
    generate,
    param_shapes,
    patchify,
    prefill,
    prefill_context,
    sequence_logprob,
    step_logprobs,
    sum_logprobs,
)
from vfl_workbench.tokenizer import BOS_ID, EOS_ID, IMG_ID


# ---------------------------------------------------------------------------
# Config and parameters
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ContractError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ContractError):
        ModelConfig(image_size=30, patch_size=8)
    with pytest.raises(ContractError):
        ModelConfig(n_layers=0)


def test_config_dict_and_hash():
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.config_hash() == ModelConfig().config_hash()
    assert cfg.config_hash() != ModelConfig(n_layers=4).config_hash()
    with pytest.raises(ContractError):
        ModelConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})


def test_default_geometry():
    cfg = ModelConfig()
    assert cfg.n_vision == 16
    assert cfg.head_dim == 16
    assert cfg.patch_dim == 64


def test_initialize_is_seeded(tiny_config):
    a = Params.initialize(tiny_config, seed=3)
    b = Params.initialize(tiny_config, seed=3)
    c = Params.initialize(tiny_config, seed=4)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
    assert set(a.tensors) == set(param_shapes(tiny_config))
    np.testing.assert_array_equal(a["layers.0.attn_norm"], np.ones(tiny_config.d_model))


def test_params_validate_shapes(tiny_config, tiny_model):
    bad = tiny_model.named_arrays()
    bad["lm_head"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        Params(tiny_config, bad)
    missing = tiny_model.named_arrays()
    del missing["final_norm"]
    with pytest.raises(ContractError):
        Params(tiny_config, missing)


def test_count_parameters(micro_model):
    cfg = MICRO
    d, ff, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    per_layer = 2 * d + 4 * d * d + 2 * d * ff
    expected = cfg.patch_dim * d + d + v * d + cfg.max_seq * d + d + d * v + cfg.n_layers * per_layer
    assert count_parameters(micro_model.tensors) == expected


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------

def test_patchify_is_row_major(tiny_config):
    g, p = tiny_config.grid, tiny_config.patch_size
    image = np.zeros(tiny_config.image_shape, dtype=np.float32)
    for cell in range(g * g):
        r, c = divmod(cell, g)
        image[r * p:(r + 1) * p, c * p:(c + 1) * p, :] = cell
    patches = patchify(image, tiny_config)
    assert patches.shape == (g * g, tiny_config.patch_dim)
    for cell in range(g * g):
        assert np.all(patches[cell] == cell)


def test_patchify_rejects_wrong_image(tiny_config):
    with pytest.raises(ShapeError):
        patchify(np.zeros((16, 16, 1)), tiny_config)


def test_sequence_validation(tiny_config):
    image = np.zeros(tiny_config.image_shape, dtype=np.float32)
    with pytest.raises(ContractError):
        MultimodalSequence(tokens=[BOS_ID, 10, IMG_ID], vision_span=(1, 3), image=image)
    with pytest.raises(ContractError):
        MultimodalSequence(tokens=[BOS_ID, IMG_ID], vision_span=(1, 2), image=None)
    with pytest.raises(ContractError):
        MultimodalSequence(tokens=[BOS_ID, 10, 11], vision_span=(0, 0), positions=[0, 2, 2])


def test_text_only_keeps_positions(tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(0), n_text=3, n_answer=2)
    text = seq.text_only()
    n_v = tiny_config.n_vision
    assert text.tokens == [seq.tokens[0]] + seq.tokens[1 + n_v:]
    assert text.positions == [0] + list(range(1 + n_v, 4 + n_v))
    assert text.vision_span == (1, 1)
    assert text.answer == seq.answer


def test_embed_image_shape(tiny_model, tiny_config):
    u = embed_image(tiny_model, random_image(tiny_config, np.random.default_rng(0)))
    assert u.shape == (tiny_config.n_vision, tiny_config.d_model)


# ---------------------------------------------------------------------------
# Forward pass against the independent reference
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_full_forward_matches_reference(seed, tiny_config):
    rng = np.random.default_rng(seed)
    params = Params.initialize(tiny_config, seed=seed)
    seq = random_sequence(tiny_config, rng, n_text=int(rng.integers(1, 8)))
    with nk.float64_mode():
        logits = full_forward(params, seq)
    np.testing.assert_allclose(logits, reference_logits(params, seq), rtol=0, atol=1e-9)


def test_text_only_forward_matches_reference(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(5), n_text=4).text_only()
    with nk.float64_mode():
        logits = full_forward(tiny_model, seq)
    np.testing.assert_allclose(logits, reference_logits(tiny_model, seq), rtol=0, atol=1e-9)


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

def test_prefill_cache_layout(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(1), n_text=4)
    cache, logits = prefill(tiny_model, seq)
    assert cache.n_layers == tiny_config.n_layers
    for layer in range(tiny_config.n_layers):
        assert cache.rows(layer) == len(seq)
        assert cache.keys[layer].shape == (len(seq), tiny_config.d_model)
        np.testing.assert_array_equal(cache.vision_rows(layer), np.arange(1, 1 + tiny_config.n_vision))
    assert cache.next_position == len(seq)
    assert logits.shape == (tiny_config.vocab_size,)


def test_prefill_logits_match_full_forward(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(2), n_text=6)
    _, logits = prefill(tiny_model, seq)
    np.testing.assert_allclose(logits, full_forward(tiny_model, seq)[-1], rtol=0, atol=1e-5)


@pytest.mark.parametrize("seed", range(20))
def test_cached_decoding_matches_uncached(seed, tiny_config):
    rng = np.random.default_rng(seed)
    params = Params.initialize(tiny_config, seed=seed)
    seq = random_sequence(tiny_config, rng, n_text=int(rng.integers(1, 6)))
    with nk.float64_mode():
        cache, logits = prefill(params, seq)
        fed: list[int] = []
        for _ in range(8):
            expected = full_forward(params, seq.extend_prompt(fed))[-1]
            np.testing.assert_allclose(logits, expected, rtol=0, atol=1e-5)
            token = int(rng.integers(IMG_ID + 1, tiny_config.vocab_size))
            fed.append(token)
            logits = decode_step(params, cache, token)
    for layer in range(tiny_config.n_layers):
        assert cache.rows(layer) == len(seq) + 8


def test_cached_decoding_float32(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(9), n_text=3)
    cache, logits = prefill(tiny_model, seq)
    fed: list[int] = []
    for token in (10, 20, 30, 40):
        np.testing.assert_allclose(logits, full_forward(tiny_model, seq.extend_prompt(fed))[-1], atol=1e-4)
        fed.append(token)
        logits = decode_step(tiny_model, cache, token)


def test_decode_step_errors(tiny_model, tiny_config):
    empty = KvCache.empty(tiny_config, (1, 1 + tiny_config.n_vision))
    with pytest.raises(ContractError):
        decode_step(tiny_model, empty, 10)
    seq = random_sequence(tiny_config, np.random.default_rng(0), n_text=2)
    cache, _ = prefill(tiny_model, seq)
    with pytest.raises(ContractError):
        decode_step(tiny_model, cache, tiny_config.vocab_size)
    cache.next_position = tiny_config.max_seq
    with pytest.raises(CapacityError):
        decode_step(tiny_model, cache, 10)


def test_prefill_over_capacity(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(0), n_text=tiny_config.max_seq)
    with pytest.raises(CapacityError):
        prefill(tiny_model, seq)


def test_cache_append_keeps_positions_increasing(tiny_config):
    cache = KvCache.empty(tiny_config, (0, 0))
    rows = np.zeros((2, tiny_config.d_model), dtype=np.float32)
    cache.append(0, rows, rows, np.array([0, 1]))
    with pytest.raises(ContractError):
        cache.append(0, rows, rows, np.array([1, 2]))


def test_cache_copy_is_deep(tiny_model, tiny_config):
    cache, _ = prefill(tiny_model, random_sequence(tiny_config, np.random.default_rng(0), n_text=2))
    clone = cache.copy()
    clone.keys[0][:] = 0.0
    assert np.any(cache.keys[0] != 0.0)


# ---------------------------------------------------------------------------
# Generation and scoring
# ---------------------------------------------------------------------------

def test_generate_is_deterministic_and_bounded(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(4), n_text=4)
    out = generate(tiny_model, seq, max_new=5)
    assert out == generate(tiny_model, seq, max_new=5)
    assert len(out) <= 5
    assert EOS_ID not in out


def test_generate_matches_manual_argmax(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(6), n_text=4)
    out = generate(tiny_model, seq, max_new=4)
    fed: list[int] = []
    for token in out:
        logits = full_forward(tiny_model, seq.extend_prompt(fed))[-1]
        assert int(np.argmax(logits)) == token
        fed.append(token)


def test_generate_rejects_bad_budget(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(0), n_text=2)
    with pytest.raises(ContractError):
        generate(tiny_model, seq, max_new=0)


def test_prefill_context_holds_back_last_token(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(3), n_text=3)
    cache, query = prefill_context(tiny_model, seq)
    assert query == seq.tokens[-1]
    assert cache.rows(0) == len(seq) - 1
    assert cache.next_position == len(seq) - 1


def test_prefill_context_needs_prompt_text(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(3), n_text=1)
    with pytest.raises(ContractError):
        prefill_context(tiny_model, seq.prefix(1 + tiny_config.n_vision))


@pytest.mark.parametrize("seed", range(3))
def test_sequence_logprob_matches_reference(seed, tiny_config):
    params = Params.initialize(tiny_config, seed=seed)
    seq = random_sequence(tiny_config, np.random.default_rng(seed), n_text=3, n_answer=3)
    with nk.float64_mode():
        joint = sequence_logprob(params, seq)
    assert joint == pytest.approx(reference_answer_logprob(params, seq), abs=1e-9)
    assert joint < 0


def test_joint_equals_sum_of_steps(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(8), n_text=3, n_answer=4)
    steps = step_logprobs(tiny_model, seq)
    assert len(steps) == len(seq.answer)
    assert sequence_logprob(tiny_model, seq) == sum_logprobs(steps)


def test_scoring_needs_answer(tiny_model, tiny_config):
    with pytest.raises(ContractError):
        sequence_logprob(tiny_model, random_sequence(tiny_config, np.random.default_rng(0), n_text=2))


# ---------------------------------------------------------------------------
# Batched loss
# ---------------------------------------------------------------------------

def test_batch_loss_is_mean_answer_nll(tiny_model, tiny_config):
    rng = np.random.default_rng(11)
    batch = [random_sequence(tiny_config, rng, n_text=2, n_answer=2),
             random_sequence(tiny_config, rng, n_text=5, n_answer=4)]
    with nk.float64_mode():
        loss = batch_loss(tiny_model, bind(tiny_model), batch).item()
        total = sum(-sequence_logprob(tiny_model, seq) for seq in batch)
    n_answer = sum(len(seq.answer) for seq in batch)
    assert loss == pytest.approx(total / n_answer, rel=1e-9)


def test_batch_loss_rejects_mixed_spans(tiny_model, tiny_config):
    seq = random_sequence(tiny_config, np.random.default_rng(0), n_text=2, n_answer=1)
    with pytest.raises(ContractError):
        batch_loss(tiny_model, bind(tiny_model), [seq, seq.text_only()])


@pytest.mark.parametrize(
    "dims",
    [(2, 8, 2, 16), (1, 8, 1, 8), (2, 4, 2, 12), (3, 6, 3, 8), (1, 12, 4, 4)],
)
def test_model_loss_gradient(dims):
    n_layers, d_model, n_heads, d_ff = dims
    cfg = ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, d_ff=d_ff,
                      image_size=16, patch_size=8, max_seq=24)
    params = Params.initialize(cfg, seed=sum(dims))
    rng = np.random.default_rng(sum(dims))
    batch = [random_sequence(cfg, rng, n_text=2, n_answer=2), random_sequence(cfg, rng, n_text=4, n_answer=1)]
    names = ["patch_proj.bias", "layers.0.wk", f"layers.{n_layers - 1}.ffn_norm", "final_norm"]

    with nk.float64_mode():
        tape = nk.Tape()
        analytic = nk.backward(tape, batch_loss(params, bind(params, tape, names), batch))

        def loss(point):
            moved = params.replace(point)
            return batch_loss(moved, bind(moved), batch).item()

        numeric = nk.numerical_gradient(loss, {n: params[n] for n in names})

    for name in names:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-7, err_msg=name)


def test_logits_finite_for_default_config():
    params = Params.initialize(TINY, seed=1)
    seq = random_sequence(TINY, np.random.default_rng(1), n_text=3)
    with nk.check_finite():
        logits = full_forward(params, seq)
    assert all(math.isfinite(v) for v in logits.reshape(-1))
