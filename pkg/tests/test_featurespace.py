import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from partalign.config import ModelConfig
from partalign.featurespace import (BOS_ID, EOS_ID, PAD_ID, ImageEncoder, PartMask, TextEncoder,
                                    Tokenizer, encode_image, encode_text, patchify,
                                    pool_part_features, unpatchify)
from oracles import fd_relative_error


def test_paper_scale_image_tokens():
    torch.manual_seed(0)
    enc = ImageEncoder(ModelConfig(num_layers=1))
    with torch.no_grad():
        out = enc(torch.rand(1, 3, 384, 384))
    assert out.shape == (1, 577, 512)


def test_small_image_tokens_and_determinism():
    torch.manual_seed(0)
    cfg = ModelConfig(embed_dim=8, num_heads=2, image_size=32, patch_size=16)
    enc = ImageEncoder(cfg)
    img = np.random.default_rng(0).random((32, 32, 3))
    a, b = encode_image(enc, img), encode_image(enc, img.copy())
    assert a.shape == (5, 8)
    assert torch.equal(a, b)


def test_image_shape_mismatch_is_descriptive():
    enc = ImageEncoder(ModelConfig(embed_dim=8, num_heads=2, image_size=32, patch_size=16))
    with pytest.raises(ValueError, match="32, 32, 3"):
        encode_image(enc, np.zeros((16, 16, 3)))
    with pytest.raises(ValueError, match=r"\(N, 3, 32, 32\)"):
        enc(torch.zeros(1, 3, 30, 32))


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([(16, 4), (24, 8), (32, 16), (48, 12)]))
def test_token_count_contract(sizes):
    size, patch = sizes
    cfg = ModelConfig(embed_dim=8, num_heads=2, image_size=size, patch_size=patch, num_layers=1)
    with torch.no_grad():
        out = ImageEncoder(cfg)(torch.rand(2, 3, size, size))
    assert out.shape == (2, (size // patch) ** 2 + 1, 8)


def test_patchify_round_trip():
    x = torch.rand(2, 3, 16, 16)
    p = patchify(x, 4)
    assert p.shape == (2, 16, 48)
    # patch (row 1, col 2) top-left pixel, channel 0
    assert p[0, 1 * 4 + 2, 0] == x[0, 0, 4, 8]
    assert torch.equal(unpatchify(p, 4), x)


def test_full_length_caption_encoding():
    torch.manual_seed(0)
    enc = TextEncoder(ModelConfig(num_layers=1))
    ids = [BOS_ID] + [10] * 75 + [EOS_ID]
    with torch.no_grad():
        out = encode_text(enc, ids)
    assert out.tokens.shape == (77, 512) and out.pooled.shape == (512,)
    assert not out.truncated


def test_overlong_text_is_truncated_and_flagged():
    enc = TextEncoder(ModelConfig(embed_dim=8, num_heads=2, max_text_len=10))
    with torch.no_grad():
        out = encode_text(enc, [BOS_ID] + [12] * 20 + [EOS_ID])
    assert out.truncated and out.tokens.shape[0] == 10


def test_tokenizer_truncation_flag():
    tok = Tokenizer()
    enc = tok.encode("the red sedan " * 40, 77)
    assert enc.truncated and len(enc.ids) == 77 and enc.ids[-1] == EOS_ID


def test_empty_caption_still_has_pooled_vector():
    enc = TextEncoder(ModelConfig(embed_dim=8, num_heads=2, max_text_len=10))
    tok = Tokenizer()
    ids = tok.encode("", 10).ids
    assert ids == [BOS_ID, EOS_ID]
    with torch.no_grad():
        out = encode_text(enc, ids)
    assert torch.isfinite(out.pooled).all() and out.pooled.norm() > 0


def test_text_batch_permutation_equivariance():
    torch.manual_seed(0)
    enc = TextEncoder(ModelConfig(embed_dim=8, num_heads=2, max_text_len=12))
    tok = Tokenizer()
    rows = [tok.pad(tok.encode(t, 12).ids, 12) for t in ("a red sedan", "the blue van has chrome wheels")]
    ids = torch.tensor(rows)
    with torch.no_grad():
        tokens, pooled, _ = enc(ids)
        tokens_r, pooled_r, _ = enc(ids.flip(0))
    assert torch.allclose(tokens_r, tokens.flip(0), atol=1e-6)
    assert torch.allclose(pooled_r, pooled.flip(0), atol=1e-6)


def test_padding_does_not_leak_into_tokens():
    torch.manual_seed(0)
    enc = TextEncoder(ModelConfig(embed_dim=8, num_heads=2, max_text_len=12))
    short = torch.tensor([[BOS_ID, 20, 30, EOS_ID, PAD_ID, PAD_ID]])
    with torch.no_grad():
        a = enc(short)[1]
        b = enc(short[:, :4])[1]
    assert torch.allclose(a, b, atol=1e-6)


# -- part pooling -------------------------------------------------------------


def test_pool_singleton_and_full_mean():
    tokens = torch.randn(6, 4)
    mask = np.zeros((2, 6), np.uint8)
    mask[0, 3] = 1
    mask[1] = 1
    pooled, present = pool_part_features(tokens, PartMask(mask))
    assert torch.equal(pooled[0], tokens[3])
    assert torch.allclose(pooled[1], tokens.mean(0))
    assert present.tolist() == [True, True]


def test_pool_random_four_patch_mask_matches_elementwise_average(rng):
    tokens = torch.tensor(rng.normal(size=(16, 5)))
    picks = rng.choice(16, 4, replace=False)
    mask = np.zeros((1, 16), np.uint8)
    mask[0, picks] = 1
    pooled, _ = pool_part_features(tokens, mask)
    for j in range(5):
        expected = sum(float(tokens[p, j]) for p in picks) / 4
        assert float(pooled[0, j]) == pytest.approx(expected, abs=1e-12)


def test_pool_absent_part_is_zero_and_flagged():
    pooled, present = pool_part_features(torch.randn(4, 3), np.zeros((2, 4)))
    assert torch.equal(pooled, torch.zeros(2, 3))
    assert not present.any()


def test_pool_mask_length_mismatch():
    with pytest.raises(ValueError):
        pool_part_features(torch.randn(5, 3), np.ones((2, 4)))


def test_part_mask_rejects_non_binary():
    with pytest.raises(ValueError):
        PartMask(np.array([[0, 2]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_pool_permutation_equivariant_in_parts(seed, k):
    g = np.random.default_rng(seed)
    tokens = torch.tensor(g.normal(size=(9, 3)))
    mask = (g.random((k, 9)) < 0.4).astype(np.uint8)
    perm = g.permutation(k)
    a, pa = pool_part_features(tokens, mask)
    b, pb = pool_part_features(tokens, mask[perm])
    assert torch.allclose(a[perm], b) and torch.equal(pa[perm], pb)


def test_encoder_gradients_match_finite_differences(float64, tiny_config, rng):
    torch.manual_seed(0)
    image_enc = ImageEncoder(tiny_config)
    text_enc = TextEncoder(tiny_config)
    images = torch.rand(2, 3, 16, 16)
    ids = torch.tensor([[BOS_ID, 20, 31, 44, EOS_ID, PAD_ID], [BOS_ID, 9, EOS_ID, PAD_ID, PAD_ID, PAD_ID]])
    mask = torch.tensor(rng.random((2, 3, 16)) < 0.5, dtype=torch.float64)
    # plain sums of layer-normed outputs are constant, so project onto random weights
    w = torch.tensor(rng.normal(size=8))

    def probe():
        tokens = image_enc(images)
        pooled, _ = pool_part_features(tokens[:, 1:], mask)
        return ((pooled.sum((0, 1)) + tokens[:, 0].sum(0) + text_enc(ids)[1].sum(0)) * w).sum()

    params = [image_enc.patch_embed.weight, image_enc.pos_embed, image_enc.blocks[0].attn.q_proj.weight,
              text_enc.token_embed.weight, text_enc.blocks[0].mlp.fc1.weight]
    assert fd_relative_error(probe, params, rng) < 1e-3
