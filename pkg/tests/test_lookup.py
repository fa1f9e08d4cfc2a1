import math

import pytest
import torch

from codeprior.errors import DimensionError
from codeprior.lookup import (CodePredictor, code_accuracy, encode_lq, gather_codes,
                              predict_codes, stage2_loss)
from codeprior.vq import VQConfig, decode_hq, encode_hq, quantize_nearest


@pytest.fixture
def predictor(small_vq):
    torch.manual_seed(1)
    return CodePredictor.from_stage1(small_vq, grid=(4, 4), layers=2, heads=2).eval()


def test_init_copies_encoder(small_vq, predictor):
    x = torch.rand(2, 3, 32, 32)
    assert torch.equal(encode_lq(x, predictor), encode_hq(x, small_vq))
    # the copy is independent
    with torch.no_grad():
        predictor.encoder.conv_in.weight.add_(1.0)
    assert not torch.equal(encode_lq(x, predictor), encode_hq(x, small_vq))


def test_shapes_and_argmax(predictor):
    x = torch.rand(2, 3, 32, 32)
    f_l = encode_lq(x, predictor)
    assert f_l.shape == (2, 8, 4, 4)
    logits, codes = predict_codes(f_l, predictor)
    assert logits.shape == (2, 16, 16) and codes.shape == (2, 4, 4)
    assert torch.equal(logits.argmax(-1).view(2, 4, 4), codes)
    l2, c2 = predict_codes(f_l, predictor)
    assert torch.equal(logits, l2) and torch.equal(codes, c2)
    with pytest.raises(DimensionError):
        predict_codes(torch.rand(1, 5, 4, 4), predictor)
    with pytest.raises(DimensionError):
        encode_lq(torch.rand(1, 3, 20, 32), predictor)


def test_other_grid_sizes(predictor):
    logits, codes = predict_codes(torch.rand(1, 8, 6, 2), predictor)
    assert logits.shape == (1, 12, 16)


def test_single_token():
    cfg = VQConfig(n_codes=12, dim=8, downsample=2, base_channels=4)
    p = CodePredictor(cfg, grid=(1, 1), layers=1, heads=2).eval()
    logits, codes = predict_codes(torch.rand(1, 8, 1, 1), p)
    assert logits.shape == (1, 1, 12)
    assert codes.shape == (1, 1, 1)


def test_head_permutation(small_vq, predictor):
    f_l = torch.rand(1, 8, 4, 4)
    _, codes = predict_codes(f_l, predictor)
    perm = torch.randperm(16, generator=torch.Generator().manual_seed(0))
    inverse = torch.argsort(perm)
    with torch.no_grad():
        # output column j of the new head is column perm[j] of the old one
        predictor.head.weight.copy_(predictor.head.weight[perm])
        predictor.head.bias.copy_(predictor.head.bias[perm])
    permuted_book = small_vq.codebook.weight[perm]
    _, new_codes = predict_codes(f_l, predictor)
    assert torch.equal(new_codes, inverse[codes])
    # both route to the same code vector
    assert torch.equal(gather_codes(new_codes, permuted_book), gather_codes(codes, small_vq.codebook.weight))


def test_gather_consistency(small_vq):
    f = encode_hq(torch.rand(1, 3, 32, 32), small_vq)
    q, idx = quantize_nearest(f, small_vq.codebook.weight)
    assert torch.equal(gather_codes(idx, small_vq.codebook.weight), q)
    stage1 = small_vq.decoder(q).clamp(0, 1)
    assert torch.equal(decode_hq(gather_codes(idx, small_vq.codebook.weight), small_vq), stage1)


def test_constant_gather(small_vq):
    c = small_vq.codebook.weight
    out = gather_codes(torch.full((1, 3, 3), 5), c)
    assert all(torch.equal(out[0, :, i, j], c[5]) for i in range(3) for j in range(3))


def test_stage2_loss_cases():
    n = 1024
    codes = torch.randint(0, n, (2, 3, 3))
    f = torch.randn(2, 4, 3, 3)
    uniform = torch.zeros(2, 9, n)
    total, d = stage2_loss(uniform, codes, f, f.clone(), 0.5)
    assert d["ce"] == pytest.approx(math.log(1024), abs=1e-6)
    assert d["qf"] == 0.0
    assert total.item() == pytest.approx(0.5 * math.log(1024), abs=1e-6)
    sharp = torch.zeros(2, 9, n).scatter_(-1, codes.view(2, 9, 1), 50.0)
    _, d = stage2_loss(sharp, codes, f, f, 0.5)
    assert d["ce"] < 1e-20
    assert code_accuracy(sharp, codes) == 1.0
    with pytest.raises(DimensionError):
        stage2_loss(uniform[:, :4], codes, f, f)
    with pytest.raises(DimensionError):
        stage2_loss(uniform, codes, f, f[:, :2])


def test_stage2_loss_monotone_in_terms():
    codes = torch.zeros(1, 2, 2, dtype=torch.long)
    logits = torch.zeros(1, 4, 8)
    f = torch.zeros(1, 4, 2, 2)
    base, _ = stage2_loss(logits, codes, f, f)
    worse_qf, _ = stage2_loss(logits, codes, f + 1, f)
    worse_ce, _ = stage2_loss(logits.index_fill(-1, torch.tensor([0]), -3.0), codes, f, f)
    assert worse_qf > base and worse_ce > base


def test_gradients_reach_only_predictor(small_vq, predictor):
    predictor.train()
    x = torch.rand(1, 3, 32, 32)
    with torch.no_grad():
        f_c, codes = quantize_nearest(encode_hq(x, small_vq), small_vq.codebook.weight)
    f_l, logits, _ = predictor(x)
    loss, _ = stage2_loss(logits, codes, f_l, f_c)
    loss.backward()
    assert predictor.encoder.conv_in.weight.grad is not None
    assert predictor.head.weight.grad is not None
    assert all(p.grad is None for p in small_vq.parameters())


def test_teacher_reproducible(small_vq):
    x = torch.rand(2, 3, 32, 32)
    a = quantize_nearest(encode_hq(x, small_vq), small_vq.codebook.weight)[1]
    b = quantize_nearest(encode_hq(x, small_vq), small_vq.codebook.weight)[1]
    assert torch.equal(a, b)
