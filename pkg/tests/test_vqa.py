"""Tests for t3kit.vqa"""

import math

import pytest
import torch

from t3kit import vqa
from t3kit.params import MCANParams


def test_representative_frames():
    assert vqa.representative_frames(30) == [14, 29]
    assert vqa.representative_frames(31) == [14, 29, 30]
    assert vqa.representative_frames(7) == [6]
    assert vqa.representative_frames(0) == []


def test_inference_partition_covers_every_frame():
    assert vqa.inference_partition(30) == [(14, range(0, 15)), (29, range(15, 30))]
    for n in (1, 14, 15, 16, 44, 45, 46):
        parts = vqa.inference_partition(n)
        covered = [f for _, frames in parts for f in frames]
        assert covered == list(range(n))
        for rep, frames in parts:
            assert rep == frames[-1]
            assert len(frames) <= 15
    with pytest.raises(ValueError):
        vqa.inference_partition(0)


def test_subsample_frames():
    records = [vqa.QARecord("a", f, "q", "x") for f in range(31)]
    records += [vqa.QARecord("b", f, "q", "y") for f in range(5)]
    kept = vqa.subsample_frames(records, {"a": 31, "b": 5})
    assert [(r.video_id, r.frame_idx) for r in kept] == [
        ("a", 14),
        ("a", 29),
        ("a", 30),
        ("b", 4),
    ]
    kept = vqa.subsample_frames(records, {"a": 31, "b": 5}, block_size=2)
    assert [r.frame_idx for r in kept if r.video_id == "b"] == [1, 3, 4]


def test_token_vocab():
    vocab = vqa.TokenVocab.from_questions(["What is it?", "what, is THAT"])
    assert vocab.words == ["<pad>", "<unk>", "what", "is", "it", "that"]
    assert vocab.encode("What is this?") == [2, 3, vqa.UNK]
    assert vocab.encode("what is it", 5) == [2, 3, 4, vqa.PAD, vqa.PAD]
    assert vocab.encode("what is it that", 2) == [2, 3]
    assert vocab.encode("", 2) == [vqa.UNK, vqa.PAD]


def test_answer_vocab():
    vocab = vqa.AnswerVocab(["open", "closed", "open"])
    assert vocab.answers == ("closed", "open")
    assert vocab.index("open") == 1 and vocab[0] == "closed"
    with pytest.raises(KeyError, match="ajar"):
        vocab.index("ajar")
    with pytest.raises(ValueError):
        vqa.AnswerVocab(["only"])


def test_pad_objects():
    x, mask = vqa.pad_objects([torch.ones(2, 3), torch.ones(5, 3)], 4)
    assert x.shape == (2, 4, 3)
    assert mask.tolist() == [[True, True, False, False], [True] * 4]
    assert x[0, 2:].abs().sum() == 0
    with pytest.raises(ValueError, match="feature set 1"):
        vqa.pad_objects([torch.ones(2, 3), torch.ones(2, 4)], 4)


def test_attention_masked_keys_get_no_weight():
    att = vqa.MultiHeadAttention(8, 2)
    x = torch.randn(2, 5, 8)
    mask = torch.tensor([[True] * 3 + [False] * 2, [True] * 5])
    out, w = att(x, x, x, mask)
    assert out.shape == (2, 5, 8)
    assert w.shape == (2, 2, 5, 5)
    assert w[0, :, :, 3:].abs().max() == 0
    assert torch.allclose(w.sum(-1), torch.ones(2, 2, 5))
    # padded keys do not change the output for valid queries
    out2, _ = att(x[:1, :3], x[:1, :3], x[:1, :3])
    assert torch.allclose(out[0, :3], out2[0], atol=1e-5)
    with pytest.raises(ValueError):
        att(x, x, x, mask[:, :4])
    with pytest.raises(ValueError):
        vqa.MultiHeadAttention(8, 3)


def test_attention_pool_weights():
    pool = vqa.AttentionPool(4, 8, 0.0)
    x = torch.randn(3, 6, 4)
    mask = torch.ones(3, 6, dtype=torch.bool)
    mask[0, 4:] = False
    w = pool.weights(x, mask)
    assert torch.allclose(w.sum(-1), torch.ones(3))
    assert w[0, 4:].abs().max() == 0
    assert pool(x, mask).shape == (3, 4)
    # a one-token sequence pools to itself
    assert torch.allclose(pool(x[:, :1]), x[:, 0])


def test_fqca_zero_output_layer_is_identity():
    fqca = vqa.FQCA(8, 5, 2)
    torch.nn.init.zeros_(fqca.fc1.weight)
    torch.nn.init.zeros_(fqca.fc1.bias)
    tilde = torch.randn(2, 8)
    out = fqca(tilde, torch.randn(2, 4, 5))
    assert torch.allclose(out, tilde)


def _params(**kwargs):
    params = MCANParams(
        size="custom",
        hidden_dim=16,
        heads=2,
        layers=2,
        flat_mlp_dim=8,
        word_dim=6,
        feature_dim=10,
        dropout=0.0,
    )
    for key, value in kwargs.items():
        setattr(params, key, value)
    return params


def _inputs(seed=0):
    generator = torch.Generator().manual_seed(seed)
    x, mask = vqa.pad_objects(
        [torch.randn(3, 10, generator=generator), torch.randn(5, 10, generator=generator)],
        5,
    )
    tokens = torch.tensor([[2, 3, 4, 0], [2, 5, 0, 0]])
    return x, mask, tokens


@pytest.mark.parametrize("source", ["flow", "raw"])
def test_mcan_shapes(source):
    torch.manual_seed(0)
    model = vqa.MCANModel(_params(fqca_source=source), 7, 4)
    x, mask, tokens = _inputs()
    logits = model(x, mask, tokens)
    assert logits.shape == (2, 4)
    scores = model.scores(x, mask, tokens)
    assert ((scores > 0) & (scores < 1)).all()
    f, q, weights = model.flows(x, mask, model.encode_question(tokens))
    assert f.shape == (2, 5, 16) and q.shape == (2, 4, 16)
    # L self-attention weights for the question, 2 per guided layer for the frame
    assert len(weights) == 2 + 2 * 2


def test_mcan_size_presets():
    assert MCANParams(size="small").dim == 512
    assert MCANParams(size="large").dim == 1024
    assert _params().dim == 16


def test_fqca_off_matches_baseline_init():
    torch.manual_seed(3)
    with_fqca = vqa.MCANModel(_params(fqca=True), 7, 4)
    torch.manual_seed(3)
    without = vqa.MCANModel(_params(fqca=False), 7, 4)
    state = with_fqca.state_dict()
    for key, value in without.state_dict().items():
        assert torch.equal(state[key], value), key
    assert any(k.startswith("fqca_") for k in state)
    with_fqca.use_fqca = False
    x, mask, tokens = _inputs()
    with_fqca.eval(), without.eval()
    assert torch.equal(with_fqca(x, mask, tokens), without(x, mask, tokens))


def test_mcan_mask_mismatch():
    model = vqa.MCANModel(_params(), 7, 4)
    x, mask, tokens = _inputs()
    with pytest.raises(ValueError, match="mask"):
        model(x, mask[:, :3], tokens)


def test_zero_classifier_bce_is_log_two():
    logits = torch.zeros(3, 5, dtype=torch.float64)
    loss = vqa.vqa_loss(logits, torch.tensor([0, 4, 2]))
    assert math.isclose(float(loss), math.log(2), rel_tol=1e-12)
    with pytest.raises(ValueError):
        vqa.vqa_loss(logits, torch.tensor([0, 5, 2]))


def test_vqa_loss_gradient_finite_difference():
    logits = torch.randn(2, 3, dtype=torch.float64, requires_grad=True)
    answers = torch.tensor([1, 2])
    vqa.vqa_loss(logits, answers).backward()
    eps = 1e-6
    for i in range(2):
        for j in range(3):
            plus, minus = logits.detach().clone(), logits.detach().clone()
            plus[i, j] += eps
            minus[i, j] -= eps
            numeric = (
                float(vqa.vqa_loss(plus, answers)) - float(vqa.vqa_loss(minus, answers))
            ) / (2 * eps)
            assert math.isclose(float(logits.grad[i, j]), numeric, abs_tol=1e-8)


def test_mcan_overfits_tiny_set():
    torch.manual_seed(0)
    model = vqa.MCANModel(_params(layers=1), 7, 2)
    x, mask, tokens = _inputs()
    answers = torch.tensor([0, 1])
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-2)
    for _ in range(50):
        optimizer.zero_grad()
        loss = vqa.vqa_loss(model(x, mask, tokens), answers)
        loss.backward()
        optimizer.step()
    assert model(x, mask, tokens).argmax(-1).tolist() == [0, 1]


@pytest.mark.parametrize("block_size", [15, 4])
def test_partition_and_subsampling_block_counts(block_size):
    for n in range(1, 201):
        parts = vqa.inference_partition(n, block_size)
        assert len(parts) == math.ceil(n / block_size)
        assert [f for _, frames in parts for f in frames] == list(range(n))
        reps = [rep for rep, _ in parts]
        assert reps == vqa.representative_frames(n, block_size)
        records = [vqa.QARecord("v", f, "q", "a") for f in range(n)]
        kept = vqa.subsample_frames(records, {"v": n}, block_size)
        assert [r.frame_idx for r in kept] == reps


def test_fqca_gradcheck():
    torch.manual_seed(0)
    fqca = vqa.FQCA(6, 5, 2).double()
    tilde = torch.randn(2, 6, dtype=torch.float64, requires_grad=True)
    raw = torch.randn(2, 3, 5, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True, True, False], [True, True, True]])
    assert torch.autograd.gradcheck(lambda t, r: fqca(t, r, mask), (tilde, raw))
    assert torch.autograd.gradcheck(lambda t, r: fqca(t, r), (tilde, raw))


def test_attention_pool_gradcheck():
    torch.manual_seed(0)
    pool = vqa.AttentionPool(4, 6, 0.0).double()
    x = torch.randn(2, 5, 4, dtype=torch.float64, requires_grad=True)
    mask = torch.tensor([[True] * 3 + [False] * 2, [True] * 5])
    assert torch.autograd.gradcheck(lambda y: pool(y, mask), (x,))


def _sampled_entries(module, count, seed):
    params = [p for p in module.parameters() if p.requires_grad]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    generator = torch.Generator().manual_seed(seed)
    picks = torch.multinomial(sizes, count, replacement=True, generator=generator)
    return [
        (params[i], int(torch.randint(params[i].numel(), (1,), generator=generator)))
        for i in picks.tolist()
    ]


def _check_sampled_gradients(module, loss, count=24, seed=0, eps=1e-6):
    module.zero_grad()
    loss().backward()
    for p, i in _sampled_entries(module, count, seed):
        flat = p.data.view(-1)
        analytic = float(p.grad.view(-1)[i])
        with torch.no_grad():
            flat[i] += eps
            plus = float(loss())
            flat[i] -= 2 * eps
            minus = float(loss())
            flat[i] += eps
        numeric = (plus - minus) / (2 * eps)
        assert math.isclose(analytic, numeric, rel_tol=1e-4, abs_tol=1e-7)


def test_fqca_parameter_gradients():
    torch.manual_seed(1)
    fqca = vqa.FQCA(6, 5, 2).double()
    generator = torch.Generator().manual_seed(2)
    tilde = torch.randn(3, 6, generator=generator, dtype=torch.float64)
    raw = torch.randn(3, 4, 5, generator=generator, dtype=torch.float64)
    _check_sampled_gradients(fqca, lambda: fqca(tilde, raw).pow(2).sum())


@pytest.mark.parametrize("source", ["flow", "raw"])
def test_mcan_gradient_finite_difference(source):
    torch.manual_seed(0)
    model = vqa.MCANModel(_params(fqca_source=source), 7, 4).double().eval()
    x, mask, tokens = _inputs()
    x = x.double()
    answers = torch.tensor([1, 3])
    _check_sampled_gradients(
        model, lambda: vqa.vqa_loss(model(x, mask, tokens), answers)
    )


@pytest.mark.parametrize("source", ["flow", "raw"])
def test_mcan_padding_invariance(source):
    torch.manual_seed(0)
    model = vqa.MCANModel(_params(fqca_source=source), 7, 4).eval()
    x, mask, tokens = _inputs()
    logits = model(x, mask, tokens)
    # more padded object slots, and extra pad tokens after each question
    wide_x, wide_mask = vqa.pad_objects(
        [x[0, : int(mask[0].sum())], x[1, : int(mask[1].sum())]], 9
    )
    wide_x[~wide_mask] = 123.0
    wide_tokens = torch.cat([tokens, torch.zeros(2, 3, dtype=torch.long)], 1)
    assert torch.allclose(model(wide_x, wide_mask, wide_tokens), logits, atol=1e-5)
    # changing what sits in padded slots changes nothing
    garbage = x.clone()
    garbage[~mask] = -7.0
    assert torch.allclose(model(garbage, mask, tokens), logits, atol=1e-5)

