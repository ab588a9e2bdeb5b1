import math

import pytest
import torch
import torch.nn.functional as F

from src.errors import ArgumentError
from src.models.attack_spec import pgd_spec
from src.models.encoder import BNMode, init_encoder_pair
from src.models.memory_bank import BankPair
from src.models.variant import ACA, CCC, NAMED_VARIANTS, InputKind, LossWeights, VariantTag
from src.services.contrastive_loss import EmbeddingCache, amoc_loss, info_nce, variant_loss
from src.services.supervised_loss import pgd_at_loss, trades_kl, trades_loss

from tests.conftest import AffineClassifier


def _unit(n, d, gen, dtype=torch.float64):
    return F.normalize(torch.randn(n, d, generator=gen, dtype=dtype), dim=1)


def test_symmetric_logits_give_ln2():
    q = torch.tensor([[1.0, 0.0]])
    k = torch.tensor([[0.0, 1.0]])
    for temperature in (0.05, 0.2, 1.0):
        assert float(info_nce(q, k, k, temperature)) == pytest.approx(math.log(2), rel=1e-6)


def test_orthogonal_negatives_closed_form():
    q = torch.eye(11, dtype=torch.float64)[:1]
    negatives = torch.eye(11, dtype=torch.float64)[1:]
    loss = info_nce(q, q, negatives, 0.2)
    assert float(loss) == pytest.approx(math.log1p(10 * math.exp(-5)), rel=1e-9)


def test_matches_a_cross_entropy_oracle():
    gen = torch.Generator().manual_seed(0)
    for _ in range(200):
        q, k = _unit(4, 6, gen), _unit(4, 6, gen)
        negatives = _unit(9, 6, gen)
        temperature = float(torch.rand((), generator=gen)) + 0.05
        logits = torch.cat([(q * k).sum(1, keepdim=True), q @ negatives.t()], dim=1) / temperature
        expected = torch.stack([-torch.log_softmax(row, 0)[0] for row in logits]).mean()
        assert torch.allclose(info_nce(q, k, negatives, temperature), expected, rtol=1e-6)


def test_non_positive_temperature_is_rejected():
    q = torch.eye(2)
    with pytest.raises(ArgumentError):
        info_nce(q, q, q, 0.0)


def test_negative_order_does_not_matter():
    gen = torch.Generator().manual_seed(1)
    q, k, negatives = _unit(3, 5, gen), _unit(3, 5, gen), _unit(7, 5, gen)
    perm = torch.randperm(7, generator=gen)
    assert torch.allclose(info_nce(q, k, negatives, 0.2), info_nce(q, k, negatives[perm], 0.2))


def test_duplicate_negative_increases_the_loss():
    gen = torch.Generator().manual_seed(2)
    q, k, negatives = _unit(3, 5, gen), _unit(3, 5, gen), _unit(7, 5, gen)
    extended = torch.cat([negatives, negatives[:1]])
    assert float(info_nce(q, k, extended, 0.2)) > float(info_nce(q, k, negatives, 0.2))


def test_temperature_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(3)
    q, k, negatives = _unit(3, 5, gen), _unit(3, 5, gen), _unit(7, 5, gen)
    temperature = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    grad, = torch.autograd.grad(info_nce(q, k, negatives, temperature), temperature)
    h = 1e-6
    numeric = (info_nce(q, k, negatives, 0.3 + h) - info_nce(q, k, negatives, 0.3 - h)) / (2 * h)
    assert float(grad) == pytest.approx(float(numeric), rel=1e-4)


@pytest.fixture
def contrastive_batch(tiny_arch):
    pair = init_encoder_pair(tiny_arch, seed=0, momentum=0.9)
    banks = BankPair(32, 8, seed=0)
    gen = torch.Generator().manual_seed(5)
    view_q = torch.rand(6, 3, 12, 12, generator=gen)
    view_k = torch.rand(6, 3, 12, 12, generator=gen)
    delta = (torch.rand(6, 3, 12, 12, generator=gen) * 2 - 1) * (8 / 255)
    return pair, banks, view_q, view_k, delta


def test_ccc_reproduces_the_moco_loss(contrastive_batch):
    pair, banks, view_q, view_k, _ = contrastive_batch
    pair.eval()
    q = pair.query(view_q, BNMode.CLEAN)
    with torch.no_grad():
        k = pair.key(view_k, BNMode.CLEAN)
    expected = info_nce(q, k, banks.clean.negatives(), 0.2)
    assert torch.allclose(variant_loss(CCC, pair, banks, view_q, view_k), expected)


def test_adversarial_variants_need_delta(contrastive_batch):
    pair, banks, view_q, view_k, _ = contrastive_batch
    with pytest.raises(ArgumentError):
        variant_loss(ACA, pair, banks, view_q, view_k, None)


def test_all_named_variants_are_finite(contrastive_batch):
    pair, banks, view_q, view_k, delta = contrastive_batch
    pair.eval()
    values = {}
    for tag in NAMED_VARIANTS:
        values[tag.code] = float(variant_loss(tag, pair, banks, view_q, view_k, delta))
        assert math.isfinite(values[tag.code])
    assert len(set(values.values())) > 1


def test_aca_and_acc_differ_only_through_the_bank(contrastive_batch):
    pair, banks, view_q, view_k, delta = contrastive_batch
    pair.eval()
    zero = torch.zeros_like(delta)
    aca, acc = VariantTag.parse('ACA'), VariantTag.parse('ACC')
    assert not torch.allclose(variant_loss(aca, pair, banks, view_q, view_k, zero),
                              variant_loss(acc, pair, banks, view_q, view_k, zero))
    with torch.no_grad():
        banks.adv.memory.copy_(banks.clean.memory)
    assert torch.allclose(variant_loss(aca, pair, banks, view_q, view_k, zero),
                          variant_loss(acc, pair, banks, view_q, view_k, zero))


def test_variant_tags_parse_and_print():
    tag = VariantTag.parse('aca')
    assert tag.code == 'ACA'
    assert tag.needs_delta
    assert not VariantTag.parse('CCC').needs_delta
    with pytest.raises(ArgumentError):
        VariantTag.parse('AXC')


def test_amoc_loss_is_linear_in_lambda(contrastive_batch):
    pair, banks, view_q, view_k, delta = contrastive_batch
    pair.eval()
    for lam in (0.1, 0.5, 0.9):
        result = amoc_loss(pair, banks, view_q, view_k, delta, LossWeights(lam=lam))
        expected = lam * result.ccc + (1 - lam) * result.adversarial
        assert torch.allclose(result.total, expected)
        assert set(result.to_dict()) == {'loss', 'ccc', 'aca'}


def test_lambda_outside_the_open_interval_is_rejected():
    with pytest.raises(ArgumentError):
        LossWeights(lam=1.0)
    with pytest.raises(ArgumentError):
        LossWeights(lam=0.0)


def test_key_encoder_receives_no_gradient(contrastive_batch):
    pair, banks, view_q, view_k, delta = contrastive_batch
    pair.train()
    amoc_loss(pair, banks, view_q, view_k, delta, LossWeights()).total.backward()
    assert all(p.grad is None for p in pair.key.parameters())
    assert any(p.grad is not None and bool(p.grad.abs().sum() > 0) for p in pair.query.parameters())


def test_embedding_cache_encodes_each_input_once(contrastive_batch):
    pair, banks, view_q, view_k, delta = contrastive_batch
    pair.eval()
    cache = EmbeddingCache(pair, view_q, view_k, delta)
    amoc_loss(pair, banks, view_q, view_k, delta, LossWeights(), ACA, cache)
    first = cache.query(InputKind.ADV)
    assert cache.query(InputKind.ADV) is first
    assert cache.key(InputKind.CLEAN) is cache.key(InputKind.CLEAN)


def test_amoc_gradient_matches_finite_differences(tiny_arch):
    pair = init_encoder_pair(tiny_arch, seed=1, momentum=0.9).double()
    banks = BankPair(16, 8, seed=0).double()
    gen = torch.Generator().manual_seed(6)
    view_q = torch.rand(4, 3, 12, 12, generator=gen, dtype=torch.float64)
    view_k = torch.rand(4, 3, 12, 12, generator=gen, dtype=torch.float64)
    delta = (torch.rand(4, 3, 12, 12, generator=gen, dtype=torch.float64) * 2 - 1) * (8 / 255)
    pair.eval()
    weights = LossWeights()
    param = pair.query.head[3].weight
    loss = amoc_loss(pair, banks, view_q, view_k, delta, weights).total
    grad, = torch.autograd.grad(loss, param)
    h = 1e-6
    for index in [(0, 0), (3, 5), (7, 2)]:
        with torch.no_grad():
            original = float(param[index])
            param[index] = original + h
            plus = float(amoc_loss(pair, banks, view_q, view_k, delta, weights).total)
            param[index] = original - h
            minus = float(amoc_loss(pair, banks, view_q, view_k, delta, weights).total)
            param[index] = original
        assert float(grad[index]) == pytest.approx((plus - minus) / (2 * h), rel=1e-4, abs=1e-8)


def _affine_batch():
    gen = torch.Generator().manual_seed(11)
    model = AffineClassifier(torch.randn(3, 16, generator=gen), torch.zeros(3))
    x = torch.rand(10, 1, 4, 4, generator=gen)
    y = torch.randint(0, 3, (10,), generator=gen)
    return model, x, y


def test_trades_with_zero_budget_is_cross_entropy():
    model, x, y = _affine_batch()
    loss = trades_loss(model, x, y, LossWeights(), pgd_spec(10, 0.25, epsilon=0.0), torch.Generator())
    assert float(loss) == pytest.approx(float(F.cross_entropy(model(x), y)), abs=1e-6)


def test_pgd_at_with_zero_budget_is_cross_entropy():
    model, x, y = _affine_batch()
    loss = pgd_at_loss(model, x, y, pgd_spec(10, 0.25, epsilon=0.0), torch.Generator())
    assert float(loss) == pytest.approx(float(F.cross_entropy(model(x), y)), rel=1e-6)


def test_trades_kl_is_non_negative():
    gen = torch.Generator().manual_seed(4)
    for _ in range(20):
        assert float(trades_kl(torch.randn(5, 3, generator=gen), torch.randn(5, 3, generator=gen))) >= -1e-7


def test_pgd_at_loss_exceeds_clean_loss():
    model, x, y = _affine_batch()
    clean = float(F.cross_entropy(model(x), y))
    wins = sum(
        float(pgd_at_loss(model, x, y, pgd_spec(10, 0.25), torch.Generator().manual_seed(seed))) >= clean
        for seed in range(5)
    )
    assert wins >= 4


def test_trades_gradient_matches_finite_differences():
    gen = torch.Generator().manual_seed(12)
    model = AffineClassifier(torch.randn(3, 16, generator=gen, dtype=torch.float64),
                             torch.zeros(3, dtype=torch.float64))
    x = torch.rand(6, 1, 4, 4, generator=gen, dtype=torch.float64)
    y = torch.randint(0, 3, (6,), generator=gen)
    spec = pgd_spec(3, 0.25)
    weights = LossWeights()

    def rng():
        return torch.Generator().manual_seed(0)

    def shifted_loss(i, shift):
        original = model.bias.detach().clone()
        with torch.no_grad():
            model.bias[i] += shift
        try:
            return float(trades_loss(model, x, y, weights, spec, rng()))
        finally:
            with torch.no_grad():
                model.bias.copy_(original)

    loss = trades_loss(model, x, y, weights, spec, rng())
    grad, = torch.autograd.grad(loss, model.bias)
    h = 1e-6
    for i in range(3):
        numeric = (shifted_loss(i, h) - shifted_loss(i, -h)) / (2 * h)
        assert float(grad[i]) == pytest.approx(numeric, rel=1e-4, abs=1e-8)


def test_trades_inner_attack_runs_under_no_grad():
    model, x, y = _affine_batch()
    spec = pgd_spec(5, 0.25)
    weights = LossWeights()
    expected = trades_loss(model, x, y, weights, spec, torch.Generator().manual_seed(0))
    with torch.no_grad():
        observed = trades_loss(model, x, y, weights, spec, torch.Generator().manual_seed(0))
    assert torch.allclose(observed, expected.detach())
