import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn
from torch.autograd import gradcheck

from dfquant.losses import (DEConfig, GeneratorBatch, LossWeights, bns_loss, ce_loss, de_loss, fda_loss,
                            finetune_objective, generator_objective_full, generator_objective_warmup, kd_loss)
from dfquant.modelkit import BNLayerParams, build_classifier, forward_with_taps
from dfquant.stats import CentroidBank, ClassBatchStats, ClassStat, class_batch_stats, ema_update

D = torch.float64


def layer(mu, sigma):
    mu, sigma = torch.as_tensor(mu, dtype=D), torch.as_tensor(sigma, dtype=D)
    return BNLayerParams(torch.ones_like(mu), torch.zeros_like(mu), mu, sigma, 1e-5)


def stats_of(entries, l_st=0, num_layers=2):
    return ClassBatchStats({k: ClassStat(torch.as_tensor(m, dtype=D), torch.as_tensor(s, dtype=D), 4)
                            for k, (m, s) in entries.items()}, l_st, num_layers)


def bank_of(entries, num_layers=2, num_classes=4, l_st=0):
    bank = CentroidBank(num_layers, num_classes, l_st)
    for k, (m, s) in entries.items():
        bank.set(k, torch.as_tensor(m, dtype=D), torch.as_tensor(s, dtype=D))
    return bank


def random_case(seed, n_keys=4, dim=5):
    gen = torch.Generator().manual_seed(seed)
    keys = [(l, c) for l in range(2) for c in range(n_keys // 2)]
    mk = lambda: {k: (torch.randn(dim, generator=gen, dtype=D), torch.rand(dim, generator=gen, dtype=D))
                  for k in keys}
    return stats_of(mk()), bank_of(mk())


class TestCE:
    def test_uniform(self):
        assert ce_loss(torch.zeros(3, 10), torch.tensor([0, 4, 9])).item() == pytest.approx(math.log(10), abs=1e-6)

    def test_confident(self):
        logits = torch.zeros(2, 10, dtype=D)
        logits[0, 3] = logits[1, 7] = 20
        # exactly log(1 + 9 e^-20) ~ 1.86e-8
        assert ce_loss(logits, torch.tensor([3, 7])).item() == pytest.approx(math.log1p(9 * math.exp(-20)), rel=1e-9)
        assert ce_loss(logits, torch.tensor([3, 7])).item() < 2e-8

    def test_permutation_symmetry(self):
        gen = torch.Generator().manual_seed(0)
        logits, labels = torch.randn(8, 5, generator=gen), torch.randint(0, 5, (8,), generator=gen)
        perm = torch.randperm(5, generator=gen)
        inv = torch.argsort(perm)
        assert ce_loss(logits[:, perm], inv[labels]).item() == pytest.approx(ce_loss(logits, labels).item(), abs=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            ce_loss(torch.zeros(0, 10), torch.zeros(0, dtype=torch.long))


class TestBNS:
    def test_matching_is_zero(self):
        p = layer([0.3, -1.0], [1.0, 2.0])
        assert bns_loss([(p.running_mu.clone(), p.running_sigma.clone())], [p]).item() == 0.0

    def test_scalar_example(self):
        p = layer([1.0], [2.0])
        assert bns_loss([(torch.tensor([1.5], dtype=D), torch.tensor([2.0], dtype=D))], [p]).item() == 0.25

    def test_additive_over_layers(self):
        p1, p2 = layer([0.0], [1.0]), layer([0.0, 0.0], [1.0, 1.0])
        t1 = (torch.tensor([0.5], dtype=D), torch.tensor([1.0], dtype=D))
        t2 = (torch.tensor([1.0, 0.0], dtype=D), torch.tensor([1.0, 3.0], dtype=D))
        assert bns_loss([t1, t2], [p1, p2]).item() == pytest.approx(0.25 + 1.0 + 4.0)

    def test_layer_mismatch(self):
        with pytest.raises(ValueError):
            bns_loss([(torch.zeros(1), torch.zeros(1))], [layer([0.0], [1.0])] * 2)
        with pytest.raises(ValueError):
            bns_loss([(torch.zeros(2), torch.zeros(2))], [layer([0.0], [1.0])])


class TestFDA:
    def test_equal_is_zero(self):
        s, b = random_case(0)
        b = bank_of({k: (s[k].mean, s[k].std) for k in s.keys()})
        assert fda_loss(s, b).item() == 0.0

    def test_hand_example(self):
        s = stats_of({(1, 0): ([1.0, 0.0], [1.0, 2.0])})
        b = bank_of({(1, 0): ([0.0, 0.0], [1.0, 1.0])})
        assert fda_loss(s, b).item() == 2.0

    def test_additive_over_classes(self):
        s_a = stats_of({(1, 0): ([1.0, 0.0], [1.0, 2.0])})
        s_b = stats_of({(1, 3): ([0.0, 3.0], [1.0, 1.0])})
        both = stats_of({(1, 0): ([1.0, 0.0], [1.0, 2.0]), (1, 3): ([0.0, 3.0], [1.0, 1.0])})
        b = bank_of({(1, 0): ([0.0, 0.0], [1.0, 1.0]), (1, 3): ([0.0, 0.0], [1.0, 1.0])})
        assert fda_loss(both, b).item() == fda_loss(s_a, b).item() + fda_loss(s_b, b).item() == 11.0

    @given(st.integers(0, 10_000), st.floats(-4, 4))
    @settings(max_examples=30, deadline=None)
    def test_homogeneity(self, seed, k):
        s, b = random_case(seed)
        base = fda_loss(stats_of({key: (b.mu[key] + (s[key].mean - b.mu[key]), b.sigma[key]) for key in s.keys()}), b)
        scaled = fda_loss(stats_of({key: (b.mu[key] + k * (s[key].mean - b.mu[key]), b.sigma[key]) for key in s.keys()}), b)
        assert scaled.item() == pytest.approx(k * k * base.item(), rel=1e-9, abs=1e-12)

    def test_sample_and_class_order_invariance(self):
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(24, 3, 2, 2, generator=gen, dtype=D)
        labels = torch.arange(24) % 3
        logits = nn.functional.one_hot(labels, 3).to(D)
        s = class_batch_stats([x], labels, logits, 0)
        b = bank_of({k: (torch.zeros(3, dtype=D), torch.ones(3, dtype=D)) for k in s.keys()}, num_layers=1)
        perm = torch.randperm(24, generator=gen)
        s_perm = class_batch_stats([x[perm]], labels[perm], logits[perm], 0)
        assert fda_loss(s_perm, b).item() == pytest.approx(fda_loss(s, b).item(), rel=1e-12)
        # relabel classes consistently in the batch and the bank
        relabel = torch.tensor([2, 0, 1])
        s_rel = class_batch_stats([x], relabel[labels], logits[:, torch.argsort(relabel)], 0)
        b_rel = bank_of({(l, int(relabel[c])): (b.mu[(l, c)], b.sigma[(l, c)]) for l, c in b.keys()}, num_layers=1)
        assert fda_loss(s_rel, b_rel).item() == pytest.approx(fda_loss(s, b).item(), rel=1e-12)
        assert de_loss(s_rel, b_rel, DEConfig(0, 0)).item() == pytest.approx(de_loss(s, b, DEConfig(0, 0)).item())


class TestDE:
    def test_zero_noise_equals_fda(self):
        s, b = random_case(3)
        assert de_loss(s, b, DEConfig(0.0, 0.0), step=5).item() == fda_loss(s, b).item()

    def test_deterministic(self):
        s, b = random_case(4)
        cfg = DEConfig(noise_seed=9)
        assert de_loss(s, b, cfg, 3).item() == de_loss(s, b, cfg, 3).item()
        assert de_loss(s, b, cfg, 3).item() != de_loss(s, b, cfg, 4).item()

    def test_expectation(self):
        s, b = random_case(5)
        cfg = DEConfig(0.3, 0.15, noise_seed=1)
        dim = sum(b.mu[k].numel() for k in s.keys())
        draws = torch.tensor([de_loss(s, b, cfg, step).item() for step in range(10_000)], dtype=D)
        expected = fda_loss(s, b).item() + dim * (0.3**2 + 0.15**2)
        assert draws.mean().item() == pytest.approx(expected, rel=0.02)


class TestKD:
    def test_identical(self):
        x = torch.randn(4, 6)
        assert kd_loss(x, x).item() == pytest.approx(0.0, abs=1e-7)

    def test_hand_example(self):
        teacher = torch.log(torch.tensor([[0.5, 0.5]], dtype=D))
        student = torch.log(torch.tensor([[0.25, 0.75]], dtype=D))
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert kd_loss(student, teacher).item() == pytest.approx(expected, abs=1e-12)
        assert kd_loss(student, teacher).item() == pytest.approx(0.1438, abs=1e-3)

    def test_non_negative_fuzz(self):
        gen = torch.Generator().manual_seed(0)
        s = 5 * torch.randn(10_000, 1, 7, generator=gen, dtype=D)
        t = 5 * torch.randn(10_000, 1, 7, generator=gen, dtype=D)
        values = torch.stack([kd_loss(a, b) for a, b in zip(s, t)])
        assert torch.isfinite(values).all() and (values >= -1e-12).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kd_loss(torch.zeros(2, 3), torch.zeros(2, 4))


@given(st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_all_losses_non_negative_and_finite(seed):
    gen = torch.Generator().manual_seed(seed)
    s, b = random_case(seed % 1000)
    logits = 10 * torch.randn(6, 5, generator=gen, dtype=D)
    labels = torch.randint(0, 5, (6,), generator=gen)
    taps = [(torch.randn(3, generator=gen, dtype=D), torch.rand(3, generator=gen, dtype=D))]
    values = [ce_loss(logits, labels), bns_loss(taps, [layer(torch.zeros(3), torch.ones(3))]), fda_loss(s, b),
              de_loss(s, b, DEConfig(noise_seed=seed), seed % 97), kd_loss(logits, logits.flip(0))]
    for v in values:
        assert math.isfinite(v.item()) and v.item() >= -1e-12


class TestComposites:
    def _ctx(self, ce_target=None):
        logits = torch.zeros(2, 10, dtype=D)
        return GeneratorBatch(logits, torch.tensor([0, 1]), [(torch.tensor([1.0], dtype=D), torch.tensor([1.0], dtype=D))],
                              stats_of({(0, 0): ([1.0], [1.0])}))

    def test_warmup(self):
        ctx = self._ctx()
        params = [layer([0.0], [1.0])]  # bns = 1.0
        terms = {}
        value = generator_objective_warmup(ctx, params, LossWeights(alpha1=0.1), terms)
        assert value.item() == pytest.approx(math.log(10) + 0.1)
        assert terms["bns"].item() == 1.0
        assert generator_objective_warmup(ctx, params, LossWeights(alpha1=0.0)).item() == pytest.approx(math.log(10))

    def test_arithmetic(self):
        # components 2.0 + 0.1*1.0, then 2.1 + 0.9*1.0 + 0.6*0.5
        assert 2.0 + 0.1 * 1.0 == pytest.approx(2.1)
        assert 2.1 + 0.9 * 1.0 + 0.6 * 0.5 == pytest.approx(3.3)

    def test_full(self):
        ctx = self._ctx()
        params = [layer([0.0], [1.0])]
        bank = bank_of({(0, 0): ([0.0], [1.0])})  # fda = 1.0
        terms = {}
        w = LossWeights(0.1, 0.9, 0.6)
        value = generator_objective_full(ctx, params, bank, w, DEConfig(0.0, 0.0), 0, terms)
        assert terms["fda"].item() == terms["de"].item() == 1.0
        assert value.item() == pytest.approx(math.log(10) + 0.1 + 0.9 + 0.6)
        base = generator_objective_warmup(ctx, params, w)
        assert generator_objective_full(ctx, params, bank, LossWeights(0.1, 0, 0), DEConfig()).item() == base.item()
        with pytest.raises(ValueError):
            generator_objective_full(GeneratorBatch(ctx.teacher_logits, ctx.pseudo_labels, ctx.taps), params, bank,
                                     w, DEConfig())

    def test_finetune(self):
        teacher = torch.log(torch.tensor([[0.5, 0.5]], dtype=D))
        student = torch.log(torch.tensor([[0.25, 0.75]], dtype=D))
        label = torch.tensor([1])
        terms = {}
        v = finetune_objective(student, teacher, label, 1.0, terms)
        assert v.item() == pytest.approx(-math.log(0.75) + 0.1438, abs=1e-3)
        assert finetune_objective(student, teacher, label, 0.0).item() == pytest.approx(-math.log(0.75))
        uniform = torch.zeros(1, 10, dtype=D)
        assert (ce_loss(uniform, torch.tensor([0])) + kd_loss(student, teacher)).item() == pytest.approx(2.4464, abs=1e-3)
        confident = torch.tensor([[30.0, 0.0]], dtype=D)
        assert finetune_objective(confident, confident, torch.tensor([0]), 1.0).item() == pytest.approx(0, abs=1e-9)


class TestGradients:
    def test_component_gradients(self):
        gen = torch.Generator().manual_seed(0)
        logits = torch.randn(4, 5, generator=gen, dtype=D, requires_grad=True)
        labels = torch.tensor([0, 2, 4, 1])
        teacher = torch.randn(4, 5, generator=gen, dtype=D)
        assert gradcheck(lambda z: ce_loss(z, labels), (logits,), eps=1e-6, atol=1e-8, rtol=1e-5)
        assert gradcheck(lambda z: kd_loss(z, teacher), (logits,), eps=1e-6, atol=1e-8, rtol=1e-5)
        params = [layer(torch.zeros(3), torch.ones(3))]
        m = torch.randn(3, generator=gen, dtype=D, requires_grad=True)
        sd = torch.rand(3, generator=gen, dtype=D, requires_grad=True)
        assert gradcheck(lambda a, b: bns_loss([(a, b)], params), (m, sd), eps=1e-6, atol=1e-8, rtol=1e-5)
        bank = bank_of({(0, 0): (torch.zeros(3), torch.ones(3))})
        cfg = DEConfig(noise_seed=3)

        def stat(a, b):
            return ClassBatchStats({(0, 0): ClassStat(a, b, 2)}, 0, 2)
        assert gradcheck(lambda a, b: fda_loss(stat(a, b), bank), (m, sd), eps=1e-6, atol=1e-8, rtol=1e-5)
        assert gradcheck(lambda a, b: de_loss(stat(a, b), bank, cfg, 7), (m, sd), eps=1e-6, atol=1e-8, rtol=1e-5)

    def test_generator_objectives_match_finite_differences(self):
        # toy generator: a 64-weight linear map from a scalar latent to an 8x8 image
        teacher = build_classifier("tiny-cnn-6", 3, seed=1, in_channels=1, width=1).double().eval()
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(24, 1, generator=gen, dtype=D)
        w0 = torch.randn(1, 64, generator=gen, dtype=D)
        params = [BNLayerParams.from_module(bn) for bn in teacher.bn_layers]
        with torch.no_grad():
            labels = teacher(torch.tanh(z @ w0).view(-1, 1, 8, 8)).argmax(1)
        l_st = 4

        def ctx_of(w):
            out = forward_with_taps(teacher, torch.tanh(z @ w).view(-1, 1, 8, 8))
            return GeneratorBatch(out.logits, labels, out.taps, class_batch_stats(out.taps, labels, out.logits, l_st))

        ref = ctx_of(w0).class_stats.detached()
        assert len(ref.keys()) > 0
        bank = CentroidBank(6, 3, l_st, beta_fd=1.0)
        ema_update(bank, ref)
        for k in bank.keys():
            bank.mu[k] = bank.mu[k] + 0.1
        weights, de_cfg = LossWeights(), DEConfig(noise_seed=2)
        w = w0.clone().requires_grad_(True)
        assert gradcheck(lambda v: generator_objective_warmup(ctx_of(v), params, weights), (w,),
                         eps=1e-6, atol=1e-7, rtol=1e-5)
        assert gradcheck(lambda v: generator_objective_full(ctx_of(v), params, bank, weights, de_cfg, 1), (w,),
                         eps=1e-6, atol=1e-7, rtol=1e-5)
