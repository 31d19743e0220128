import numpy as np
import numpy.testing as npt
import pytest
from scipy.special import logsumexp

from expertconv.dynconv import DynConvConfig, DynConv
from expertconv.losses import LossConfig, cross_entropy, similarity_loss, total_loss
from expertconv.tensor import Parameter, Tensor, finite_diff_check


def make_module(bank_size=3, n_banks=2, seed=0):
    cfg = DynConvConfig(n_in=3, n_out=5, kernel_h=1, kernel_w=3, n_banks=n_banks, bank_size=bank_size, key_dim=4)
    return DynConv(cfg, np.random.default_rng(seed), name="dynamic")


class TestCrossEntropy:
    def test_uniform_two_way_is_ln2(self):
        loss = cross_entropy(Tensor(np.zeros((1, 2))), np.array([0]))
        npt.assert_allclose(loss.item(), np.log(2.0), atol=1e-12)

    def test_large_margin_drives_loss_to_zero(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 20.0
        loss = cross_entropy(Tensor(logits), np.array([2]))
        assert loss.item() < 1e-8

    def test_matches_logsumexp_oracle(self):
        rng = np.random.default_rng(5)
        logits = rng.standard_normal((6, 9))
        labels = rng.integers(0, 9, size=6)
        want = np.mean(logsumexp(logits, axis=1) - logits[np.arange(6), labels])
        got = cross_entropy(Tensor(logits), labels)
        npt.assert_allclose(got.item(), want, atol=1e-12)

    def test_rejects_bad_labels_and_shapes(self):
        with pytest.raises(ValueError, match="lie in"):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(ValueError, match="lie in"):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))
        with pytest.raises(ValueError, match="labels shape"):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0]))
        with pytest.raises(ValueError, match="batch, classes"):
            cross_entropy(Tensor(np.zeros(3)), np.array([0]))

    def test_gradient_against_finite_differences(self):
        rng = np.random.default_rng(6)
        p = Parameter("logits", rng.standard_normal((4, 5)))
        labels = rng.integers(0, 5, size=4)
        err = finite_diff_check(lambda: cross_entropy(p.tensor, labels), [p])
        assert err < 1e-8


class TestSimilarityLoss:
    def test_two_unit_kernels(self):
        # kernels differing in two coordinates by 1 each: 2 + 2 = 4 over ordered pairs
        m2 = make_module(bank_size=2, n_banks=1)
        k0 = np.zeros((3, 1, 3))
        k1 = np.zeros((3, 1, 3))
        k0[0, 0, 0] = 1.0
        k1[0, 0, 1] = 1.0
        m2.banks[0].experts[0].kernel.data = k0
        m2.banks[0].experts[1].kernel.data = k1
        npt.assert_allclose(similarity_loss(m2).item(), 4.0, atol=1e-12)

    def test_single_expert_banks_give_zero(self):
        m = make_module(bank_size=1)
        npt.assert_allclose(similarity_loss(m).item(), 0.0, atol=1e-15)

    def test_matches_double_loop_oracle(self):
        m = make_module(bank_size=4, n_banks=2, seed=3)
        want = 0.0
        for bank in m.banks:
            for i, ei in enumerate(bank.experts):
                for j, ej in enumerate(bank.experts):
                    if i != j:
                        want += float(((ei.kernel.data - ej.kernel.data) ** 2).sum())
        npt.assert_allclose(similarity_loss(m).item(), want, atol=1e-12)

    def test_permutation_and_common_shift_invariance(self):
        m = make_module(bank_size=3, n_banks=1, seed=4)
        base = similarity_loss(m).item()
        bank = m.banks[0]
        bank.experts.reverse()
        npt.assert_allclose(similarity_loss(m).item(), base, atol=1e-12)
        shift = np.random.default_rng(7).standard_normal(bank.experts[0].kernel.data.shape)
        for e in bank.experts:
            e.kernel.data = e.kernel.data + shift
        npt.assert_allclose(similarity_loss(m).item(), base, atol=1e-9)

    def test_monotone_in_pair_distance(self):
        m = make_module(bank_size=2, n_banks=1, seed=8)
        values = []
        direction = np.ones_like(m.banks[0].experts[1].kernel.data)
        start = m.banks[0].experts[1].kernel.data.copy()
        for t in (0.0, 0.5, 1.0, 2.0):
            m.banks[0].experts[1].kernel.data = start + t * direction
            values.append(similarity_loss(m).item())
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_requires_a_module(self):
        with pytest.raises(ValueError, match="at least one"):
            similarity_loss([])


class TestTotalLoss:
    def test_weighted_combination(self):
        cfg = LossConfig(diversity_weight=0.1)
        m = make_module(bank_size=2, n_banks=1, seed=9)
        logits = Tensor(np.zeros((1, 2)))
        labels = np.array([0])
        ce = cross_entropy(logits, labels).item()
        ls = similarity_loss(m).item()
        got = total_loss(logits, labels, m, cfg).item()
        npt.assert_allclose(got, ce - 0.1 * ls, atol=1e-12)

    def test_arithmetic_example(self):
        # cross entropy 1.0, similarity 4.0, weight 0.1 -> 0.6
        npt.assert_allclose(1.0 - 0.1 * 4.0, 0.6)

    def test_zero_weight_is_plain_cross_entropy(self):
        cfg = LossConfig(diversity_weight=0.0)
        m = make_module()
        logits = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
        labels = np.array([0, 1, 2])
        npt.assert_allclose(
            total_loss(logits, labels, m, cfg).item(),
            cross_entropy(logits, labels).item(),
            atol=1e-15,
        )

    def test_gradient_decomposes_and_matches_fd(self):
        m = make_module(bank_size=3, n_banks=1, seed=10)
        cfg = LossConfig(diversity_weight=0.1)
        rng = np.random.default_rng(11)
        logits_p = Parameter("logits", rng.standard_normal((2, 3)))
        labels = np.array([0, 2])
        kernel = m.banks[0].experts[1].kernel

        def fn():
            return total_loss(logits_p.tensor, labels, m, cfg)

        err = finite_diff_check(fn, [logits_p, kernel], rng=rng)
        assert err < 1e-7

        kernel.zero_grad()
        total_loss(logits_p.tensor, labels, m, cfg).backward()
        total_grad = kernel.grad.copy()
        kernel.zero_grad()
        similarity_loss(m).backward()
        ls_grad = kernel.grad.copy()
        npt.assert_allclose(total_grad, -cfg.diversity_weight * ls_grad, atol=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError, match="non-negative"):
            LossConfig(diversity_weight=-0.5)
