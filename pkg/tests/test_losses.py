import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mifiae import tensor as T
from mifiae.gradcheck import check_gradients
from mifiae.losses import BatchSurvival, alignment_loss, cox_loss, reconstruction_loss, total_loss
from mifiae.tensor import ShapeError, Tensor


def cox_oracle(risks, times, events):
    """Double loop over events and their risk sets."""
    total, count = 0.0, 0
    for i in range(len(risks)):
        if not events[i]:
            continue
        denom = sum(math.exp(risks[j]) for j in range(len(risks)) if times[j] >= times[i])
        total += risks[i] - math.log(denom)
        count += 1
    return -total / count


@pytest.fixture
def cohort():
    rng = np.random.default_rng(7)
    n = 12
    times = rng.integers(1, 8, size=n).astype(float)  # integer times force ties
    events = (rng.random(n) < 0.6).astype(int)
    events[0] = 1
    return rng.normal(size=n), times, events


class TestReconstruction:
    def test_identical_is_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 3, 3)))
        assert reconstruction_loss(x, x).item() == 0.0

    def test_unit_offset(self):
        assert reconstruction_loss(Tensor(np.zeros((4, 4, 4))), Tensor(np.ones((4, 4, 4)))).item() == 1.0

    def test_loop_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5))
        ref = sum((a.flat[i] - b.flat[i]) ** 2 for i in range(a.size)) / a.size
        assert abs(reconstruction_loss(Tensor(a), Tensor(b)).item() - ref) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        g, r = Tensor(rng.normal(size=(2, 3, 3))), Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        assert check_gradients(lambda: reconstruction_loss(g, r), {"r": r})["r"] < 1e-6


class TestAlignment:
    def test_identical_is_zero(self):
        x = Tensor([0.3, -1.0, 2.0])
        assert abs(alignment_loss(x, x).item()) < 1e-15

    def test_closed_form(self):
        # softmax gives [0.5, 0.5] against [0.25, 0.75]
        kl = alignment_loss(Tensor([0.0, 0.0]), Tensor([0.0, math.log(3.0)])).item()
        assert abs(kl - 0.5 * math.log(4.0 / 3.0)) < 1e-12
        assert abs(kl - 0.14384) < 1e-5

    def test_non_negative_random_pairs(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(scale=3, size=(1000, 6)), rng.normal(scale=3, size=(1000, 6))
        for i in range(1000):
            assert alignment_loss(Tensor(a[i]), Tensor(b[i])).item() >= 0.0

    def test_batched_is_mean(self):
        rng = np.random.default_rng(12)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        rows = [alignment_loss(Tensor(a[i]), Tensor(b[i])).item() for i in range(5)]
        assert abs(alignment_loss(Tensor(a), Tensor(b)).item() - np.mean(rows)) < 1e-14

    def test_large_logits_stay_finite(self):
        kl = alignment_loss(Tensor([800.0, 0.0]), Tensor([0.0, 800.0])).item()
        assert math.isfinite(kl) and abs(kl - 800.0) < 1e-9

    def test_gradient(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        errs = check_gradients(lambda: alignment_loss(a, b), {"a": a, "b": b})
        assert max(errs.values()) < 1e-6


class TestCox:
    def test_single_event_is_zero(self):
        b = BatchSurvival(Tensor([0.7, -0.2, 1.5]), [1.0, 2.0, 3.0], [0, 0, 1])
        assert abs(cox_loss(b).item()) < 1e-15

    def test_two_equal_risks(self):
        b = BatchSurvival(Tensor([0.4, 0.4]), [1.0, 2.0], [1, 1])
        assert abs(cox_loss(b).item() - math.log(2.0) / 2.0) < 1e-15

    def test_loop_oracle(self, cohort):
        r, t, e = cohort
        assert abs(cox_loss(BatchSurvival(Tensor(r), t, e)).item() - cox_oracle(r, t, e)) < 1e-10

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 15), st.integers(0, 10_000), st.floats(-50, 50))
    def test_shift_invariance(self, n, seed, c):
        rng = np.random.default_rng(seed)
        r = rng.normal(scale=3, size=n)
        t = rng.integers(1, 6, size=n).astype(float)
        e = (rng.random(n) < 0.5).astype(int)
        e[rng.integers(n)] = 1
        a = cox_loss(BatchSurvival(Tensor(r), t, e)).item()
        b = cox_loss(BatchSurvival(Tensor(r + c), t, e)).item()
        assert abs(a - b) < 1e-10
        assert abs(a - cox_oracle(r, t, e)) < 1e-10

    def test_extreme_risks_finite(self):
        b = BatchSurvival(Tensor([900.0, -900.0, 0.0]), [1.0, 2.0, 3.0], [1, 1, 0])
        assert math.isfinite(cox_loss(b).item())

    def test_no_events(self):
        with pytest.raises(ValueError, match="no observed events"):
            cox_loss(BatchSurvival(Tensor([0.0, 1.0]), [1.0, 2.0], [0, 0]))

    def test_gradient_signs(self):
        # earliest event should be pushed up, the last survivor down
        r = Tensor([0.0, 0.0, 0.0], requires_grad=True)
        T.backward(cox_loss(BatchSurvival(r, [1.0, 2.0, 3.0], [1, 0, 0])))
        assert r.grad[0] < 0 and r.grad[2] > 0

    def test_gradient(self, cohort):
        r, t, e = cohort
        x = Tensor(r, requires_grad=True)
        assert check_gradients(lambda: cox_loss(BatchSurvival(x, t, e)), {"r": x})["r"] < 1e-6

    def test_validation(self):
        with pytest.raises(ShapeError):
            BatchSurvival(Tensor([0.0, 1.0]), [1.0], [1])
        with pytest.raises(ValueError, match="positive"):
            BatchSurvival(Tensor([0.0]), [0.0], [1])
        with pytest.raises(ValueError, match="0/1"):
            BatchSurvival(Tensor([0.0]), [1.0], [2])


class TestTotal:
    def test_sum_of_terms(self):
        assert total_loss(Tensor(1.0), Tensor(2.0), Tensor(3.5)).item() == 6.5

    def test_zero_weights_isolate(self):
        parts = (Tensor(1.0), Tensor(2.0), Tensor(3.5))
        assert total_loss(*parts, weights=(0.0, 0.0, 1.0)).item() == 3.5

    def test_ablated_alignment(self):
        assert total_loss(Tensor(1.0), None, Tensor(3.5)).item() == 4.5

    def test_non_finite_component(self):
        with pytest.raises(FloatingPointError):
            total_loss(Tensor(1.0), Tensor(float("nan")), Tensor(1.0))

    def test_gradient_through_all_terms(self, cohort):
        rng = np.random.default_rng(9)
        r, t, e = cohort
        risks = Tensor(r, requires_grad=True)
        fi = Tensor(rng.normal(size=(12, 4)), requires_grad=True)
        ft = Tensor(rng.normal(size=(12, 4)), requires_grad=True)
        rec = Tensor(rng.normal(size=(12, 2, 2, 2)), requires_grad=True)
        gtv = Tensor(rng.normal(size=(12, 2, 2, 2)))

        def fn():
            return total_loss(reconstruction_loss(gtv, rec), alignment_loss(fi, ft),
                              cox_loss(BatchSurvival(risks, t, e)))

        errs = check_gradients(fn, {"risks": risks, "fi": fi, "ft": ft, "rec": rec})
        assert max(errs.values()) < 1e-6
