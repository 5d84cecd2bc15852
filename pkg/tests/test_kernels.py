import numpy as np
import pytest

from maskdiff.kernels import available_backends, reference, resolve_backend


def _rand_case(rng, shape, dtype, allow_frac=0.7):
    scores = rng.standard_normal(shape).astype(dtype)
    mask = rng.random(shape[-2:]) < allow_frac
    # Keep at least one allowed entry per row so the common path is exercised;
    # the fully-masked row gets its own test.
    mask[:, 0] = True
    return scores, mask


def test_reference_matches_bruteforce():
    rng = np.random.default_rng(0)
    scores, mask = _rand_case(rng, (3, 2, 5, 7), np.float64)
    probs = reference.masked_softmax(scores, mask)
    for b in range(3):
        for h in range(2):
            for i in range(5):
                row = scores[b, h, i]
                allowed = np.where(mask[i])[0]
                e = np.exp(row[allowed] - row[allowed].max())
                expect = np.zeros(7)
                expect[allowed] = e / e.sum()
                np.testing.assert_allclose(probs[b, h, i], expect, rtol=1e-12, atol=0)


def test_rows_sum_to_one_and_zeros_exact():
    rng = np.random.default_rng(1)
    scores, mask = _rand_case(rng, (4, 6, 6), np.float32)
    probs = reference.masked_softmax(scores, mask)
    sums = probs.sum(axis=-1)
    np.testing.assert_allclose(sums, 1.0, rtol=1e-6)
    assert np.all(probs[:, ~mask] == 0.0)


def test_fully_masked_row_is_zero():
    scores = np.zeros((2, 3, 4), dtype=np.float64)
    mask = np.zeros((3, 4), dtype=bool)
    mask[0, :] = True
    probs = reference.masked_softmax(scores, mask)
    assert np.all(probs[:, 1:, :] == 0.0)
    np.testing.assert_allclose(probs[:, 0, :].sum(axis=-1), 1.0)


def test_softmax_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    scores, mask = _rand_case(rng, (2, 4, 5), np.float64)
    dprobs = rng.standard_normal((2, 4, 5))
    dscores = reference.softmax_backward(reference.masked_softmax(scores, mask), dprobs)
    eps = 1e-6
    num = np.zeros_like(scores)
    for idx in np.ndindex(scores.shape):
        bumped = scores.copy()
        bumped[idx] += eps
        up = reference.masked_softmax(bumped, mask)
        bumped[idx] -= 2 * eps
        down = reference.masked_softmax(bumped, mask)
        num[idx] = np.sum((up - down) / (2 * eps) * dprobs)
    np.testing.assert_allclose(dscores, num, rtol=1e-5, atol=1e-8)


def test_backward_zero_at_disallowed():
    rng = np.random.default_rng(3)
    scores, mask = _rand_case(rng, (3, 4, 4), np.float32)
    probs = reference.masked_softmax(scores, mask)
    dscores = reference.softmax_backward(probs, rng.standard_normal(probs.shape).astype(np.float32))
    assert np.all(dscores[:, ~mask] == 0.0)


@pytest.mark.parametrize("dtype,rtol", [(np.float32, 2e-6), (np.float64, 1e-12)])
def test_native_matches_reference(dtype, rtol):
    backends = available_backends()
    if "native" not in backends:
        pytest.skip("compiled extension not built")
    native = backends["native"]
    rng = np.random.default_rng(4)
    for shape in [(2, 3, 8, 8), (5, 9, 9), (1, 1, 17)]:
        scores, mask = _rand_case(rng, shape, dtype)
        ref_p = reference.masked_softmax(scores, mask)
        nat_p = native.masked_softmax(scores, mask)
        np.testing.assert_allclose(nat_p, ref_p, rtol=rtol, atol=rtol)
        assert np.all(nat_p[..., ~mask] == 0.0)
        dprobs = rng.standard_normal(shape).astype(dtype)
        np.testing.assert_allclose(
            native.softmax_backward(nat_p, dprobs),
            reference.softmax_backward(ref_p, dprobs),
            rtol=rtol,
            atol=rtol,
        )


def test_native_fully_masked_row():
    backends = available_backends()
    if "native" not in backends:
        pytest.skip("compiled extension not built")
    scores = np.ones((2, 3, 4), dtype=np.float32)
    mask = np.zeros((3, 4), dtype=bool)
    mask[2, 1] = True
    probs = backends["native"].masked_softmax(scores, mask)
    assert np.all(probs[:, :2, :] == 0.0)
    np.testing.assert_allclose(probs[:, 2, 1], 1.0)


def test_resolve_backend():
    name, mod = resolve_backend("reference")
    assert name == "reference" and mod is reference
    with pytest.raises(ValueError):
        resolve_backend("gpu")
    auto_name, _ = resolve_backend("auto")
    assert auto_name in ("native", "reference")


def test_kernels_reject_bad_inputs():
    for _, mod in available_backends().items():
        with pytest.raises(TypeError):
            mod.masked_softmax(np.zeros((2, 2), dtype=np.int64), np.ones((2, 2), dtype=bool))
        with pytest.raises(ValueError):
            mod.masked_softmax(np.zeros((2, 2), dtype=np.float32), np.ones((3, 2), dtype=bool))
        with pytest.raises(ValueError):
            mod.softmax_backward(np.zeros((2, 2)), np.zeros((2, 3)))
