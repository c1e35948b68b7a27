import numpy as np
import pytest

from moeffd import tensor as T
from moeffd.diffconv import (ALL_KINDS, CLOCKWISE, DiffConvKind, conv1x1, diff_conv_forward, naive_diff_conv,
                             next_clockwise, sample_xhat)
from moeffd.errors import DimensionError
from moeffd.tensor import Tensor


def test_regions():
    assert [k.region for k in ALL_KINDS] == [3, 3, 3, 5, 5]
    assert DiffConvKind.parse("CDC") is DiffConvKind.CDC
    with pytest.raises(ValueError):
        DiffConvKind.parse("dilated")


def test_clockwise_cycle():
    off = CLOCKWISE[0]
    seen = []
    for _ in range(8):
        seen.append(off)
        off = next_clockwise(off)
    assert off == CLOCKWISE[0] and sorted(seen) == sorted(CLOCKWISE)
    assert next_clockwise((-1, -1)) == (-1, 0) and next_clockwise((0, -1)) == (-1, -1)


@pytest.mark.parametrize("kind", ["cdc", "adc"])
def test_constant_map_has_zero_differences(kind):
    x = np.full((1, 5, 5), 2.5)
    for off in CLOCKWISE:
        assert sample_xhat(x, (2, 2), off, kind) == 0.0


def test_rdc_radial_partner():
    x = np.arange(7, dtype=float)[None, :, None] * np.ones((1, 7, 7))   # x[i][j] = i
    assert sample_xhat(x, (3, 3), (1, 0), "rdc") == 1.0
    # soc adds x_c - x_p = -1
    assert sample_xhat(x, (3, 3), (1, 0), "soc") == 0.0


def test_sample_xhat_rejects_centre():
    with pytest.raises(ValueError):
        sample_xhat(np.zeros((1, 3, 3)), (1, 1), (0, 0), "cdc")


def test_cdc_constant_input():
    y = diff_conv_forward(np.ones((1, 5, 5)), np.ones((1, 1, 3, 3)), "cdc").data
    assert y[0, 2, 2] == 1.0


def test_vanilla_counts_under_zero_padding():
    y = diff_conv_forward(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), "vanilla").data
    assert y[0, 1, 1] == 9.0 and y[0, 0, 0] == 4.0 and y[0, 0, 1] == 6.0


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_matches_naive_oracle(kind):
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((2, 7, 7)), rng.standard_normal((3, 2, 3, 3))
    assert np.abs(diff_conv_forward(x, w, kind).data - naive_diff_conv(x, w, kind)).max() <= 1e-9


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_linear_in_input(kind):
    rng = np.random.default_rng(1)
    x, y, w = rng.standard_normal((2, 6, 6)), rng.standard_normal((2, 6, 6)), rng.standard_normal((2, 2, 3, 3))
    lhs = diff_conv_forward(1.5 * x - 0.5 * y, w, kind).data
    rhs = 1.5 * diff_conv_forward(x, w, kind).data - 0.5 * diff_conv_forward(y, w, kind).data
    assert np.abs(lhs - rhs).max() <= 1e-9


def _vanilla(x, w):
    return diff_conv_forward(x, w, "vanilla").data


def test_cdc_decomposition_identity():
    rng = np.random.default_rng(2)
    x, w = rng.standard_normal((1, 8, 8)), rng.standard_normal((1, 1, 3, 3))
    ring = w[0, 0].sum() - w[0, 0, 1, 1]
    expected = _vanilla(x, w) - ring * x
    got = diff_conv_forward(x, w, "cdc").data
    assert np.abs(got - expected)[:, 1:-1, 1:-1].max() <= 1e-9


def test_adc_is_difference_of_two_vanilla_passes():
    rng = np.random.default_rng(3)
    x, w = rng.standard_normal((1, 8, 8)), rng.standard_normal((1, 1, 3, 3))
    # x_p^next weighted by w_p is a vanilla pass with each ring weight moved to its successor
    moved = np.zeros_like(w)
    moved[0, 0, 1, 1] = 0.0
    for off in CLOCKWISE:
        nxt = next_clockwise(off)
        moved[0, 0, nxt[0] + 1, nxt[1] + 1] = w[0, 0, off[0] + 1, off[1] + 1]
    expected = _vanilla(x, w) - _vanilla(x, moved)
    got = diff_conv_forward(x, w, "adc").data
    assert np.abs(got - expected)[:, 1:-1, 1:-1].max() <= 1e-9


def test_rdc_soc_are_5x5_vanilla_passes():
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((1, 9, 9)), rng.standard_normal((1, 1, 3, 3))
    big = np.zeros((5, 5))
    for a, b in CLOCKWISE:
        wp = w[0, 0, a + 1, b + 1]
        big[2 + 2 * a, 2 + 2 * b] += wp
        big[2 + a, 2 + b] -= wp
    big[2, 2] += w[0, 0, 1, 1]
    ref = T.conv2d_same(Tensor(x.transpose(1, 2, 0)[None]), Tensor(big[None, None])).data[0].transpose(2, 0, 1)
    assert np.abs(diff_conv_forward(x, w, "rdc").data - ref)[:, 2:-2, 2:-2].max() <= 1e-9
    ring = w[0, 0].sum() - w[0, 0, 1, 1]
    big_soc = big.copy()
    big_soc[2, 2] += ring
    for a, b in CLOCKWISE:
        big_soc[2 + a, 2 + b] -= w[0, 0, a + 1, b + 1]
    ref = T.conv2d_same(Tensor(x.transpose(1, 2, 0)[None]), Tensor(big_soc[None, None])).data[0].transpose(2, 0, 1)
    assert np.abs(diff_conv_forward(x, w, "soc").data - ref)[:, 2:-2, 2:-2].max() <= 1e-9


@pytest.mark.parametrize("kind", [k.value for k in ALL_KINDS])
def test_weight_gradients(kind):
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((2, 2, 5, 5)))
    w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    r = Tensor(rng.standard_normal((2, 2, 5, 5)))
    # linear in w, so a large step has no truncation error and less roundoff
    err = T.finite_difference_gradcheck(lambda: (diff_conv_forward(x, w, kind) * r).sum(), [w], eps=1e-3)
    assert err <= 1e-5


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        diff_conv_forward(np.ones((3, 4, 4)), np.ones((1, 2, 3, 3)), "cdc")
    with pytest.raises(DimensionError):
        conv1x1(np.ones((3, 4, 4)), np.ones((2, 2)))


def test_conv1x1():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 4, 5))
    np.testing.assert_array_equal(conv1x1(x, np.eye(3)).data, x)
    assert not conv1x1(x, np.zeros((2, 3))).data.any()
    w = rng.standard_normal((2, 3))
    ref = np.einsum("oc,chw->ohw", w, x)
    assert np.abs(conv1x1(x, w).data - ref).max() <= 1e-12
