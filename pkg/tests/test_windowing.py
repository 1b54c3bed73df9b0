import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spgat.errors import ShapeError
from spgat.tensor import Tensor
from spgat.windowing import (MASK_VALUE, PatchCombine, PatchEmbed, PatchMerge, PatchUnembed,
                             TokenGrid, build_shift_mask, cyclic_shift, pad_to_multiple,
                             padding_mask, region_ids, window_partition, window_reverse)


def t(x):
    return Tensor(np.asarray(x, dtype=np.float32))


def test_patch_embed_shapes(rng):
    emb = PatchEmbed(3, 32, rng)
    assert emb(t(np.zeros((1, 128, 128, 3)))).shape == (1, 64, 64, 32)
    assert PatchEmbed(3, 8, rng)(t(np.zeros((1, 16, 16, 3)))).shape == (1, 8, 8, 8)


def test_patch_embed_zero_and_flatten_order(rng):
    emb = PatchEmbed(3, 12, rng)
    assert not emb(t(np.zeros((1, 4, 4, 3)))).tensor.data.any()
    # identity projection exposes the (dy, dx, c) flatten order
    emb.proj.weight.data = np.eye(12, dtype=np.float32)
    img = rng.standard_normal((1, 4, 4, 3)).astype(np.float32)
    tok = emb(t(img)).tensor.data
    for i in range(2):
        for j in range(2):
            expect = [img[0, 2 * i + dy, 2 * j + dx, c] for dy in range(2) for dx in range(2)
                      for c in range(3)]
            np.testing.assert_array_equal(tok[0, i, j], expect)


def test_patch_embed_rejects_odd():
    with pytest.raises(ShapeError):
        PatchEmbed(3, 4, np.random.default_rng(0))(t(np.zeros((1, 5, 4, 3))))


def test_patch_unembed_shape_zero_and_inverse(rng):
    un = PatchUnembed(32, 3, rng)
    assert un(TokenGrid(t(np.zeros((1, 64, 64, 32))), 2)).shape == (1, 128, 128, 3)
    assert not un(TokenGrid(t(np.zeros((1, 4, 4, 32))), 2)).data.any()
    emb = PatchEmbed(3, 12, rng)
    emb.proj.weight.data = np.eye(12, dtype=np.float32)
    un = PatchUnembed(12, 3, rng)
    un.proj.weight.data = np.eye(12, dtype=np.float32)
    img = rng.standard_normal((2, 8, 6, 3)).astype(np.float32)
    np.testing.assert_array_equal(un(emb(t(img))).data, img)
    with pytest.raises(ShapeError):
        un(TokenGrid(t(np.zeros((1, 4, 4, 12))), 4))


def test_patch_merge_shapes_and_order(rng):
    m = PatchMerge(32, rng)
    assert m(TokenGrid(t(np.zeros((1, 64, 64, 32))), 2)).shape == (1, 32, 32, 64)
    sizes = []
    g = TokenGrid(t(np.zeros((1, 64, 64, 8))), 2)
    for i in range(3):
        sizes.append(g.shape[1])
        g = PatchMerge(8 * 2 ** i, rng)(g)
    sizes.append(g.shape[1])
    assert sizes == [64, 32, 16, 8] and g.shape[-1] == 64 and g.stage_scale == 16

    # neutral norm + selection weights read back the concat order TL, BL, TR, BR
    m = PatchMerge(1, rng)
    m.reduce.weight.data = np.array([[1, 0], [0, 0], [0, 1], [0, 0]], dtype=np.float32)
    x = np.array([[0.0, 2.0], [1.0, 3.0]], dtype=np.float32)[None, :, :, None]  # TL=0 BL=1 TR=2 BR=3
    m.norm.gamma.data[:] = 1
    out = m(TokenGrid(t(x), 2)).tensor.data[0, 0, 0]
    xn = (np.arange(4.0) - 1.5) / np.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out, [xn[0], xn[2]], rtol=1e-6)


def test_patch_combine_shapes(rng):
    assert PatchCombine(256, rng)(TokenGrid(t(np.zeros((1, 8, 8, 256))), 16)).shape == (1, 16, 16, 128)
    x = TokenGrid(t(rng.standard_normal((2, 8, 8, 16))), 4)
    y = PatchCombine(32, rng)(PatchMerge(16, rng)(x))
    assert y.shape == x.shape and y.stage_scale == x.stage_scale


def enumerate_partition(x, k):
    b, h, w, c = x.shape
    nwh, nww = h // k, w // k
    out = np.zeros((b * nwh * nww, k * k, c), x.dtype)
    for bi in range(b):
        for r in range(h):
            for col in range(w):
                win = bi * nwh * nww + (r // k) * nww + col // k
                out[win, (r % k) * k + col % k] = x[bi, r, col]
    return out


def test_partition_matches_index_enumeration(rng):
    x = rng.standard_normal((2, 4, 4, 3)).astype(np.float32)
    ws = window_partition(t(x), 2)
    assert ws.tensor.shape == (8, 4, 3)
    np.testing.assert_array_equal(ws.tensor.data, enumerate_partition(x, 2))
    x = rng.standard_normal((1, 8, 4, 2)).astype(np.float32)
    np.testing.assert_array_equal(window_partition(t(x), 4).tensor.data, enumerate_partition(x, 4))


def test_partition_single_window_is_row_major(rng):
    x = rng.standard_normal((1, 4, 4, 2)).astype(np.float32)
    ws = window_partition(t(x), 4)
    np.testing.assert_array_equal(ws.tensor.data[0], x.reshape(16, 2))


def test_partition_rejects_indivisible():
    with pytest.raises(ShapeError):
        window_partition(t(np.zeros((1, 6, 6, 1))), 4)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([2, 4, 8]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 2 ** 31))
def test_round_trips_bitwise(k, nh, nw, b, seed):
    x = np.random.default_rng(seed).standard_normal((b, nh * k, nw * k, 3)).astype(np.float32)
    back = window_reverse(window_partition(t(x), k)).data
    assert back.tobytes() == x.tobytes()
    s = k // 2
    un = cyclic_shift(cyclic_shift(t(x), (-s, -s)), (s, s)).data
    assert un.tobytes() == x.tobytes()


def test_cyclic_shift_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)[None, :, :, None]
    out = cyclic_shift(t(x), (1, 1)).data[0, :, :, 0]
    np.testing.assert_array_equal(out, [[4, 3], [2, 1]])
    np.testing.assert_array_equal(cyclic_shift(t(x), (0, 0)).data, x)


def test_shift_mask_unshifted_and_interior():
    assert not build_shift_mask(8, 8, 4, 0).any()
    m = build_shift_mask(16, 16, 4, 2)
    # windows not in the last window row/column never straddle a wrap boundary
    n_w = 4
    for wi in range(n_w):
        for wj in range(n_w):
            if wi < n_w - 1 and wj < n_w - 1:
                assert not m[wi * n_w + wj].any()


def test_shift_mask_corner_has_four_regions():
    h = w = 8
    k, s = 4, 2
    # oracle: region of each shifted-grid position from its pre-shift coordinate
    def region(r, c):
        band = lambda v: 0 if v < h - k else (1 if v < h - s else 2)
        return band(r) * 3 + band(c)

    corner = [(r, c) for r in range(4, 8) for c in range(4, 8)]
    ids = [region(r, c) for r, c in corner]
    assert len(set(ids)) == 4
    np.testing.assert_array_equal(region_ids(h, w, k, s)[4:, 4:].reshape(-1), ids)
    m = build_shift_mask(h, w, k, s)[3]
    for i in range(16):
        for j in range(16):
            assert m[i, j] == (0.0 if ids[i] == ids[j] else MASK_VALUE)


def test_padding_mask_hides_pad_keys():
    m = padding_mask(3, 3, 4, 4, 4, 0)
    keys_valid = np.zeros((4, 4), bool)
    keys_valid[:3, :3] = True
    np.testing.assert_array_equal(m[0, 0] == 0, keys_valid.reshape(-1))


def test_divisibility_for_128_crop():
    for side in (64, 32, 16, 8):
        assert side % 8 == 0


def test_pad_to_multiple(rng):
    img = rng.random((1, 20, 33, 3)).astype(np.float32)
    out, (h, w) = pad_to_multiple(img, 16)
    assert out.shape == (1, 32, 48, 3) and (h, w) == (20, 33)
    np.testing.assert_array_equal(out[:, :20, :33], img)
    np.testing.assert_array_equal(out[:, 20, :33], img[:, 18])  # reflect excludes the edge row
    same, _ = pad_to_multiple(img[:, :16, :16], 16)
    assert same.shape == (1, 16, 16, 3)
