import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from scbnet import formats
from scbnet import geodata as G
from scbnet.exceptions import DataError, ShapeError

# northeast field-sample counts per lithology code
NORTHEAST = {"I1B": 11162, "I1P": 1700, "I2": 2439, "I3A": 13610, "I4I": 1422, "M1": 12249, "M12": 755,
             "M16": 1607, "M8": 1607, "S1": 2573, "S3": 1077, "S4": 610, "S6": 3816, "S8": 2141, "S9": 1183,
             "V3": 9337}


def _table(counts):
    codes = np.concatenate([[c] * n for c, n in counts.items()]).astype(object)
    z = np.zeros(len(codes), int)
    return G.SampleTable(z, z, codes)


def _random_masks(rng, shape=(40, 40), n=120, k=3):
    H, W = shape
    flat = rng.choice(H * W, size=n, replace=True)
    ys, xs = np.unravel_index(flat, shape)
    codes = np.array([f"c{i}" for i in rng.integers(0, k, n)], dtype=object)
    return G.rasterize_samples(G.SampleTable(xs, ys, codes), shape, [f"c{i}" for i in range(k)])


# ---------------------------------------------------------------- ingestion

def test_constant_channel_normalizes_to_zero():
    stack = G.ingest_rasters([np.full((4, 5), 3.0)])
    assert not stack.values.any()


def test_two_valued_channel_normalizes_to_unit_values():
    ch = np.array([[0.0, 10.0], [10.0, 0.0]])
    np.testing.assert_allclose(G.ingest_rasters([ch]).values[0], [[-1, 1], [1, -1]])


def test_nodata_becomes_zero_and_is_excluded_from_statistics():
    ch = np.array([[0.0, 10.0, -9999.0]])
    stack = G.ingest_rasters([ch], {"nodata": -9999.0})
    np.testing.assert_allclose(stack.values[0], [[-1, 1, 0]])
    assert np.isfinite(stack.values).all()


def test_eleven_channel_manifest_keeps_names(tmp_path, rng):
    paths = []
    for name in G.TABLE2_CHANNELS:
        p = tmp_path / f"{name.replace('/', '_')}.grd"
        formats.write_grd(p, rng.standard_normal((6, 7)), [name])
        paths.append(p)
    stack = G.ingest_rasters(paths)
    assert stack.names == list(G.TABLE2_CHANNELS)
    assert stack.values.shape == (11, 6, 7)


def test_csv_grid_source(tmp_path):
    p = tmp_path / "dem.csv"
    formats.write_csv_grid(p, np.array([[1.0, 2.0], [3.0, 4.0]]))
    stack = G.ingest_rasters([p])
    assert stack.names == ["dem"] and stack.values.shape == (1, 2, 2)


def test_mismatched_grids_are_rejected():
    with pytest.raises(ShapeError, match="differ"):
        G.ingest_rasters([np.zeros((4, 4)), np.zeros((4, 5))])
    with pytest.raises(DataError):
        G.ingest_rasters([])
    with pytest.raises(DataError):
        G.ingest_rasters([np.zeros((2, 2))], {"names": ["a", "b"]})


def test_scaler_is_a_sklearn_transformer(rng):
    from sklearn.base import clone
    X = rng.standard_normal((3, 8, 8)) * [[[2.0]], [[5.0]], [[0.1]]] + 4
    sc = clone(G.RasterScaler()).fit(X)
    Z = sc.transform(X)
    np.testing.assert_allclose(Z.mean(axis=(1, 2)), 0, atol=1e-5)
    np.testing.assert_allclose(Z.std(axis=(1, 2)), 1, atol=1e-5)
    with pytest.raises(ShapeError):
        sc.transform(X[:2])


def test_grd_round_trip_and_bad_magic(tmp_path, rng):
    v = rng.standard_normal((2, 3, 4)).astype(np.float32)
    formats.write_grd(tmp_path / "a.grd", v, ["x", "yé"], nodata=-1.0)
    back, names, nodata = formats.read_grd(tmp_path / "a.grd")
    np.testing.assert_array_equal(back, v)
    assert names == ["x", "yé"] and nodata == -1.0
    (tmp_path / "b.grd").write_bytes(b"junk" * 10)
    with pytest.raises(DataError, match="magic"):
        formats.read_grd(tmp_path / "b.grd")


# ---------------------------------------------------------------- rare classes

def test_rare_class_removed_from_thousand_samples():
    kept, vocab = G.filter_rare_classes(_table({"A": 600, "B": 395, "Z": 5}))
    assert vocab == ["A", "B"] and len(kept) == 995


def test_all_common_classes_leave_table_unchanged():
    t = _table({"A": 50, "B": 50})
    kept, vocab = G.filter_rare_classes(t)
    assert len(kept) == len(t) and vocab == ["A", "B"]


def test_northeast_counts_through_the_one_percent_rule():
    total = sum(NORTHEAST.values())
    assert total == 67288
    kept, vocab = G.filter_rare_classes(_table(NORTHEAST))
    # S4 holds 610 / 67288 = 0.907 % of the retained table itself, so it falls below 1 %
    assert NORTHEAST["S4"] / total < 0.01
    assert len(vocab) == 15 and "S4" not in vocab
    _, vocab_all = G.filter_rare_classes(_table(NORTHEAST), threshold=0.009)
    assert len(vocab_all) == 16


def test_filter_errors():
    with pytest.raises(DataError):
        G.filter_rare_classes(G.SampleTable([], [], []))
    with pytest.raises(DataError):
        G.filter_rare_classes(_table({"A": 1, "B": 1}), threshold=0.5)


# ---------------------------------------------------------------- masks

def test_single_sample_pixel_gets_probability_one():
    m = G.rasterize_samples(G.SampleTable([1], [0], ["granite"]), (2, 3), ["gabbro", "granite"])
    assert m.probs[1, 0, 1] == 1.0 and m.probs[0, 0, 1] == 0.0
    assert m.valid[0, 0, 1] == 1 and m.valid.sum() == 1


def test_mixed_pixel_frequencies():
    m = G.rasterize_samples(G.SampleTable([0, 0, 0], [0, 0, 0], ["A", "A", "B"]), (1, 1), ["A", "B"])
    np.testing.assert_allclose(m.probs[:, 0, 0], [2 / 3, 1 / 3], rtol=1e-6)


def test_empty_pixels_are_zero(rng):
    m = _random_masks(rng)
    empty = m.valid[0] == 0
    assert not m.probs[:, empty].any()
    assert (m.labels()[empty] == -1).all()


@given(st.integers(0, 2 ** 31 - 1))
def test_masks_channel_sum_is_one_on_valid_pixels(seed):
    m = _random_masks(np.random.default_rng(seed))
    s = m.probs.sum(axis=0)
    valid = m.valid[0] > 0
    np.testing.assert_allclose(s[valid], 1.0, atol=1e-6)
    assert (s[~valid] == 0).all()
    assert m.probs.sum() == pytest.approx(m.n_valid(), abs=1e-3)


def test_rasterize_errors():
    with pytest.raises(DataError, match="vocabulary"):
        G.rasterize_samples(G.SampleTable([0], [0], ["Q"]), (2, 2), ["A"])
    with pytest.raises(DataError, match="outside"):
        G.rasterize_samples(G.SampleTable([2], [0], ["A"]), (2, 2), ["A"])


# ---------------------------------------------------------------- split

def _full_masks(shape):
    H, W = shape
    ys, xs = np.mgrid[0:H, 0:W]
    return G.rasterize_samples(G.SampleTable(xs.ravel(), ys.ravel(), ["A"] * (H * W)), shape, ["A"])


def test_thirty_by_thirty_split_has_three_train_one_test():
    split = G.make_spatial_split((30, 30), _full_masks((30, 30)), 15, 0.8, rng=0)
    roles = split.block_roles.ravel().tolist()
    assert roles.count(G.ROLE_TRAIN) == 3 and roles.count(G.ROLE_TEST) == 1


def test_validation_rect_blocks_are_never_train_or_test():
    masks = _full_masks((45, 45))
    for seed in range(10):
        split = G.make_spatial_split((45, 45), masks, 15, 0.8, (0, 0, 15, 15), seed)
        assert split.block_roles[0, 0] == G.ROLE_VALIDATION
        assert (split.block_roles == G.ROLE_VALIDATION).sum() == 1


def test_split_roles_are_pairwise_disjoint_over_twenty_seeds(rng):
    masks = _random_masks(rng, (50, 47), 200)
    for seed in range(20):
        split = G.make_spatial_split((50, 47), masks, 15, 0.8, (30, 30, 50, 47), seed)
        sets = [split.role_mask(r) for r in ("train", "test", "validation")]
        for i in range(3):
            for j in range(i + 1, 3):
                assert not (sets[i] & sets[j]).any()
        # blocks are role-constant and every pixel has exactly one role
        roles = split.pixel_roles()
        assert roles.shape == (50, 47)
        assert sum(s.sum() for s in sets) + split.role_mask("empty").sum() == 50 * 47


def test_split_is_deterministic_and_serializable(rng):
    masks = _random_masks(rng)
    a = G.make_spatial_split((40, 40), masks, 15, 0.8, rng=3)
    b = G.make_spatial_split((40, 40), masks, 15, 0.8, rng=3)
    np.testing.assert_array_equal(a.block_roles, b.block_roles)
    c = G.SpatialSplit.from_json(a.to_json())
    np.testing.assert_array_equal(c.pixel_roles(), a.pixel_roles())


def test_split_errors():
    masks = _full_masks((20, 20))
    with pytest.raises(DataError):
        G.make_spatial_split((20, 20), masks, validation_rect=(5, 5, 5, 9))
    with pytest.raises(DataError):
        G.make_spatial_split((20, 20), masks, validation_rect=(0, 0, 30, 5))
    with pytest.raises(ShapeError):
        G.make_spatial_split((20, 21), masks)


# ---------------------------------------------------------------- patches

def _stack(rng, shape=(40, 40), c=2):
    return G.RasterStack(rng.standard_normal((c,) + shape), [f"b{i}" for i in range(c)])


def test_stride_lattice_origins():
    rng = np.random.default_rng(0)
    stack = G.RasterStack(np.zeros((1, 320, 320)), ["b"])
    masks = _full_masks((320, 320))
    cfg = G.PatchConfig(patch=160, max_overlap=0.5, n_patches=50, downscale_frac=0.0, rotate_frac=0.0)
    ps = G.extract_patches(stack, masks, None, cfg, rng)
    assert cfg.stride() == 80
    origins = sorted(tuple(p["offset"]) for p in ps.provenance)
    assert origins == [(r, c) for r in (0, 80, 160) for c in (0, 80, 160)]
    # 9 lattice positions exist, so 9 of the 50 requested are produced and reported
    assert len(ps) == 9 and ps.manifest()["n_produced"] == 9 and ps.manifest()["n_requested"] == 50


def test_patches_are_square_with_conditioning_inside_target(rng):
    cfg = G.PatchConfig(patch=16, max_overlap=0.75, n_patches=30, downscale_frac=0.2, rotate_frac=0.5)
    masks = _random_masks(rng, (40, 40), 300, 2)
    ps = G.extract_patches(_stack(rng), masks, None, cfg, rng)
    assert ps.aux.shape[1:] == (2, 16, 16) and ps.target.shape[1:] == (2, 16, 16)
    assert np.all(ps.cond_valid <= ps.target_valid)
    assert {p["scale"] for p in ps.provenance} == {1, 2}


def test_rotation_free_patches_round_trip_exactly(rng):
    stack = _stack(rng)
    masks = _random_masks(rng, (40, 40), 300, 3)
    split = G.make_spatial_split((40, 40), masks, 10, 0.7, rng=1)
    cfg = G.PatchConfig(patch=16, max_overlap=0.5, n_patches=12, downscale_frac=0.25, rotate_frac=0.0)
    ps = G.extract_patches(stack, masks, split, cfg, rng)
    sources = G.patch_sources(stack, masks, split, "train")
    for i, prov in enumerate(ps.provenance):
        aux, p, v = G.extract_patch(sources, prov, 16)
        np.testing.assert_array_equal(aux, ps.aux[i])
        np.testing.assert_array_equal(p, ps.target[i])
        np.testing.assert_array_equal(v, ps.target_valid[i])
        if prov["scale"] == 1:
            r, c = prov["offset"]
            np.testing.assert_array_equal(aux, stack.values[:, r:r + 16, c:c + 16])


def test_zero_rotation_is_identical_to_no_rotation(rng):
    arr = rng.standard_normal((2, 20, 20)).astype(np.float32)
    np.testing.assert_array_equal(G._cut(arr, 3, 4, 8, 0.0, 1), arr[:, 3:11, 4:12])


def test_patch_targets_only_carry_the_requested_role(rng):
    stack = _stack(rng)
    masks = _random_masks(rng, (40, 40), 400, 2)
    split = G.make_spatial_split((40, 40), masks, 10, 0.5, rng=2)
    cfg = G.PatchConfig(patch=8, max_overlap=0.0, n_patches=25, downscale_frac=0.0, rotate_frac=0.0)
    ps = G.extract_patches(stack, masks, split, cfg, rng)
    train = split.role_mask("train")
    for i, prov in enumerate(ps.provenance):
        r, c = prov["offset"]
        np.testing.assert_array_equal(ps.target_valid[i, 0] > 0, (masks.valid[0] > 0)[r:r + 8, c:c + 8]
                                      & train[r:r + 8, c:c + 8])


def test_downscale_averages_rasters_and_reaggregates_masks():
    v = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    p = np.zeros((2, 4, 4), np.float32)
    valid = np.zeros((1, 4, 4), np.float32)
    p[:, 0, 0] = [1, 0]
    p[:, 0, 1] = [0.5, 0.5]
    valid[0, 0, :2] = 1
    dv, dp, dvalid = G.downscale2(v, p, valid)
    np.testing.assert_allclose(dv[0], [[2.5, 4.5], [10.5, 12.5]])
    np.testing.assert_allclose(dp[:, 0, 0], [0.75, 0.25])
    assert dvalid[0].tolist() == [[1, 0], [0, 0]]


def test_patch_errors(rng):
    masks = _random_masks(rng, (40, 40))
    with pytest.raises(DataError):
        G.extract_patches(_stack(rng), masks, None, G.PatchConfig(patch=48))
    with pytest.raises(DataError):
        G.extract_patches(_stack(rng), masks, None, G.PatchConfig(patch=24, n_patches=10, downscale_frac=0.5))
    with pytest.raises(ShapeError):
        G.extract_patches(_stack(rng, (40, 41)), masks, None, G.PatchConfig(patch=8))


# ---------------------------------------------------------------- conditioning hold-out

def test_holdout_conditioning_is_subset_of_supervision_over_100_draws(rng):
    masks = _random_masks(rng, (24, 24), 150, 3)
    target = np.stack([masks.probs, masks.probs])
    valid = np.stack([masks.valid, masks.valid])
    for _ in range(100):
        cond, cv, sup, sv = G.epoch_conditioning_holdout(target, valid, 0.5, rng)
        assert np.all(cv <= sv)
        np.testing.assert_array_equal(sup, target)
        np.testing.assert_array_equal(cond, target * cv)
        # hidden pixels stay in the supervision
        assert ((sv > 0) & (cv == 0)).any()


def test_holdout_keep_count():
    valid = np.zeros((1, 20, 20), np.float32)
    valid[0].flat[np.random.default_rng(0).choice(400, 100, replace=False)] = 1
    probs = np.repeat(valid, 2, axis=0) * 0.5
    for seed in range(10):
        _, cv, _, _ = G.epoch_conditioning_holdout(probs, valid, 0.5, seed)
        assert cv.sum() == 50
    _, cv, _, _ = G.epoch_conditioning_holdout(probs, valid, 0.3, 0)
    assert cv.sum() == 70


def test_small_rate_keeps_almost_everything():
    valid = np.ones((1, 10, 10), np.float32)
    _, cv, _, _ = G.epoch_conditioning_holdout(valid, valid, 1e-6, 0)
    np.testing.assert_array_equal(cv, valid)


def test_lone_pixel_is_always_held_out():
    valid = np.zeros((1, 5, 5), np.float32)
    valid[0, 2, 2] = 1
    _, cv, _, sv = G.epoch_conditioning_holdout(valid, valid, 0.3, 0)
    assert cv.sum() == 0 and sv.sum() == 1


def test_holdout_rate_bounds():
    v = np.ones((1, 2, 2))
    for rate in (0.0, 1.0):
        with pytest.raises(ValueError):
            G.epoch_conditioning_holdout(v, v, rate, 0)
