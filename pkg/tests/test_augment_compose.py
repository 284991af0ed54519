import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cp2.augment import AugmentConfig, ImageView, augment_view, load_image, make_view_set
from cp2.compose import compose, is_mixed, make_pair, make_plain_pair
from cp2.errors import GenerationFailed, InvalidConfig, InvalidInput, IOFailure
from cp2.masks import Mask, MaskConfig, downsample_mask

from oracles import compose_loops


def rand_img(rng, size=64):
    return rng.random((size, size, 3))


def test_identity_configuration():
    img = rand_img(np.random.default_rng(0))
    out = augment_view(img, AugmentConfig.disabled(64), np.random.default_rng(1))
    np.testing.assert_array_equal(out.pixels, img)


def test_grayscale_always():
    cfg = AugmentConfig(grayscale_prob=1.0)
    out = augment_view(rand_img(np.random.default_rng(0)), cfg, np.random.default_rng(2)).pixels
    np.testing.assert_array_equal(out[..., 0], out[..., 1])
    np.testing.assert_array_equal(out[..., 1], out[..., 2])


def test_same_seed_same_output():
    img = rand_img(np.random.default_rng(0), 80)
    a = augment_view(img, AugmentConfig(), np.random.default_rng(9)).pixels
    b = augment_view(img, AugmentConfig(), np.random.default_rng(9)).pixels
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(8, 100), st.integers(8, 100))
def test_range_and_shape(seed, h, w):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3)) * 1.2 - 0.1  # a little out of range on purpose
    cfg = AugmentConfig(target_size=32, jitter_prob=1.0, blur_prob=1.0)
    out = augment_view(img, cfg, rng).pixels
    assert out.shape == (32, 32, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_uint8_input_accepted():
    img = (rand_img(np.random.default_rng(0)) * 255).astype(np.uint8)
    out = augment_view(img, AugmentConfig.disabled(64), np.random.default_rng(0)).pixels
    np.testing.assert_allclose(out, img / 255.0)


def test_too_small_or_wrong_shape():
    with pytest.raises(InvalidInput):
        augment_view(np.zeros((1, 5, 3)), AugmentConfig(), np.random.default_rng(0))
    with pytest.raises(InvalidInput):
        augment_view(np.zeros((8, 8)), AugmentConfig(), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(InvalidConfig):
        AugmentConfig(target_size=60).validate(stride=16)
    with pytest.raises(InvalidConfig):
        AugmentConfig(blur_prob=1.5).validate()
    with pytest.raises(InvalidConfig):
        AugmentConfig(crop_scale_range=(0.0, 1.0)).validate()
    AugmentConfig().validate(stride=16)


def test_view_set_tags_and_independence():
    rng = np.random.default_rng(0)
    f, a, b = rand_img(rng), rand_img(rng), rand_img(rng)
    views = make_view_set(f, a, b, AugmentConfig(), np.random.default_rng(3))
    assert [v.view_tag for v in views] == ["q", "k", "q", "k"]
    assert not np.array_equal(views[0].pixels, views[1].pixels)


def test_view_set_disabled_returns_inputs():
    rng = np.random.default_rng(0)
    imgs = [rand_img(rng) for _ in range(3)]
    views = make_view_set(*imgs, AugmentConfig.disabled(64), np.random.default_rng(0))
    for v, src in zip(views, [imgs[0], imgs[0], imgs[1], imgs[2]]):
        np.testing.assert_array_equal(v.pixels, src)


def test_load_image(tmp_path):
    from PIL import Image
    arr = (np.random.default_rng(0).random((10, 12, 3)) * 255).astype(np.uint8)
    Image.fromarray(arr).save(tmp_path / "x.png")
    np.testing.assert_allclose(load_image(tmp_path / "x.png"), arr / 255.0)
    with pytest.raises(IOFailure):
        load_image(tmp_path / "nope.png")


# -- compose -----------------------------------------------------------------

def _view(px):
    return ImageView(px, "s", "q")


def test_compose_all_ones_all_zeros():
    rng = np.random.default_rng(0)
    f, b = rand_img(rng, 16), rand_img(rng, 16)
    ones = Mask(np.ones((16, 16), np.uint8), "rectangular")
    zeros = Mask(np.zeros((16, 16), np.uint8), "rectangular")
    assert compose(_view(f), _view(b), ones).pixels.tobytes() == f.tobytes()
    assert compose(_view(f), _view(b), zeros).pixels.tobytes() == b.tobytes()


def test_compose_checkerboard_matches_loop():
    rng = np.random.default_rng(1)
    f, b = rand_img(rng, 12), rand_img(rng, 12)
    m = (np.indices((12, 12)).sum(0) % 2).astype(np.uint8)
    out = compose(_view(f), _view(b), Mask(m, "patches")).pixels
    np.testing.assert_array_equal(out, compose_loops(f, b, m))


def test_compose_shape_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidInput):
        compose(_view(rand_img(rng, 8)), _view(rand_img(rng, 9)), Mask(np.ones((8, 8), np.uint8), "x"))
    with pytest.raises(InvalidInput):
        compose(_view(rand_img(rng, 8)), _view(rand_img(rng, 8)), Mask(np.ones((4, 4), np.uint8), "x"))


def test_make_pair_invariants():
    rng = np.random.default_rng(0)
    imgs = [rand_img(rng, 80) for _ in range(3)]
    for seed in range(1000):
        pair = make_pair(*imgs, AugmentConfig(), MaskConfig(), np.random.default_rng(seed), 16,
                         ids=("7", "1", "2"))
        assert is_mixed(pair.fmask_q) and is_mixed(pair.fmask_k)
        np.testing.assert_array_equal(pair.fmask_q, downsample_mask(pair.mask_q, 16))
        np.testing.assert_array_equal(pair.fmask_k, downsample_mask(pair.mask_k, 16))
        assert pair.image_q.pixels.shape[:2] == pair.mask_q.bits.shape
        assert pair.foreground_source_id == "7"
        assert pair.image_q.source_id == pair.image_k.source_id == "7"


def test_make_pair_single_cell_grid_fails():
    rng = np.random.default_rng(0)
    imgs = [rand_img(rng, 64) for _ in range(3)]
    with pytest.raises(GenerationFailed):
        make_pair(*imgs, AugmentConfig(), MaskConfig(retry_cap=20), np.random.default_rng(0), stride=64)


def test_make_pair_composes_by_mask():
    rng = np.random.default_rng(0)
    imgs = [rand_img(rng, 64) for _ in range(3)]
    pair = make_pair(*imgs, AugmentConfig.disabled(64), MaskConfig(), np.random.default_rng(4), 16)
    mq = pair.mask_q.bits.astype(bool)
    np.testing.assert_array_equal(pair.image_q.pixels[mq], imgs[0][mq])
    np.testing.assert_array_equal(pair.image_q.pixels[~mq], imgs[1][~mq])
    mk = pair.mask_k.bits.astype(bool)
    np.testing.assert_array_equal(pair.image_k.pixels[~mk], imgs[2][~mk])


def test_plain_pair_has_full_masks():
    pair = make_plain_pair(rand_img(np.random.default_rng(0)), AugmentConfig(), np.random.default_rng(0))
    assert pair.fmask_q.all() and pair.fmask_k.all()
