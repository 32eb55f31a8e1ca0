import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gltrans.backbone import BackboneConfig, ConfigError, ViTBackbone, patchify, window_origins
from gltrans.tensor import Tensor, no_grad

from .conftest import random_images


def enumerate_windows(h, w, s, p):
    """Every origin whose P x P window fits inside the image."""
    return [(y, x) for y in range(0, h, s) for x in range(0, w, s) if y + p <= h and x + p <= w]


def test_reference_geometry_count():
    cfg = BackboneConfig(image_h=256, image_w=128, dim=8, heads=1, depth=0)
    assert cfg.grid == (21, 10)
    assert cfg.num_patches == 210


def test_toy_geometry_count():
    cfg = BackboneConfig()
    assert cfg.grid == (4, 2) and cfg.num_patches == 8
    assert len(enumerate_windows(52, 28, 12, 16)) == 8


def test_48x24_gives_three_windows():
    # with in-bounds windows the formula gives 3 for 48x24, not 8
    cfg = BackboneConfig(image_h=48, image_w=24)
    assert cfg.grid == (3, 1)
    assert len(enumerate_windows(48, 24, 12, 16)) == 3


@settings(max_examples=60)
@given(st.integers(1, 16), st.integers(0, 60), st.integers(0, 60))
def test_formula_matches_window_enumeration(s, extra_h, extra_w):
    p = 16
    s = min(s, p)
    h, w = p + extra_h, p + extra_w
    cfg = BackboneConfig(image_h=h, image_w=w, stride=s, patch=p, dim=4, heads=1, depth=0)
    assert cfg.num_patches == len(enumerate_windows(h, w, s, p))


@pytest.mark.parametrize("s", [1, 5, 16])
def test_single_window_is_the_image(rng, s):
    cfg = BackboneConfig(image_h=16, image_w=16, stride=s, dim=4, heads=1)
    img = random_images(rng, 1, cfg)
    out = patchify(img, cfg)
    assert out.shape == (1, 1, 16 * 16 * 3)
    np.testing.assert_array_equal(out[0, 0], img[0].reshape(-1))


def test_patch_order_is_row_major(rng):
    cfg = BackboneConfig()
    img = random_images(rng, 1, cfg)[0]
    out = patchify(img, cfg)[0]
    for k, (y, x) in enumerate(enumerate_windows(52, 28, 12, 16)):
        np.testing.assert_array_equal(out[k], img[y : y + 16, x : x + 16].reshape(-1))
    assert list(window_origins(52, 12, 16)) == [0, 12, 24, 36]


def test_patchify_rejects_wrong_shape():
    with pytest.raises(ConfigError, match="does not match"):
        patchify(np.zeros((50, 28, 3)), BackboneConfig())


@pytest.mark.parametrize(
    "kw",
    [dict(stride=17), dict(stride=0), dict(image_h=10), dict(dim=30, heads=4), dict(depth=-1), dict(num_cameras=0)],
)
def test_bad_config(kw):
    with pytest.raises(ConfigError):
        BackboneConfig(**kw)


def test_embed_zero_everything():
    cfg = BackboneConfig()
    bb = ViTBackbone(cfg, np.random.default_rng(0))
    bb.patch_embed.bias.data[:] = 0
    out = bb.embed(np.zeros((2, 52, 28, 3), np.float32), [0, 1])
    assert out.shape == (2, 9, 64)
    assert not out.data.any()


def test_embed_shape_for_toy_config(rng):
    cfg = BackboneConfig()
    bb = ViTBackbone(cfg, rng)
    assert bb.embed(random_images(rng, 3, cfg), 0).shape == (3, cfg.num_patches + 1, cfg.dim)
    assert bb.pos_embed.shape == (cfg.num_patches + 1, cfg.dim)


def test_side_embedding_is_additive(rng):
    cfg = BackboneConfig()
    bb = ViTBackbone(cfg, rng)
    bb.side_embed.data = rng.standard_normal(bb.side_embed.shape).astype(np.float32)
    img = random_images(rng, 1, cfg)
    a = bb.embed(img, 1).data
    b = bb.embed(img, 3).data
    diff = bb.side_embed.data[1] - bb.side_embed.data[3]
    np.testing.assert_allclose(a - b, np.broadcast_to(diff, a.shape), atol=1e-5)


def test_camera_out_of_range(rng):
    cfg = BackboneConfig()
    bb = ViTBackbone(cfg, rng)
    with pytest.raises(ConfigError, match="camera"):
        bb.embed(random_images(rng, 1, cfg), 4)


def test_depth_zero_bundle(rng):
    cfg = BackboneConfig(depth=0)
    bb = ViTBackbone(cfg, rng)
    bundle = bb(random_images(rng, 2, cfg), 0)
    assert bundle.depth == 0 and len(bundle.layers) == 1


def test_every_layer_keeps_n_plus_one_tokens(rng):
    cfg = BackboneConfig()
    bundle = ViTBackbone(cfg, rng)(random_images(rng, 2, cfg), [0, 2])
    assert bundle.depth == 4
    assert all(t.shape == (2, 9, 64) for t in bundle.layers)
    assert bundle.grid[0] * bundle.grid[1] == 8


def test_zero_branches_give_identity_layers(rng):
    cfg = BackboneConfig()
    bb = ViTBackbone(cfg, rng)
    for layer in bb.layers:
        for lin in (layer.msa.proj, layer.ffn.fc2):
            lin.weight.data[:] = 0
            lin.bias.data[:] = 0
    bundle = bb(random_images(rng, 1, cfg), 0)
    for t in bundle.layers[1:]:
        assert np.array_equal(t.data, bundle.layers[0].data)


def test_position_permutation_equivariance(rng):
    cfg = BackboneConfig()
    bb = ViTBackbone(cfg, rng)
    bb.pos_embed.data = rng.standard_normal(bb.pos_embed.shape).astype(np.float32)
    img = random_images(rng, 1, cfg)
    with no_grad():
        seq = bb.embed(img, 0).data
        base = bb.encode(Tensor(seq)).layers[-1].data
        # swap patches 2 and 5 in the content and in the position table
        perm = np.arange(9)
        perm[[3, 6]] = perm[[6, 3]]
        content = seq - bb.pos_embed.data
        moved = content[:, perm] + bb.pos_embed.data[perm]
        out = bb.encode(Tensor(moved)).layers[-1].data
    np.testing.assert_allclose(out, base[:, perm], rtol=1e-4, atol=1e-5)
