"""Backbone and multi-task head tests: shape contract, translation
covariance, response-cell locality, gather-vs-convolution parity for the
mask head, refinement decoder wiring, calibration, and checkpointing."""

import numpy as np
import pytest

from trackseg import autodiff as ad
from trackseg import backbone as bb
from trackseg import checkpoint, model


def tiny_cfg(variant="3b", bvariant="four_stage", refine=True):
    return model.ModelConfig(
        backbone=bb.BackboneConfig(variant=bvariant, channels=(4, 6, 8, 10),
                                   adjust_channels=12),
        variant=variant, k=3, head_hidden=16, mask_hidden=16,
        refine=refine and bvariant == "four_stage",
        refine_mid=8, skip_proj=(6, 5, 4))


def rand_pair(rng):
    z = rng.random((3, 127, 127)).astype(np.float32)
    x = rng.random((3, 255, 255)).astype(np.float32)
    return ad.tensor(z), ad.tensor(x)


def test_backbone_shapes_four_stage():
    cfg = bb.BackboneConfig(channels=(4, 6, 8, 10), adjust_channels=12)
    params = bb.init_backbone(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    z = ad.tensor(rng.random((3, 127, 127)).astype(np.float32))
    x = ad.tensor(rng.random((3, 255, 255)).astype(np.float32))
    fz, sz = bb.embed(cfg, params, z)
    fx, sx = bb.embed(cfg, params, x)
    assert fz.data.shape == (10, 15, 15)
    assert fx.data.shape == (10, 31, 31)
    assert sz[2].data.shape == (4, 63, 63) and sx[2].data.shape == (4, 127, 127)
    assert sz[4].data.shape == (6, 31, 31) and sx[4].data.shape == (6, 63, 63)
    assert sz[8].data.shape == (8, 15, 15) and sx[8].data.shape == (8, 31, 31)
    row, skips = bb.forward_pair(cfg, params, z, x)
    assert row.data.shape == (12, 17, 17)
    assert set(skips) == {2, 4, 8}


def test_backbone_shapes_single_stage():
    cfg = bb.BackboneConfig(variant="single_stage", channels=(4, 6, 8, 10),
                            adjust_channels=12)
    params = bb.init_backbone(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    z = ad.tensor(rng.random((3, 127, 127)).astype(np.float32))
    x = ad.tensor(rng.random((3, 255, 255)).astype(np.float32))
    fz, sz = bb.embed(cfg, params, z)
    fx, sx = bb.embed(cfg, params, x)
    assert fz.data.shape == (10, 15, 15) and sz == {}
    assert fx.data.shape == (10, 31, 31) and sx == {}


def test_embed_rejects_wrong_size():
    cfg = bb.BackboneConfig(channels=(4, 6, 8, 10), adjust_channels=12)
    params = bb.init_backbone(cfg, np.random.default_rng(0))
    bad = ad.tensor(np.zeros((3, 128, 128), dtype=np.float32))
    with pytest.raises(ad.ShapeError, match="127"):
        bb.embed(cfg, params, bad)
    with pytest.raises(ad.ShapeError):
        bb.embed(cfg, params, ad.tensor(np.zeros((1, 127, 127), np.float32)))


@pytest.mark.parametrize("variant,border", [("four_stage", 2),
                                            ("single_stage", 0)])
def test_translation_covariance_one_cell_per_8px(variant, border):
    # Shifting the search image by the feature stride (8 px) shifts the
    # feature map by one cell; valid convolutions make this exact away from
    # the dilated stage's 2-cell border halo.
    cfg = bb.BackboneConfig(variant=variant, channels=(4, 6, 8, 10),
                            adjust_channels=12)
    params = bb.init_backbone(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(3)
    big = rng.random((3, 255, 263)).astype(np.float32)
    f1, _ = bb.embed(cfg, params, ad.tensor(big[:, :, :255]))
    f2, _ = bb.embed(cfg, params, ad.tensor(big[:, :, 8:263]))
    n = f1.data.shape[-1]
    lo, hi = border, n - border
    a = f1.data[:, lo:hi, lo + 1:hi]
    b = f2.data[:, lo:hi, lo:hi - 1]
    np.testing.assert_allclose(a, b, atol=1e-6)
    assert np.abs(a).max() > 0


def test_mask_locality_single_stage_exact():
    # With the single-stage backbone each response cell (i, j) depends on
    # exactly search pixels [8i, 8i+127) x [8j, 8j+127): pixels outside
    # that window must not change the cell's mask logits AT ALL.
    cfg = tiny_cfg(bvariant="single_stage", refine=False)
    params = model.init_model(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    z, x1 = rand_pair(rng)
    x2d = x1.data.copy()
    x2d[:, 136:, 136:] = rng.random(x2d[:, 136:, 136:].shape).astype(np.float32)
    x2 = ad.tensor(x2d)

    f1 = model.forward_features(cfg, params, z, x1)
    f2 = model.forward_features(cfg, params, z, x2)
    m1 = model.mask_logits_at(cfg, params, f1, [(0, 0)])
    m2 = model.mask_logits_at(cfg, params, f2, [(0, 0)])
    assert np.array_equal(m1.data, m2.data)
    # ... and a cell whose window covers the edited pixels does change.
    c1 = model.mask_logits_at(cfg, params, f1, [(2, 2)])
    c2 = model.mask_logits_at(cfg, params, f2, [(2, 2)])
    assert not np.array_equal(c1.data, c2.data)


def test_mask_gather_matches_full_convolution():
    cfg = tiny_cfg()
    params = model.init_model(cfg, np.random.default_rng(0))
    z, x = rand_pair(np.random.default_rng(2))
    feats = model.forward_features(cfg, params, z, x)
    cells = [(0, 0), (5, 7), (16, 16), (5, 7)]
    got = model.mask_logits_at(cfg, params, feats, cells)
    full = model.mask_logits_full(cfg, params, feats)
    assert got.data.shape == (63 * 63, 4)
    for n, (i, j) in enumerate(cells):
        np.testing.assert_allclose(got.data[:, n], full.data[:, i, j],
                                   rtol=1e-5, atol=1e-6)


def test_head_shapes_and_variant_gates():
    cfg3 = tiny_cfg("3b")
    p3 = model.init_model(cfg3, np.random.default_rng(0))
    z, x = rand_pair(np.random.default_rng(1))
    f3 = model.forward_features(cfg3, p3, z, x)
    assert model.score_logits(cfg3, p3, f3).data.shape == (6, 17, 17)
    assert model.box_deltas(cfg3, p3, f3).data.shape == (12, 17, 17)

    cfg2 = tiny_cfg("2b")
    p2 = model.init_model(cfg2, np.random.default_rng(0))
    f2 = model.forward_features(cfg2, p2, z, x)
    assert model.score_logits(cfg2, p2, f2).data.shape == (1, 17, 17)
    with pytest.raises(ValueError, match="3b"):
        model.box_deltas(cfg2, p2, f2)
    assert "box.c6.w" not in p2


def test_refine_shapes_at_grid_corners():
    cfg = tiny_cfg()
    params = model.init_model(cfg, np.random.default_rng(0))
    z, x = rand_pair(np.random.default_rng(4))
    feats = model.forward_features(cfg, params, z, x)
    outs = []
    for cell in [(0, 0), (16, 16), (8, 3)]:
        r = model.refine_logits_at(cfg, params, feats, cell)
        assert r.data.shape == (127, 127)
        assert np.isfinite(r.data).all()
        outs.append(r.data)
    assert not np.array_equal(outs[0], outs[1])
    with pytest.raises(ValueError, match="grid"):
        model.refine_logits_at(cfg, params, feats, (17, 0))


def test_refine_requires_four_stage():
    with pytest.raises(ValueError, match="four_stage"):
        model.ModelConfig(
            backbone=bb.BackboneConfig(variant="single_stage"),
            refine=True).validate()
    with pytest.raises(ValueError, match="variant"):
        model.ModelConfig(variant="4b").validate()
    with pytest.raises(ValueError, match="k must be"):
        model.ModelConfig(k=0).validate()


def test_init_deterministic_and_checkpoint_round_trip(tmp_path):
    cfg = tiny_cfg()
    p1 = model.init_model(cfg, np.random.default_rng(7))
    p2 = model.init_model(cfg, np.random.default_rng(7))
    assert set(p1) == set(p2)
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data), k

    path = str(tmp_path / "model.ckpt")
    checkpoint.save(path, p1)
    loaded = checkpoint.load(path)
    assert set(loaded) == set(p1)
    for k in p1:
        assert np.array_equal(loaded[k], p1[k].data), k

    z, x = rand_pair(np.random.default_rng(8))
    f1 = model.forward_features(cfg, p1, z, x)
    for k in p2:
        p2[k].data[:] = loaded[k]
    f2 = model.forward_features(cfg, p2, z, x)
    assert np.array_equal(model.score_logits(cfg, p1, f1).data,
                          model.score_logits(cfg, p2, f2).data)


def test_calibration_standardizes_hidden_activations():
    cfg = tiny_cfg()
    params = model.init_model(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(5)

    class P:
        pass

    pairs = []
    for _ in range(3):
        p = P()
        p.z = rng.random((3, 127, 127)).astype(np.float32)
        p.x = rng.random((3, 255, 255)).astype(np.float32)
        pairs.append(p)
    model.calibrate(cfg, params, pairs)
    assert params["score.norm.sigma"].data.min() > 0

    # Post-standardization (gamma=1, beta=0) activations on the calibration
    # data should be ~zero-mean/unit-variance per channel, pre-relu.
    acc = []
    for p in pairs:
        row, _ = bb.forward_pair(cfg.backbone, params,
                                 ad.tensor(p.z), ad.tensor(p.x))
        h = ad.conv2d(row, params["score.c5.w"], params["score.c5.b"])
        g = ad.channel_affine(h, params["score.norm.gamma"],
                              params["score.norm.beta"],
                              params["score.norm.mu"],
                              params["score.norm.sigma"])
        acc.append(g.data.reshape(g.data.shape[0], -1))
    a = np.concatenate(acc, axis=1)
    np.testing.assert_allclose(a.mean(axis=1), 0.0, atol=0.05)
    np.testing.assert_allclose(a.std(axis=1), 1.0, atol=0.05)
