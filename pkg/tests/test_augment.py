from dataclasses import replace

import numpy as np
import pytest

from ufe.augment import (AugmentConfig, AugmentRecord, geometric_flow, geometric_image, photometric, replay,
                         sample_weak, strong_augment, weak_augment)
from ufe.data import rasterize

S = 32


def asymmetric_mask(size=S):
    m = np.zeros((size, size), np.uint8)
    m[3:9, 2:20] = 1
    m[12:28, 4:7] = 1
    return m


def nearest_oracle(rec: AugmentRecord, mask):
    """Per-pixel loop: output (i, j) reads the source pixel whose cell holds its center."""
    x, y, w, h = rec.crop
    oh, ow = rec.out_size
    out = np.zeros((oh, ow), mask.dtype)
    for i in range(oh):
        for j in range(ow):
            jj = ow - 1 - j if rec.hflip else j
            sy = y + min(int((i + 0.5) * h / oh), h - 1)
            sx = x + min(int((jj + 0.5) * w / ow), w - 1)
            out[i, j] = mask[sy, sx]
    return out


def shape_scene(seed):
    rng = np.random.default_rng(seed)
    pose = [rng.uniform(10, 22), rng.uniform(10, 22), rng.uniform(4, 8), rng.uniform(0, 6.3)]
    mask = rasterize(["circle", "square", "triangle"][seed % 3], pose, S)
    image = np.stack([mask * 0.8 + 0.1, rng.random((S, S)) * 0.1, 1 - mask * 0.5]).astype(np.float32)
    flow = rng.standard_normal((2, S, S)).astype(np.float32)
    return image, flow, mask


# --------------------------------------------------------------- weak
def test_identity_record_returns_input():
    image, flow, mask = shape_scene(0)
    (img, fl, m), rec = weak_augment(image, flow, mask, None, record=AugmentRecord.identity((S, S)))
    np.testing.assert_array_equal(img, image)
    np.testing.assert_array_equal(fl, flow)
    np.testing.assert_array_equal(m, mask)


def test_identity_via_config():
    cfg = AugmentConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), hflip_prob=0.0)
    image, flow, mask = shape_scene(1)
    (img, fl, m), rec = weak_augment(image, flow, mask, np.random.default_rng(0), cfg)
    assert rec.crop == (0, 0, S, S) and not rec.hflip
    np.testing.assert_array_equal(img, image)
    np.testing.assert_array_equal(m, mask)


def test_hflip_is_involution():
    image, flow, _ = shape_scene(2)
    rec = replace(AugmentRecord.identity((S, S)), hflip=True)
    np.testing.assert_array_equal(geometric_image(rec, geometric_image(rec, image)), image)
    np.testing.assert_array_equal(geometric_flow(rec, geometric_flow(rec, flow)), flow)


def test_hflip_negates_flow_dx():
    flow = np.stack([np.full((S, S), 3.0), np.full((S, S), 1.0)]).astype(np.float32)
    rec = replace(AugmentRecord.identity((S, S)), hflip=True)
    out = geometric_flow(rec, flow)
    np.testing.assert_array_equal(out[0], -3.0)
    np.testing.assert_array_equal(out[1], 1.0)


def test_resized_crop_rescales_flow():
    flow = np.stack([np.full((S, S), 2.0), np.full((S, S), -1.0)]).astype(np.float32)
    rec = AugmentRecord(src_size=(S, S), crop=(4, 8, 16, 8), out_size=(S, S))
    out = geometric_flow(rec, flow)
    np.testing.assert_allclose(out[0], 2.0 * S / 16)
    np.testing.assert_allclose(out[1], -1.0 * S / 8)


def test_replay_alignment_hundred_records():
    rng = np.random.default_rng(0)
    for k in range(100):
        image, flow, mask = shape_scene(k)
        (img, fl, joint), rec = weak_augment(image, flow, mask, rng)
        np.testing.assert_array_equal(replay(rec, mask), joint)
        np.testing.assert_array_equal(joint, nearest_oracle(rec, mask))
        assert img.shape == (3, S, S) and fl.shape == (2, S, S)


def test_mask_and_image_stay_aligned_without_resize():
    # an unscaled crop moves pixels exactly, so the mask can be read back off the image
    image, flow, mask = shape_scene(5)
    rec = AugmentRecord(src_size=(S, S), crop=(3, 5, 20, 24), out_size=(24, 20), hflip=True)
    img = geometric_image(rec, image)
    np.testing.assert_array_equal((img[0] > 0.5).astype(np.uint8), replay(rec, mask))


def test_replay_identity_and_mirror():
    m = asymmetric_mask()
    np.testing.assert_array_equal(replay(AugmentRecord.identity((S, S)), m), m)
    flipped = replay(replace(AugmentRecord.identity((S, S)), hflip=True), m)
    np.testing.assert_array_equal(flipped, m[:, ::-1])
    assert not np.array_equal(flipped, m)


def test_replay_size_mismatch():
    with pytest.raises(ValueError):
        replay(AugmentRecord.identity((S, S)), np.zeros((S, S + 1)))


def test_weak_outputs_in_range():
    rng = np.random.default_rng(3)
    for k in range(20):
        image, flow, mask = shape_scene(k)
        (img, _, m), _ = weak_augment(image, flow, mask, rng)
        assert 0 <= img.min() and img.max() <= 1
        assert set(np.unique(m)) <= {0, 1}


def test_sampled_crops_respect_config():
    rng = np.random.default_rng(4)
    cfg = AugmentConfig()
    for _ in range(200):
        rec = sample_weak(rng, (64, 64), cfg)
        x, y, w, h = rec.crop
        assert 0 <= x and x + w <= 64 and 0 <= y and y + h <= 64
        assert 0.6 <= w * h / 64 ** 2 <= 1.0


# ------------------------------------------------------------- strong
def views(seed):
    image, flow, mask = shape_scene(seed)
    return (image, flow), mask.astype(np.float32)


def test_no_box_is_photometric_only():
    (va, pa), (vb, pb) = views(0), views(1)
    (img, fl), mixed, rec = strong_augment(va, pa, vb, pb, np.random.default_rng(0), box=None)
    assert rec.cutmix_box is None
    np.testing.assert_array_equal(img, photometric(rec, va[0]))
    np.testing.assert_array_equal(fl, va[1])
    np.testing.assert_array_equal(mixed, pa)


def test_zero_area_box_is_ignored():
    (va, pa), (vb, pb) = views(0), views(1)
    _, mixed, rec = strong_augment(va, pa, vb, pb, np.random.default_rng(0), box=(3, 3, 0, 5))
    assert rec.cutmix_box is None
    np.testing.assert_array_equal(mixed, pa)


def test_full_frame_box_takes_partner():
    (va, pa), (vb, pb) = views(0), views(1)
    (img, fl), mixed, _ = strong_augment(va, pa, vb, pb, np.random.default_rng(0), box=(0, 0, S, S))
    np.testing.assert_array_equal(mixed, pb)
    np.testing.assert_array_equal(fl, vb[1])
    np.testing.assert_array_equal(img, vb[0])


def test_quarter_box_region_oracle():
    (va, pa), (vb, pb) = views(2), views(3)
    box = (5, 9, 16, 16)  # area fraction 0.25
    (img, fl), mixed, _ = strong_augment(va, pa, vb, pb, np.random.default_rng(0), box=box)
    inside = np.zeros((S, S), bool)
    inside[9:25, 5:21] = True
    assert inside.mean() == 0.25
    np.testing.assert_array_equal(mixed[inside], pb[inside])
    np.testing.assert_array_equal(mixed[~inside], pa[~inside])
    np.testing.assert_array_equal(fl[:, inside], vb[1][:, inside])


def test_sampled_cutmix_matches_region_oracle():
    rng = np.random.default_rng(7)
    seen = 0
    for k in range(60):
        (va, pa), (vb, pb) = views(k), views(k + 1)
        _, mixed, rec = strong_augment(va, pa, vb, pb, rng, partner=1)
        if rec.cutmix_box is None:
            np.testing.assert_array_equal(mixed, pa)
            continue
        seen += 1
        x, y, w, h = rec.cutmix_box
        assert 0.09 <= w * h / S ** 2 <= 0.41 and rec.partner == 1
        region = np.zeros((S, S), bool)
        region[y:y + h, x:x + w] = True
        np.testing.assert_array_equal(mixed, np.where(region, pb, pa))
        # replaying the record on hard labels gives the same mixing
        np.testing.assert_array_equal(replay(rec, pa.astype(np.uint8), pb.astype(np.uint8)),
                                      mixed.astype(np.uint8))
    assert 15 < seen < 45


def test_photometric_leaves_flow_and_labels():
    (va, pa), (vb, pb) = views(4), views(5)
    rng = np.random.default_rng(1)
    for _ in range(10):
        (img, fl), mixed, rec = strong_augment(va, pa, vb, pb, rng, box=None)
        np.testing.assert_array_equal(fl, va[1])
        np.testing.assert_array_equal(mixed, pa)
        assert 0 <= img.min() and img.max() <= 1


def test_photometric_identity_and_grayscale():
    image, _, _ = shape_scene(6)
    rec = AugmentRecord.identity((S, S))
    assert rec.is_photometric_identity
    np.testing.assert_allclose(photometric(rec, image), image, atol=1e-6)
    gray = photometric(replace(rec, grayscale=True), image)
    np.testing.assert_array_equal(gray[0], gray[1])
    np.testing.assert_array_equal(gray[1], gray[2])


def test_soft_labels_mixed_pixelwise():
    (va, _), (vb, _) = views(8), views(9)
    pa = np.random.default_rng(0).random((S, S)).astype(np.float32)
    pb = np.random.default_rng(1).random((S, S)).astype(np.float32)
    _, mixed, _ = strong_augment(va, pa, vb, pb, np.random.default_rng(0), box=(0, 0, 10, S))
    np.testing.assert_array_equal(mixed[:, :10], pb[:, :10])
    np.testing.assert_array_equal(mixed[:, 10:], pa[:, 10:])


def test_strong_size_mismatch():
    (va, pa), (vb, pb) = views(0), views(1)
    with pytest.raises(ValueError):
        strong_augment(va, pa, vb, pb[:, :-1], np.random.default_rng(0))
