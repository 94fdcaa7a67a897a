import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from conftest import disk_mask
from cotsnets.data import (DatasetError, DatasetSpec, ImageSample, augment, flip, generate_synthetic,
                           iterations_per_epoch, load_dataset, make_batch, make_sample, paired_iterator, warp,
                           write_dataset)
from cotsnets.geometry import GaussianSpec, boundary_map
from cotsnets.metrics import dice_score


def _write_pair(root, name, img, mask):
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(root / "images" / f"{name}.png")
    Image.fromarray(mask).save(root / "masks" / f"{name}.png")


def _tiny(style="ellipse_speckle", n=4, seed=0, size=32):
    return generate_synthetic(style, n, seed=seed, size=size)


# ------------------------------------------------------------------- loading

def test_load_sorted_by_id(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("c", "a", "b"):
        m = np.zeros((20, 20), np.uint8)
        m[5:12, 5:12] = 255
        _write_pair(tmp_path, name, rng.integers(0, 255, (20, 20, 3), dtype=np.uint8), m)
    samples = load_dataset(DatasetSpec(str(tmp_path), resize_to=(16, 16)))
    assert [s.id for s in samples] == ["a", "b", "c"]
    s = samples[0]
    assert s.image.shape == (16, 16, 3) and s.mask.shape == (16, 16)
    assert 0 <= s.image.min() and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1}


def test_load_grayscale_image(tmp_path):
    m = np.zeros((16, 16), np.uint8)
    m[4:9, 4:9] = 255
    _write_pair(tmp_path, "g", np.full((16, 16), 100, np.uint8), m)
    (s,) = load_dataset(DatasetSpec(str(tmp_path), resize_to=(16, 16)))
    assert s.image.shape == (16, 16, 3)


def test_missing_mask_names_file(tmp_path):
    _write_pair(tmp_path, "ok", np.zeros((8, 8, 3), np.uint8), np.zeros((8, 8), np.uint8))
    Image.fromarray(np.zeros((8, 8, 3), np.uint8)).save(tmp_path / "images" / "orphan.png")
    with pytest.raises(DatasetError, match="orphan.png"):
        load_dataset(DatasetSpec(str(tmp_path), resize_to=(8, 8)))


def test_non_binary_mask_rejected(tmp_path):
    m = np.zeros((20, 20), np.uint8)
    m[:5, :5] = 128  # 25 of 400 pixels > 1%
    _write_pair(tmp_path, "grey", np.zeros((20, 20, 3), np.uint8), m)
    with pytest.raises(DatasetError, match="grey.png"):
        load_dataset(DatasetSpec(str(tmp_path), resize_to=(20, 20)))


def test_few_non_binary_pixels_tolerated(tmp_path):
    m = np.zeros((20, 20), np.uint8)
    m[5:10, 5:10] = 255
    m[0, 0] = 128  # 1 of 400 pixels
    _write_pair(tmp_path, "x", np.zeros((20, 20, 3), np.uint8), m)
    (s,) = load_dataset(DatasetSpec(str(tmp_path), resize_to=(20, 20)))
    assert s.mask[0, 0] == 1 and s.mask.sum() == 26


def test_bad_layout(tmp_path):
    with pytest.raises(DatasetError, match="images/"):
        load_dataset(DatasetSpec(str(tmp_path)))


def test_resize_keeps_mask_binary_and_area(tmp_path):
    disk = disk_mask(512, radius=150) * 255
    _write_pair(tmp_path, "disk", np.zeros((512, 512, 3), np.uint8), disk.astype(np.uint8))
    (s,) = load_dataset(DatasetSpec(str(tmp_path), resize_to=(256, 256)))
    assert set(np.unique(s.mask)) <= {0, 1}
    quarter = (disk > 0).sum() / 4
    assert abs(s.mask.sum() - quarter) <= 0.02 * quarter


def test_boundary_cache_coherent(tmp_path):
    spec = GaussianSpec(5, 1.0)
    write_dataset(_tiny(n=3), tmp_path)
    for s in load_dataset(DatasetSpec(str(tmp_path), resize_to=(32, 32)), spec) + _tiny(n=3):
        np.testing.assert_array_equal(s.boundary, boundary_map(s.mask, spec).values)


def test_write_then_load_round_trip(tmp_path):
    samples = _tiny("blob_texture", n=3)
    write_dataset(samples, tmp_path)
    loaded = load_dataset(DatasetSpec(str(tmp_path), resize_to=(32, 32), domain="source"))
    for a, b in zip(samples, loaded):
        assert a.id == b.id
        np.testing.assert_array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-6


# ----------------------------------------------------------------- synthetic

@pytest.mark.parametrize("style", ["ellipse_speckle", "blob_texture"])
def test_synthetic_deterministic(style):
    a, b = _tiny(style, n=5), _tiny(style, n=5)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
    other = _tiny(style, n=5, seed=1)
    assert not np.array_equal(a[0].image, other[0].image)


@pytest.mark.parametrize("style", ["ellipse_speckle", "blob_texture"])
def test_synthetic_masks_single_simply_connected(style):
    for s in generate_synthetic(style, 30, seed=2, size=64):
        assert s.mask.any()
        _, n_fg = ndimage.label(s.mask)
        assert n_fg == 1
        # background is one 4-connected piece once the border is included
        bg = np.pad(1 - s.mask, 1, constant_values=1)
        _, n_bg = ndimage.label(bg)
        assert n_bg == 1


@pytest.mark.parametrize("style", ["ellipse_speckle", "blob_texture"])
def test_synthetic_foreground_fraction(style):
    # Frozen from the reference generator: 0.05 <= mean fraction <= 0.30.
    frac = np.mean([s.mask.mean() for s in generate_synthetic(style, 100, seed=0, size=64)])
    assert 0.05 <= frac <= 0.30


def test_synthetic_domains_and_contrast():
    ell = generate_synthetic("ellipse_speckle", 10, seed=0, size=64)
    blob = generate_synthetic("blob_texture", 10, seed=0, size=64)
    assert {s.domain for s in ell} == {"target"} and {s.domain for s in blob} == {"source"}
    for s in ell:
        g = s.image[..., 0]
        assert g[s.mask > 0].mean() < g[s.mask == 0].mean()
    for s in blob:
        g = s.image[..., 0]
        assert g[s.mask > 0].mean() > g[s.mask == 0].mean()


def test_synthetic_rejects_bad_args():
    with pytest.raises(ValueError):
        generate_synthetic("stars", 1)
    with pytest.raises(ValueError):
        generate_synthetic("blob_texture", 0)


# ---------------------------------------------------------------- augmentation

def test_augment_identity_when_disabled():
    s = _tiny(n=1)[0]
    out = augment(s, np.random.default_rng(0), p=0.0)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)
    assert np.array_equal(out.boundary, s.boundary)


def test_flip_commutes_with_boundary():
    s = _tiny("blob_texture", n=1)[0]
    for axis in (0, 1):
        f = flip(s, axis)
        np.testing.assert_array_equal(f.mask, np.flip(s.mask, axis))
        np.testing.assert_allclose(f.boundary, boundary_map(f.mask).values, atol=1e-12)


def test_rotation_round_trip_on_disk():
    disk = disk_mask(64)
    _, once = warp(None, disk, angle_deg=15)
    _, back = warp(None, once, angle_deg=-15)
    assert dice_score(back, disk) >= 95


def test_augment_keeps_mask_binary_and_boundary_fresh():
    s = _tiny("blob_texture", n=1, size=48)[0]
    for seed in range(15):
        out = augment(s, np.random.default_rng(seed), p=0.8)
        assert set(np.unique(out.mask)) <= {0, 1}
        assert out.image.shape == s.image.shape and out.image.dtype == np.float32
        assert 0 <= out.image.min() and out.image.max() <= 1
        np.testing.assert_allclose(out.boundary, boundary_map(out.mask).values, atol=1e-12)


def test_augment_always_changes_with_p1():
    s = _tiny(n=1)[0]
    out = augment(s, np.random.default_rng(3), p=1.0)
    assert not np.array_equal(out.image, s.image)


def test_warp_shift_moves_mask():
    m = np.zeros((20, 20), np.uint8)
    m[5:8, 5:8] = 1
    _, moved = warp(None, m, shift=(2, 3))
    assert moved[7:10, 8:11].all() and moved.sum() == 9


# ------------------------------------------------------------------- batching

def _set(domain, n, size=8):
    return [make_sample(np.zeros((size, size, 3)), np.eye(size, dtype=np.uint8), domain, f"{domain}{i}")
            for i in range(n)]


def test_iterations_per_epoch():
    assert iterations_per_epoch(8, 8, 4) == 2
    assert iterations_per_epoch(8, 4, 4) == 2
    assert iterations_per_epoch(9, 4, 4) == 3


def test_paired_iterator_equal_sizes():
    batches = list(paired_iterator(_set("source", 8), _set("target", 8), 4, seed=0))
    assert len(batches) == 2
    for sb, tb in batches:
        assert sb.domain == "source" and tb.domain == "target"
        assert len(sb) == len(tb) == 4
    assert sorted(i for sb, _ in batches for i in sb.ids) == sorted(f"source{i}" for i in range(8))


def test_paired_iterator_cycles_shorter_set():
    batches = list(paired_iterator(_set("source", 8), _set("target", 4), 4, seed=0))
    assert len(batches) == 2
    tids = [i for _, tb in batches for i in tb.ids]
    assert sorted(tids) == sorted([f"target{i}" for i in range(4)] * 2)


def test_paired_iterator_deterministic():
    a = [(s.ids, t.ids) for s, t in paired_iterator(_set("source", 7), _set("target", 5), 3, seed=4, epoch=2)]
    b = [(s.ids, t.ids) for s, t in paired_iterator(_set("source", 7), _set("target", 5), 3, seed=4, epoch=2)]
    c = [(s.ids, t.ids) for s, t in paired_iterator(_set("source", 7), _set("target", 5), 3, seed=4, epoch=3)]
    assert a == b and a != c


def test_paired_iterator_never_mixes_domains():
    with pytest.raises(DatasetError):
        make_batch(_set("source", 1) + _set("target", 1))
    with pytest.raises(DatasetError):
        next(paired_iterator([], _set("target", 2), 2))


def test_make_batch_layout():
    b = make_batch(_tiny(n=3))
    assert b.images.shape == (3, 3, 32, 32) and b.masks.shape == (3, 1, 32, 32)
    assert b.boundaries.shape == (3, 1, 32, 32)
    assert isinstance(_tiny(n=1)[0], ImageSample)


def test_paired_iterator_applies_transform_deterministically():
    src, tgt = _tiny("blob_texture", n=4), _tiny(n=4)
    tf = lambda s, r: augment(s, r, p=0.5)
    a = [sb.images for sb, _ in paired_iterator(src, tgt, 2, seed=1, transform=tf)]
    b = [sb.images for sb, _ in paired_iterator(src, tgt, 2, seed=1, transform=tf)]
    assert all(np.array_equal(x.numpy(), y.numpy()) for x, y in zip(a, b))
