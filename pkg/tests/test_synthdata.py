import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from grass.errors import ConfigError, DataError
from grass.synthdata import (
    ImagePatch,
    MosaicSpec,
    count_classes,
    generate_dataset,
    generate_mosaic,
    load_dataset,
    save_dataset,
)


def test_single_tile_has_one_class():
    p = generate_mosaic(MosaicSpec(tiles_per_side=1, small_objects=(0, 0)), seed=3)
    assert count_classes(p.mask) == 1


def test_distinct_two_by_two():
    spec = MosaicSpec(tiles_per_side=2, distinct_tiles=True, small_objects=(0, 0))
    for seed in range(10):
        assert count_classes(generate_mosaic(spec, seed).mask) == 4


def test_deterministic():
    spec = MosaicSpec()
    a, b = generate_mosaic(spec, 7), generate_mosaic(spec, 7)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.mask, b.mask)
    c = generate_mosaic(spec, 8)
    assert not np.array_equal(a.pixels, c.pixels)


def test_patch_contract():
    p = generate_mosaic(MosaicSpec(image_size=32), 0)
    assert p.pixels.shape == (32, 32, 3) and p.mask.shape == (32, 32)
    assert p.pixels.dtype == np.float32
    assert 0.0 <= p.pixels.min() and p.pixels.max() <= 1.0
    # 8-bit quantised
    assert np.allclose(p.pixels * 255, np.round(p.pixels * 255), atol=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(1, 4))
def test_class_count_bounds(seed, n_cls, tiles):
    spec = MosaicSpec(image_size=32, num_classes=n_cls, tiles_per_side=(1, tiles))
    p = generate_mosaic(spec, seed)
    assert 1 <= count_classes(p.mask) <= n_cls
    assert p.mask.min() >= 0 and p.mask.max() < n_cls


def test_class_probs_skew():
    spec = MosaicSpec(class_probs=(1, 0, 0, 0, 0, 0), small_objects=(0, 0))
    assert all(count_classes(generate_mosaic(spec, s).mask) == 1 for s in range(5))


def test_count_classes_cases():
    assert count_classes(np.full((5, 5), 3)) == 1
    m = np.zeros((4, 6), dtype=int)
    m[:, 2:4] = 2
    m[:, 4:] = 5
    assert count_classes(m) == 3
    assert count_classes(np.array([[4]])) == 1


@pytest.mark.parametrize(
    "kwargs",
    [dict(image_size=8), dict(num_classes=1), dict(tiles_per_side=0), dict(tiles_per_side=3, distinct_tiles=True, num_classes=4),
     dict(class_probs=(1.0, 2.0))],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        MosaicSpec(**kwargs)


def test_patch_validation():
    with pytest.raises(DataError):
        ImagePatch(np.full((4, 4, 3), 1.5))
    with pytest.raises(DataError):
        ImagePatch(np.zeros((4, 4, 3)), mask=np.zeros((4, 5), dtype=int))


def test_save_load_roundtrip(tmp_path):
    patches = generate_dataset(MosaicSpec(image_size=32), 5, seed=1)
    save_dataset(patches, tmp_path)
    loaded = load_dataset(tmp_path, with_masks=True)
    assert [p.source_id for p in loaded] == sorted(p.source_id for p in patches)
    for a, b in zip(sorted(patches, key=lambda p: p.source_id), loaded):
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.mask, b.mask)


def test_load_center_crop_and_errors(tmp_path):
    patches = generate_dataset(MosaicSpec(image_size=32), 2)
    save_dataset(patches, tmp_path)
    cropped = load_dataset(tmp_path, size=16)
    assert cropped[0].pixels.shape == (16, 16, 3)
    assert np.array_equal(cropped[0].mask, patches[0].mask[8:24, 8:24])
    with pytest.raises(DataError):
        load_dataset(tmp_path, size=64)
    (tmp_path / "masks" / f"{patches[1].source_id}.png").unlink()
    with pytest.raises(DataError, match="missing mask"):
        load_dataset(tmp_path)
    assert len(load_dataset(tmp_path, with_masks=False)) == 2


def test_load_size_mismatch(tmp_path):
    patches = generate_dataset(MosaicSpec(image_size=32), 1)
    save_dataset(patches, tmp_path)
    Image.fromarray(np.zeros((20, 20), np.uint8), mode="L").save(tmp_path / "masks" / f"{patches[0].source_id}.png")
    with pytest.raises(DataError, match="mismatch"):
        load_dataset(tmp_path)
