"""Bundle metadata, region reads, and thumbnails."""
import json

import numpy as np
import pytest

from tilscore.errors import BoundsError, BundleFormatError, BundleIntegrityError
from tilscore.slide_io import SlideMeta, make_thumbnail, open_bundle, write_bundle


def _meta(slide_id="s", mpp=0.5, dims=((128, 96), (32, 24)), ds=(1.0, 4.0)):
    return SlideMeta(slide_id=slide_id, mpp=mpp, level_dims=dims, level_downsamples=ds)


def _levels(meta, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    return [rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
            for w, h in meta.level_dims]


def test_meta_validation():
    with pytest.raises(BundleFormatError):
        _meta(slide_id="")
    with pytest.raises(BundleFormatError):
        _meta(mpp=0.0)
    with pytest.raises(BundleFormatError):
        _meta(dims=((128, 96),), ds=(1.0, 4.0))
    with pytest.raises(BundleFormatError):
        _meta(dims=((32, 24), (128, 96)))  # growing levels
    with pytest.raises(BundleFormatError):
        _meta(ds=(4.0, 1.0))
    with pytest.raises(BundleFormatError):
        _meta(dims=((0, 96), (32, 24)))


def test_meta_json_round_trip(tmp_path):
    meta = _meta()
    path = write_bundle(tmp_path / "s", meta, _levels(meta))
    bundle = open_bundle(path)
    assert bundle.meta == meta
    raw = json.loads((path / "meta.json").read_text())
    assert raw["slide_id"] == "s"
    assert [lv["index"] for lv in raw["levels"]] == [0, 1]


def test_write_open_pixel_round_trip(tmp_path):
    meta = _meta()
    levels = _levels(meta, seed=5)
    bundle = open_bundle(write_bundle(tmp_path / "s", meta, levels))
    for i, arr in enumerate(levels):
        w, h = meta.level_dims[i]
        got = bundle.read_region(i, 0, 0, w, h)
        assert np.array_equal(got, arr)


def test_read_region_window(tmp_path):
    meta = _meta()
    levels = _levels(meta, seed=9)
    bundle = open_bundle(write_bundle(tmp_path / "s", meta, levels))
    got = bundle.read_region(0, 10, 20, 7, 5)
    assert np.array_equal(got, levels[0][20:25, 10:17])


def test_read_region_bounds(tmp_path):
    meta = _meta()
    bundle = open_bundle(write_bundle(tmp_path / "s", meta, _levels(meta)))
    with pytest.raises(BoundsError):
        bundle.read_region(0, 120, 0, 16, 16)
    with pytest.raises(BoundsError):
        bundle.read_region(0, -1, 0, 4, 4)
    with pytest.raises(ValueError):
        bundle.read_region(2, 0, 0, 4, 4)
    with pytest.raises(ValueError):
        bundle.read_region(0, 0, 0, 0, 4)


def test_open_missing_meta(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(BundleFormatError):
        open_bundle(tmp_path / "empty")


def test_open_bad_meta_json(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "meta.json").write_text("{not json")
    with pytest.raises(BundleFormatError):
        open_bundle(d)


def test_open_meta_schema_errors(tmp_path):
    d = tmp_path / "schema"
    d.mkdir()
    (d / "meta.json").write_text(json.dumps({"slide_id": "x", "mpp": 0.5}))
    with pytest.raises(BundleFormatError):
        open_bundle(d)


def test_missing_level_raster(tmp_path):
    meta = _meta()
    path = write_bundle(tmp_path / "s", meta, _levels(meta))
    (path / "level_1.png").unlink()
    with pytest.raises(BundleIntegrityError):
        open_bundle(path)


def test_raster_dimension_mismatch(tmp_path):
    meta = _meta()
    path = write_bundle(tmp_path / "s", meta, _levels(meta))
    small = _meta(dims=((64, 48), (16, 12)))
    write_bundle(tmp_path / "other", small, _levels(small))
    (path / "level_0.png").write_bytes((tmp_path / "other" / "level_0.png").read_bytes())
    with pytest.raises(BundleIntegrityError):
        open_bundle(path)


def test_write_bundle_validates_levels(tmp_path):
    meta = _meta()
    with pytest.raises(ValueError):
        write_bundle(tmp_path / "s", meta, _levels(meta)[:1])
    levels = _levels(meta)
    levels[0] = levels[0][:-1]
    with pytest.raises(ValueError):
        write_bundle(tmp_path / "s", meta, levels)


def test_thumbnail_scale_and_dims(tmp_path):
    meta = _meta(dims=((128, 96), (32, 24)))
    bundle = open_bundle(write_bundle(tmp_path / "s", meta, _levels(meta)))
    thumb, scale = make_thumbnail(bundle, 64)
    assert thumb.shape == (48, 64, 3)
    assert scale == pytest.approx(2.0)
    # already small: identity copy at scale 1
    full, s1 = make_thumbnail(bundle, 4096)
    assert s1 == 1.0
    assert full.shape == (96, 128, 3)
    with pytest.raises(ValueError):
        make_thumbnail(bundle, 0)


def test_thumbnail_uniform_slide_stays_uniform(tmp_path):
    meta = _meta(dims=((256, 256), (64, 64)))
    levels = [np.full((h, w, 3), 200, dtype=np.uint8) for w, h in meta.level_dims]
    bundle = open_bundle(write_bundle(tmp_path / "u", meta, levels))
    thumb, _ = make_thumbnail(bundle, 64)
    assert np.all(thumb == 200)


def test_has_truth(tmp_path, make_bundle):
    bundle = make_bundle(slide_id="with_truth")
    assert bundle.has_truth()
    meta = _meta()
    plain = open_bundle(write_bundle(tmp_path / "plain", meta, _levels(meta)))
    assert not plain.has_truth()
