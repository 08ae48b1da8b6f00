"""Shared fixtures: synthetic slide factories and small pipeline configs."""
import pytest

from tilscore.config import PipelineConfig
from tilscore.slide_io import open_bundle
from tilscore.synthetic import RegionSpec, SyntheticSpec, generate_synthetic_slide


def small_config(**overrides):
    """Config sized for fast tests: 96 px patches on a 480 px thumbnail."""
    base = dict(patch_size=96, thumbnail_max_dim=480, sampling_ratio=0.3, seed=11)
    base.update(overrides)
    return PipelineConfig(**base)


def build_bundle(out_dir, slide_id="slide", width=960, height=960, mpp=4.0,
                 regions=None, seed=7, til_share=1.0):
    """Generate a synthetic bundle under out_dir and open it."""
    if regions is None:
        regions = (RegionSpec(96, 96, 672, 768, "stroma", 2000.0),)
    spec = SyntheticSpec(
        slide_id=slide_id, width=width, height=height, mpp=mpp,
        regions=tuple(regions), til_share=til_share,
    )
    return open_bundle(generate_synthetic_slide(spec, seed=seed, out_dir=out_dir))


@pytest.fixture
def make_bundle(tmp_path):
    def factory(**kwargs):
        return build_bundle(tmp_path, **kwargs)
    return factory
