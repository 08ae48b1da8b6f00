"""Ratio sweep tests: stability statistics, draw-size law, determinism."""

import math

import pytest
from conftest import small_config

from tilscore.errors import DataError
from tilscore.pipeline import enumerate_slide
from tilscore.slide_io import open_bundle
from tilscore.sweep import (
    DEFAULT_RATIOS,
    SWEEP_COLUMNS,
    SweepRow,
    ratio_sweep,
    write_sweep_csv,
)
from tilscore.synthetic import RegionSpec, SyntheticSpec, generate_synthetic_slide


def graded_slide(out_dir, slide_id, density, seed):
    spec = SyntheticSpec(
        slide_id=slide_id, width=768, height=768, mpp=4.0,
        regions=(RegionSpec(96, 96, 480, 480, "stroma", density),),
    )
    return open_bundle(generate_synthetic_slide(spec, seed=seed, out_dir=out_dir))


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    """Four planted slides with density-ordered survival, all events."""
    root = tmp_path_factory.mktemp("sweepslides")
    densities = {"g0": 600.0, "g1": 1400.0, "g2": 2400.0, "g3": 3600.0}
    bundles = [graded_slide(root, sid, d, seed=30 + i)
               for i, (sid, d) in enumerate(sorted(densities.items()))]
    rows = [("g0", 10.0, True, 0.0), ("g1", 20.0, True, 0.0),
            ("g2", 30.0, True, 0.0), ("g3", 40.0, True, 0.0)]
    return bundles, rows


def test_sweep_row_validation():
    SweepRow(0.5, 0.8, 0.0, 3.0, 10)
    with pytest.raises(ValueError):
        SweepRow(0.0, 0.8, 0.0, 3.0, 10)
    with pytest.raises(ValueError):
        SweepRow(1.5, 0.8, 0.0, 3.0, 10)
    with pytest.raises(ValueError):
        SweepRow(0.5, 0.8, -0.1, 3.0, 10)
    with pytest.raises(ValueError):
        SweepRow(0.5, 0.8, 0.0, 3.0, 0)


def test_default_ratios_shape():
    assert DEFAULT_RATIOS == (0.005, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5)


def test_sweep_input_validation(cohort):
    bundles, rows = cohort
    cfg = small_config()
    with pytest.raises(ValueError, match="ratios"):
        ratio_sweep(cfg, bundles, rows, ratios=(), iterations=2)
    with pytest.raises(ValueError, match="ratios"):
        ratio_sweep(cfg, bundles, rows, ratios=(0.0, 0.5), iterations=2)
    with pytest.raises(ValueError, match="iterations"):
        ratio_sweep(cfg, bundles, rows, ratios=(0.5,), iterations=0)


def test_sweep_requires_cohort_coverage(cohort):
    bundles, rows = cohort
    with pytest.raises(DataError, match="lacks patient 'g3'"):
        ratio_sweep(small_config(), bundles, rows[:3], ratios=(0.5,), iterations=1)


def test_full_ratio_draws_everything_with_zero_sd(cohort):
    bundles, rows = cohort
    cfg = small_config()
    [row] = ratio_sweep(cfg, bundles, rows, ratios=(1.0,), iterations=5)
    assert row.ratio == 1.0
    assert row.c_index_sd == 0.0
    assert row.iterations == 5
    # perfectly separated densities: full draw recovers the planted order
    assert row.c_index_mean == 1.0
    n_eligible = [sum(c.eligible for c in enumerate_slide(cfg, b)) for b in bundles]
    assert row.avg_patch_count == sum(n_eligible) / len(n_eligible)


def test_avg_patch_count_follows_draw_law(cohort):
    bundles, rows = cohort
    cfg = small_config()
    n_eligible = [sum(c.eligible for c in enumerate_slide(cfg, b)) for b in bundles]
    out = ratio_sweep(cfg, bundles, rows, ratios=(0.01, 0.1, 0.37), iterations=2)
    for row in out:
        expect = [min(n, max(1, math.floor(row.ratio * n + 1e-9))) for n in n_eligible]
        assert row.avg_patch_count == sum(expect) / len(expect)


def test_sweep_is_deterministic(cohort):
    bundles, rows = cohort
    cfg = small_config()
    a = ratio_sweep(cfg, bundles, rows, ratios=(0.05, 0.3), iterations=8)
    b = ratio_sweep(cfg, bundles, rows, ratios=(0.05, 0.3), iterations=8)
    assert a == b
    # base_seed defaults to the config seed
    c = ratio_sweep(cfg, bundles, rows, ratios=(0.05, 0.3), iterations=8,
                    base_seed=cfg.seed)
    assert a == c


def test_slide_order_does_not_change_sweep(cohort):
    bundles, rows = cohort
    cfg = small_config()
    a = ratio_sweep(cfg, bundles, rows, ratios=(0.08,), iterations=6)
    b = ratio_sweep(cfg, list(reversed(bundles)), rows, ratios=(0.08,), iterations=6)
    assert a == b


def test_base_seed_changes_draws(tmp_path):
    # densities one Poisson step apart so single-patch draws flip ranks
    densities = {"n0": 1500.0, "n1": 1600.0, "n2": 1700.0, "n3": 1800.0}
    bundles = [graded_slide(tmp_path, sid, d, seed=40 + i)
               for i, (sid, d) in enumerate(sorted(densities.items()))]
    rows = [(sid, 10.0 * (i + 1), True, 0.0)
            for i, sid in enumerate(sorted(densities))]
    cfg = small_config()
    [a] = ratio_sweep(cfg, bundles, rows, ratios=(0.04,), iterations=20, base_seed=0)
    [b] = ratio_sweep(cfg, bundles, rows, ratios=(0.04,), iterations=20, base_seed=1)
    # one patch per slide: sampling noise is visible in the spread
    assert a.c_index_sd > 0.0
    assert (a.c_index_mean, a.c_index_sd) != (b.c_index_mean, b.c_index_sd)


def test_zero_eligible_slide_warned_and_excluded(cohort, tmp_path):
    bundles, rows = cohort
    # tissue blob smaller than half a patch: every grid cell fails coverage
    spec = SyntheticSpec(slide_id="tiny", width=768, height=768, mpp=4.0,
                         regions=(RegionSpec(96, 96, 64, 64, "stroma", 1000.0),))
    tiny = open_bundle(generate_synthetic_slide(spec, seed=50, out_dir=tmp_path))
    cfg = small_config()
    all_rows = rows + [("tiny", 5.0, True, 0.0)]
    with pytest.warns(UserWarning, match="tiny: zero eligible"):
        out = ratio_sweep(cfg, bundles + [tiny], all_rows, ratios=(1.0,),
                          iterations=2)
    n_eligible = [sum(c.eligible for c in enumerate_slide(cfg, b)) for b in bundles]
    assert out[0].avg_patch_count == sum(n_eligible) / len(n_eligible)
    assert out[0].c_index_mean == 1.0


def test_all_slides_excluded_is_an_error(tmp_path):
    spec = SyntheticSpec(slide_id="tiny", width=768, height=768, mpp=4.0,
                         regions=(RegionSpec(96, 96, 64, 64, "stroma", 1000.0),))
    tiny = open_bundle(generate_synthetic_slide(spec, seed=51, out_dir=tmp_path))
    with pytest.warns(UserWarning, match="zero eligible"):
        with pytest.raises(DataError, match="nothing to sweep"):
            ratio_sweep(small_config(), [tiny], [("tiny", 5.0, True, 0.0)],
                        ratios=(0.5,), iterations=1)


def test_progress_callback_called_per_ratio(cohort):
    bundles, rows = cohort
    lines = []
    ratio_sweep(small_config(), bundles, rows, ratios=(0.1, 0.5), iterations=2,
                progress=lines.append)
    assert len(lines) == 2
    assert "ratio 0.1" in lines[0]
    assert "ratio 0.5" in lines[1]


def test_patients_mapping_groups_slides(cohort, tmp_path):
    bundles, _ = cohort
    # two slides per patient; two patients, density-ordered survival
    patients = {"g0": "pa", "g1": "pa", "g2": "pb", "g3": "pb"}
    rows = [("pa", 10.0, True, 0.0), ("pb", 30.0, True, 0.0)]
    [row] = ratio_sweep(small_config(), bundles, rows, ratios=(1.0,),
                        iterations=1, patients=patients)
    assert row.c_index_mean == 1.0


def test_write_sweep_csv(tmp_path):
    rows = [SweepRow(0.005, 0.8123456789, 0.0123456789, 12.25, 50),
            SweepRow(0.5, 0.9, 0.0, 612.0, 50)]
    path = write_sweep_csv(rows, tmp_path / "sweep.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS)
    assert lines[1] == "0.005,0.812346,0.0123457,12.25"
    assert lines[2] == "0.5,0.9,0,612"
