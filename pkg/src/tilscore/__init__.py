"""TIL-density scoring pipeline for whole-slide image bundles.

Batch workflow: tissue detection on a thumbnail, grid patch candidates,
hematoxylin-based cellularity filtering, a seeded subsample draw, pluggable
patch classification and cell quantification backends, per-patient TIL
density scores, survival statistics, a Monte-Carlo ratio sweep, and static
heatmap figures. The `tilscore` command exposes each stage; everything is
reproducible from one 64-bit seed.
"""

from ._version import __version__
from .config import PipelineConfig, load_config
from .errors import (BackendError, BackendUnavailableError, BoundsError,
                     BundleFormatError, BundleIntegrityError, ConfigError,
                     ConvergenceError, CsvParseError, DataError,
                     EmptyTissueError, NoQuantifiedPatchesError,
                     PartialFailureError, ProtocolError, UndefinedMetricError)
from .slide_io import SlideBundle, SlideMeta, make_thumbnail, open_bundle, write_bundle
from .synthetic import RegionSpec, SyntheticSpec, generate_synthetic_slide, load_truth
from .taxonomy import (CELL_CLASSES, PATCH_CLASSES, REGION_CLASSES,
                       RELEVANT_CLASSES, TIL_CLASS)

__all__ = [
    "__version__",
    "PipelineConfig",
    "load_config",
    "SlideBundle",
    "SlideMeta",
    "open_bundle",
    "write_bundle",
    "make_thumbnail",
    "RegionSpec",
    "SyntheticSpec",
    "generate_synthetic_slide",
    "load_truth",
    "REGION_CLASSES",
    "PATCH_CLASSES",
    "RELEVANT_CLASSES",
    "CELL_CLASSES",
    "TIL_CLASS",
    "ConfigError",
    "DataError",
    "BundleFormatError",
    "BundleIntegrityError",
    "BoundsError",
    "EmptyTissueError",
    "CsvParseError",
    "NoQuantifiedPatchesError",
    "BackendError",
    "BackendUnavailableError",
    "ProtocolError",
    "PartialFailureError",
    "UndefinedMetricError",
    "ConvergenceError",
]
