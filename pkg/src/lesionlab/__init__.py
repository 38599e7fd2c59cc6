"""Label transforms, ensembling, postprocessing and evaluation for small-lesion segmentation."""

__version__ = "0.1.0"

from .volume import (
    VoxelGrid,
    LesionComponent,
    connected_components,
    component_volumes,
    distance_to_background,
    label_components,
)
from .labeling import (
    msl_encode,
    dbl_encode,
    foreground_probability,
    binarize,
    category_to_binary,
)
from .ensemble import EnsembleConfig, PostprocessConfig, ensemble, postprocess, sweep
from .metrics import (
    LesionMetrics,
    Matching,
    dice,
    lesionwise_counts,
    evaluate_case,
    evaluate_set,
    category_stats,
)
from .dataprep import CaseRecord, size_balanced_split, sample_patch_pair
from .synth import SynthSpec, synth_generate
from .nifti import read_volume, write_volume
