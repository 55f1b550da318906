"""parcelbench: volumetric thalamus-parcellation toolkit.

Three segmentation paths (multi-atlas label fusion, spatial-spectral
k-means on spherical-harmonic diffusion features, instantaneous-
connectivity ICA) plus the comparison machinery to score them against each
other and against phantom ground truth.
"""

__version__ = "0.1.0"
FORMAT_VERSION = "1"  # NIfTI-1 single-file, gradient-table v1, study-config v1

from .volume import (  # noqa: E402,F401
    Geometry,
    GridMismatchError,
    LabelVolume,
    Mask,
    NiftiError,
    THALAMIC_NUCLEI,
    Volume,
    geometry_of,
    read_nifti,
    resample_nearest,
    trilinear_resample,
    voxel_to_world,
    world_to_voxel,
    write_nifti,
)
from .fod import (  # noqa: F401
    GradientTable,
    ShBasis,
    ShField,
    fit_field,
    fit_sh,
    funk_radon,
    load_gradient_table,
    save_gradient_table,
    sh_design_matrix,
    upsample_field,
)
from .fusion import AtlasPrior, FusionConfig, MultiAtlasLabelFusion, fuse, patch_mse  # noqa: F401
from .cluster import (  # noqa: F401
    FeatureSet,
    KMeansConfig,
    SpatialSpectralKMeans,
    build_features,
    kmeans_once,
    seed_by_restarts,
    segment_dti,
)
from .icp import (  # noqa: F401
    FixedPointIca,
    GroupIcaResult,
    PreprocConfig,
    TimeSeriesStack,
    dual_regression,
    group_ica,
    hard_parcellate,
    preprocess,
    unfold,
)
from .metrics import (  # noqa: F401
    MetricsTable,
    PairScore,
    ProbabilityAtlas,
    centroid_scatter,
    centroids,
    dice,
    emit_table,
    match_labels,
    matched_mean_dice,
    probability_atlas,
    regroup,
    vsi,
)
from .phantom import PhantomSpec, PhantomSubject, make_bold, make_dwi, make_priors, make_subject, make_truth  # noqa: F401
from .pipeline import StudyConfig, StudyResult, run_study, study_config_from_json  # noqa: F401
