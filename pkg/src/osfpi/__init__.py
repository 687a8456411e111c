"""Coarse-to-fine cross-view localization of UAV views in satellite tiles."""

from .backbone import (
    EncoderBlock,
    MixedAttention,
    OneStreamBackbone,
    PatchEmbed,
    PositionEncodingGenerator,
    SpatialReduction,
    StageOutputs,
    TokenSequence,
)
from .config import (
    BackboneConfig,
    DataConfig,
    FusionConfig,
    NavConfig,
    PathsConfig,
    RunConfig,
    TestProtocol,
    TrainConfig,
    load_run_config,
    run_config_from_dict,
)
from .datasynth import (
    GeoSample,
    LoadedDataset,
    TileGeoref,
    WorldMap,
    build_test_set,
    build_train_set,
    crop_tile,
    crop_tile_centered,
    generate_world,
    images_to_tensor,
    load_split,
    sample_pair,
    write_split,
)
from .errors import (
    DimensionMismatch,
    IdMismatch,
    InvalidArgument,
    OutOfBounds,
    SplitPointError,
    TrainingDiverged,
)
from .fusion import (
    AtrousContext,
    FeaturePyramid,
    GeoLocalizer,
    GroupCorrelation,
    PredictionHead,
    PredictionOutput,
    build_prediction,
    heatmap_argmax,
)
from .losses import (
    LossBreakdown,
    SampleLabel,
    batch_loss,
    classification_loss,
    classification_weight_map,
    hanning_window_1d,
    offset_loss,
    select_positive_samples,
    smooth_l1,
    total_loss,
    weighted_classification_loss,
)
from .metrics import (
    EvalRecord,
    LabelRow,
    MetricsReport,
    evaluate_dataset,
    evaluate_records,
    ma_curve,
    pixel_to_meters,
    rds,
)
from .navsim import (
    BiasedLocalizer,
    ModelLocalizer,
    NavState,
    OracleLocalizer,
    Trajectory,
    circular_trajectory,
    navigate,
    render_report,
)
from .trainer import (
    OverfitReport,
    TrainResult,
    build_model,
    build_optimizer,
    cosine_lr,
    overfit_smoke,
    parameter_groups,
    predict_dataset,
    train,
)

__version__ = "0.1.0"
