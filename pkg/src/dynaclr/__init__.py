"""Time-aware contrastive representation learning for tracked cell imagery.

Pipeline: generate or open a tracked time-lapse dataset, train a 3D-stem
convolutional encoder with triplet sampling strategies, embed every
tracked cell patch, then analyze the embedding space (temporal
smoothness, PCA, rank, linear probing, attribution) and explore it
through an HTTP service.
"""

__version__ = "0.1.0"

from .errors import (
    CapabilityError,
    ConfigurationError,
    DegenerateStatisticsError,
    DynaclrError,
    EmptyAnchorSetError,
    IntegrityError,
    LeakageError,
    MetaError,
    RangeError,
    SamplingError,
    ValidationError,
)
from .store import (
    AnnotationRecord,
    DatasetHandle,
    DatasetMeta,
    TrackNode,
    TrackTable,
    division_events,
    filter_fovs,
    load_tracks,
    open_dataset,
)
from .synth import SynthConfig, generate_dataset
from .patches import (
    AugmentationConfig,
    Patch,
    PatchPipeline,
    PatchSpec,
    augment_patch,
    extract_patch,
    normalize_channel,
)
from .sampling import (
    SamplerConfig,
    TripletBatch,
    TripletIndex,
    TripletSampler,
    build_triplet_batch,
    enumerate_anchors,
    sample_triplet,
)
from .model import (
    Checkpoint,
    EmbeddingTable,
    Encoder,
    ModelConfig,
    TrainConfig,
    embed_dataset,
    train_model,
    triplet_loss,
)
from .analytics import (
    ProjectionResult,
    SmoothnessCurve,
    compute_image_features,
    correlate_features_with_pcs,
    displacement_at_lag,
    distance_from_start,
    embedding_rank,
    infection_fraction_timeseries,
    pca_project,
)
from .probe import (
    PredictedLabel,
    ProbeModel,
    evaluate_probe,
    predict_states,
    split_annotations,
    train_probe,
)
from .attribution import (
    AttributionMap,
    ProbeScore,
    clip_for_display,
    integrated_gradients_map,
    occlusion_map,
)
