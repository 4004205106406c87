"""Taxonomy-aware hierarchical product categorization engine."""

from .taxonomy import (
    CategoryPath,
    ChildMask,
    STOP,
    Taxonomy,
    build,
    load_taxonomy,
    parse_path,
    save_taxonomy,
)
from .datastore import (
    EmbeddingBundle,
    PcaModel,
    SplitAssignment,
    gen_synthetic,
    l2_normalize,
    load_bundle,
    pca_fit,
    pca_transform,
    save_bundle,
    stratified_split,
)
from .fusion import FusionConfig, Fusion, unimodal_config
from .hiermodel import (
    HierModel,
    PathPrediction,
    TrainConfig,
    apply_dynamic_mask,
    build_model,
    evaluate,
    train,
)
from .metrics import (
    MetricsReport,
    flat_metrics,
    hierarchical_metrics,
    purity,
)
from .recategorize import (
    ClusterTree,
    DepthSpec,
    RecatConfig,
    ReducerConfig,
    agglomerative,
    cascade_cluster,
    export_clusters,
    filter_records,
    import_labels,
    kmeans,
    recategorize_run,
)
from .cascade import (
    CascadeConfig,
    CascadeReport,
    route,
    run_cascade,
    sweep_threshold,
)

__version__ = "0.1.0"
