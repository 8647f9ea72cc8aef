"""Hierarchical multi-domain semantic segmentation of urban point clouds, in numpy."""
from ._kernels import BACKEND
from .errors import (
    CitySegError,
    ConfigError,
    DataError,
    EmbeddingLookupError,
    EmptyInputError,
    FormatError,
    HierarchyError,
    NumericError,
    ParameterError,
    RangeError,
    SchemaError,
    ShapeError,
    TruncatedError,
)
from .hierarchy import LabelHierarchy, build_hierarchy, default_hierarchy, graph_encode
from .metrics import ConfusionMatrix, MetricsReport, confusion, metrics
from .network import EncoderConfig, forward
from .numcore import ParamStore, finite_diff_check
from .pcio import PointCloud, SceneSpec, generate_scene, load_cloud, save_cloud
from .sampling import LocalGlobalBatch, SamplerConfig, grid_sample, knn_region, make_batch, serialize_order
from .training import Model, TrainConfig, finetune_incremental, train_stage1, train_stage2, zero_shot_infer

__version__ = "0.1.0"
