"""Flow-based dense instance segmentation: targets, decoding, metrics, synthetic scenes."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    IouMatrix, RleMask, decode_rle, encode_rle, instance_areas, label_connected_components,
    load_labels, pairwise_iou, relabel_sequential, save_labels,
)
from .flows import (  # noqa: E402
    DecodeParams, FlowField, cluster_sinks, compute_flow_targets, follow_flows, instance_center,
    perturb_field, read_uemf, write_uemf,
)
from .metrics import (  # noqa: E402
    MatchTable, MetricsReport, ap_at_threshold, evaluate_dataset, match_at_threshold,
    pq_at_threshold, split_sparse_dense,
)
from .predictor import FieldSource, resolve_fields, save_fields  # noqa: E402
from .synth import SceneSpec, SceneStats, SizeLaw, generate_scene, sample_scene_suite, scene_statistics  # noqa: E402
