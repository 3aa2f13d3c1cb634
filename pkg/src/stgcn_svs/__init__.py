"""Spatial-temporal graph convolutional network for short-term voltage
stability assessment: spectral graph filters, a small reverse-mode autodiff
substrate, the block architecture, training, synthetic data generation and a
scikit-learn style classifier wrapper."""


def _tune_allocator():
    # training keeps every activation of a step alive, so each op allocates
    # fresh multi-MB buffers; without raising these thresholds glibc serves
    # them as fresh mmaps and page faults dominate the step time
    import ctypes

    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 28)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 28)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()

from .errors import (  # noqa: E402
    AsymmetricTopology,
    DimensionMismatch,
    DuplicateEdge,
    Infeasible,
    IsolatedNode,
    NonFiniteValue,
    ShapeMismatch,
    SingleClassDataset,
    StgcnError,
    TopologyMismatch,
)
from .graph import (  # noqa: E402
    ChebFilterBank,
    ScaledLaplacian,
    Topology,
    build_cheb_bank,
    build_laplacian,
    khop_pattern,
    load_topology,
    make_grid,
    make_random_connected,
    make_random_tree,
    make_ring,
    save_topology,
)
from .model import (  # noqa: E402
    AssessmentResult,
    ModelConfig,
    ModelParams,
    NormStats,
    SvsSample,
    forward,
    influence_weights,
)
from .datagen import (  # noqa: E402
    LabeledDataset,
    ScenarioConfig,
    add_noise,
    generate,
    label_rule,
    load_dataset,
    merge_datasets,
    perturb_topology,
    save_dataset,
)
from .trainer import (  # noqa: E402
    Metrics,
    TrainConfig,
    TrainResult,
    evaluate,
    kfold,
    train,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint  # noqa: E402
from .estimator import STGCNClassifier  # noqa: E402

__version__ = "0.1.0"
