"""OOD detection with LLM-generated peer classes, a contrastive projection
head over frozen encoders, and k-th nearest-neighbor scoring."""

from .bench import (
    BenchmarkSplit,
    ClassCatalog,
    EvalResult,
    PipelineSettings,
    SyntheticSpec,
    auroc,
    builtin_catalog,
    export_projection,
    make_split,
    openness,
    openness_literal,
    run_benchmark,
)
from .encoders import (
    EmbeddingMatrix,
    ToyEncoderConfig,
    import_embeddings,
    toy_encode_images,
    toy_encode_texts,
)
from .errors import (
    ConfigError,
    CorruptFileError,
    DegenerateBatchError,
    FormatError,
    GenerationError,
    InvalidArgumentError,
    OdpcError,
    OfflineError,
    ShapeError,
)
from .head import ForwardActivations, MlpHead, forward, init_head, load_checkpoint, save_checkpoint
from .knn_detector import (
    Decision,
    FeatureBank,
    KnnConfig,
    build_bank,
    calibrate_threshold,
    detect,
    knn_score,
    knn_scores,
)
from .losses import (
    LossConfig,
    NegativeSet,
    TrainingBatch,
    build_negative_set,
    ce_loss,
    grad_total_loss,
    mixup,
    pcc_loss,
    total_loss,
)
from .peer_gen import (
    HttpLlmProvider,
    LlmCache,
    PeerClassSet,
    PeerGenConfig,
    StubProvider,
    build_prompt,
    generate_peer_classes,
    render_description,
)
from .trainer import TrainingConfig, TrainingState, lr_at, sgd_step, train

__version__ = "0.1.0"
