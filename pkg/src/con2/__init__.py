"""Self-supervised anomaly detection with context contrasting and content alignment."""

from .dataprep import (
    ContextDataset,
    ContextViewBatch,
    DatasetSplit,
    FolderLayout,
    SyntheticConfig,
    build_context_dataset,
    load_image_folder,
    make_synthetic_split,
    make_view_batch,
)
from .evaluation import EvalReport, auroc, bench_scores, pca_alignment_export, silhouette
from .imageops import (
    ContentAugmentationPolicy,
    ContentTransform,
    check_alignment,
    check_distinctiveness,
    equalize,
    invert,
    sample_content_transform,
    snap_to_grid,
    vflip,
)
from .objective import (
    ProjectionSet,
    con2_loss,
    content_alignment_loss,
    context_contrast_loss,
    instance_discrimination,
    multi_context_contrast_loss,
    simclr_loss,
    supcon_loss,
)
from .scoring import (
    GaussianScoreModel,
    NNDScoreModel,
    TestTimePolicy,
    final_score,
    final_scores,
    fit_gaussian,
    fit_nnd,
    s_lh,
    s_nnd,
    threshold_predict,
)
from .trainer import Checkpoint, ModelConfig, TrainConfig, anneal_alpha, train

__version__ = "0.1.0"
