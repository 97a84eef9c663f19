"""Background-masked hierarchical vision transformer for tiled-slide grading.

The package builds everything from first principles on numpy float64:
a small reverse-mode autodiff engine (`tensor`), Adam and gradient
checking (`optim`), masked multi-head self-attention and transformer
blocks (`attention`), the two-stage slide model with training and
checkpoints (`model`), tissue-mask tiling and synthetic data
(`pipeline`), quadratic weighted kappa evaluation (`metrics`), and
attention-heatmap rendering (`heatmap`). `cli` wires them into the
`maskedvit` command.
"""

from .attention import (
    AllBackgroundError,
    LayerIndexError,
    MhsaParams,
    TransformerBlockParams,
    attention_weights,
    masked_mhsa,
    plain_mhsa,
    transformer_block,
)
from .heatmap import HeatmapRaster, read_image, region_heatmap, stitch_heatmaps, write_image
from .metrics import ConfusionMatrix, EvalResult, evaluate, quadratic_weighted_kappa
from .model import (
    HierarchicalViT,
    ModelCheckpoint,
    ModelConfig,
    SlideSample,
    TrainingDivergedError,
    decode_grade,
    mse_loss,
    train,
)
from .optim import Adam, AdamState, adam_step, grad_check
from .pipeline import (
    RegionSpec,
    SyntheticSlideSpec,
    TissueMaskRaster,
    extract_regions,
    patch_tissue_fractions,
    stratified_folds,
    synthesize_dataset,
)
from .tensor import (
    AllMaskedRowError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    gelu,
    layer_norm,
    masked_fill,
    matmul,
    softmax_lastdim,
    zero_grad,
)

__version__ = "0.1.0"
