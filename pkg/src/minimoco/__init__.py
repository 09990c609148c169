"""minimoco: desk-scale momentum-contrast pretraining with local patch
contrast, iterative feature whitening, and dimensional-collapse diagnostics."""

from .grid import (
    Grid,
    Tape,
    GradientMap,
    GridError,
    ShapeError,
    NonFiniteError,
    DisconnectedOutputError,
    reverse_accumulate,
    finite_difference_check,
)
from . import ops
from .nets import EncoderConfig, EncoderOutput
from .whitening import WhiteningState, batch_standardize, zca_exact, zca_newton
from .losses import (
    SimilarityScores,
    PatchGrid,
    cosine_similarity,
    info_nce,
    global_loss,
    local_loss,
    total_loss,
    sample_patch_grid,
)
from .engine import (
    TrainConfig,
    MocoState,
    train_step,
    pretrain,
    save_checkpoint,
    load_checkpoint,
    whitening_to_bn_convert,
)
from .phantoms import PhantomConfig, PhantomSample, generate_phantom
from .diagnostics import (
    SpectrumReport,
    representation_covariance,
    singular_spectrum,
    effective_rank,
    collapse_index,
    make_spectrum_report,
)
from .downstream import EvalConfig, DiceResult, dice_score, train_eval_segmentation
from .estimators import ZCAWhitening, ContrastivePretrainer, LinearSegmenter

__version__ = "0.1.0"
