"""Few-shot classification over precomputed image/text embeddings.

Class prototypes are formed per modality from learnable memory banks;
queries pass through an optional residual adapter and are scored by a
convex mixture of the two prototype softmax heads.
"""

from .autodiff import Tape, Tensor
from .errors import ProtofewError
from .evaluator import EvalReport, evaluate
from .hparam import GridResult, GridSpec, grid_search
from .losses import LossConfig
from .model import (
    AdapterParams,
    MemoryBank,
    MixtureHyperparams,
    ModelState,
    PrototypeSet,
    classify,
    classify_batch,
    init_model,
)
from .store import (
    ClassVocabulary,
    EpisodeSpec,
    LoadedDataset,
    QuerySet,
    SupportSet,
    TextPromptBank,
    l2_normalize_rows,
    load_dataset,
    read_container,
    sample_episode,
    write_container,
)
from .trainer import Checkpoint, TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "Checkpoint",
    "ClassVocabulary",
    "EpisodeSpec",
    "EvalReport",
    "GridResult",
    "GridSpec",
    "LoadedDataset",
    "LossConfig",
    "MemoryBank",
    "MixtureHyperparams",
    "ModelState",
    "ProtofewError",
    "PrototypeSet",
    "QuerySet",
    "SupportSet",
    "Tape",
    "Tensor",
    "TextPromptBank",
    "TrainConfig",
    "classify",
    "classify_batch",
    "evaluate",
    "grid_search",
    "init_model",
    "l2_normalize_rows",
    "load_checkpoint",
    "load_dataset",
    "read_container",
    "sample_episode",
    "save_checkpoint",
    "train",
    "write_container",
]
