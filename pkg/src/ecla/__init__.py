"""Continual concept learning with a consolidated latent Gaussian mixture and generative replay."""

from .gmm import GmmModel, fit_labeled, sample
from .model import ConceptModel, LossWeights, ModelConfig, loss_ecla, loss_task1
from .nn import SgdConfig
from .replay import PseudoDataset, generate
from .swd import make_projections, sliced_wd
from .tasks import TaskDataset, TaskSequence, few_shot_split, make_permuted_task, make_synthetic_sequence
from .trainer import AccuracyMatrix, Method, TrainConfig, forgetting_metrics, run_sequence

__version__ = "0.1.0"
