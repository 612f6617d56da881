"""Two-stage disentangled latent optimisation for grouped deforming 3D shapes."""
from .amortized import Stage2Config, loss_L2, train_stage2
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import EvalConfig, RunConfig
from .estimator import DiLO
from .evalkit import DScoreReport, LinearProbe, TransferPair, d_score, eval_transfer, transfer
from .explain import SurrogateExplainer, fit_surrogate, kmeans
from .geometry import Mesh, PointCloud, chamfer, load_obj, pmd, recon_loss, save_obj
from .latentopt import LatentTable, Stage1Config, loss_L1, train_stage1
from .nets import DiLONetwork, NetConfig
from .synthdata import generate_dataset, load_external, make_dataset

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "DScoreReport", "DiLO", "DiLONetwork", "EvalConfig", "LatentTable", "LinearProbe", "Mesh",
    "NetConfig", "PointCloud", "RunConfig", "Stage1Config", "Stage2Config", "SurrogateExplainer",
    "TransferPair", "chamfer", "d_score", "eval_transfer", "fit_surrogate", "generate_dataset", "kmeans",
    "load_checkpoint", "load_external", "load_obj", "loss_L1", "loss_L2", "make_dataset", "pmd",
    "recon_loss", "save_checkpoint", "save_obj", "train_stage1", "train_stage2", "transfer",
]
