"""
midway - hierarchical latent dynamics pretraining on video frame pairs

A ViT encoder learns from pairs of frames by inferring motion latents
between them at every level of a feature hierarchy, refining the source
features top-down, and predicting the target frame's features with a gated
forward model. A self-distillation head adds view invariance.

Usage
-----
**Command line** (after ``pip install midway``):

    midway gen-data --out data/sprites --videos 32 --workers 4
    midway train --data data/sprites --preset toy --out runs/toy
    midway analyze --checkpoint runs/toy/final.ckpt --frames a.png b.png --location 3,4
    midway probe --checkpoint runs/toy/final.ckpt --data data/sprites
    python -m midway ablate --data data/sprites --out runs/ablation

**Python library**:

    from midway import MidwayNetwork, get_preset, encode, perturb_forward
    cfg = get_preset("toy")
    model = MidwayNetwork(cfg)
    pyramid = encode(images, model.student.encoder)
    heatmap = perturb_forward(model, x_src, x_tgt, (3, 4), cfg.analysis)
"""

from importlib.metadata import PackageNotFoundError, version as _pkg_version

try:
    __version__ = _pkg_version("midway")
except PackageNotFoundError:
    __version__ = "0.0.0+local"

from .analysis import PerturbationHeatmap, Track, perturb_forward, render_heatmap, track
from .config import RunConfig, get_preset, load_config, parse_config, serialize_config
from .dataset import open_videos, write_dataset
from .dynamics import Dynamics, HierarchyOutput, plan_levels
from .encoder import Encoder, FeaturePyramid, ParameterSets, ema_update, encode, init_teacher
from .errors import ErrorInfo, MidwayError, classify_exception
from .model import MidwayNetwork
from .objective import compute_objective, dense_forward_loss
from .probe import ProbeReport, run_probe
from .sampling import PairDataset, crop_pair, sample_frame_pair
from .session import train_run
from .sprites import random_world, synth_step
from .train import build_state, train_step

__all__ = [
    "RunConfig",
    "get_preset",
    "load_config",
    "parse_config",
    "serialize_config",
    "Encoder",
    "FeaturePyramid",
    "ParameterSets",
    "encode",
    "ema_update",
    "init_teacher",
    "Dynamics",
    "HierarchyOutput",
    "plan_levels",
    "MidwayNetwork",
    "compute_objective",
    "dense_forward_loss",
    "build_state",
    "train_step",
    "train_run",
    "random_world",
    "synth_step",
    "write_dataset",
    "open_videos",
    "PairDataset",
    "crop_pair",
    "sample_frame_pair",
    "PerturbationHeatmap",
    "Track",
    "perturb_forward",
    "render_heatmap",
    "track",
    "ProbeReport",
    "run_probe",
    "ErrorInfo",
    "MidwayError",
    "classify_exception",
    "__version__",
]
