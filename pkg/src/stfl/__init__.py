"""Vertical federated learning where guests share frozen VAE latents.

Modules:

* ``nn``        dense networks, losses, Adam
* ``vae``       guest variational autoencoder
* ``paillier``  additively homomorphic encryption with fixed-point encoding
* ``psi``       Diffie-Hellman private set intersection
* ``messages`` / ``transport``  binary framing, in-process and TCP channels
* ``stfl``      the self-taught protocol (host and guest parties)
* ``baseline``  the Paillier-masked comparator protocol
* ``data``      loading, vertical split, partition, standardization
* ``runner``    experiments and report tables
"""

from .baseline import BaselineGuest, BaselineHost, PlaintextReference, baseline_train, build_federation
from .data import (
    FeatureNoveltyError,
    IdOverlapError,
    PartitionSpec,
    PartyDataset,
    SetupError,
    VerticalSplitSpec,
    load_cancer,
    load_csv,
    partition,
    standardize,
    vertical_split,
)
from .nn import MlpModel, TrainConfig, build_mlp
from .paillier import RandomSource, keygen
from .psi import psi_intersect
from .runner import ExperimentConfig, RunReport, compute_metrics, report, run_experiment
from .stfl import GuestParty, HostParty, guest_selftrain, joint_train, predict, stfl_setup
from .vae import VaeModel, VaeSizing, initial_vae, load_vae, save_vae, train_vae

__version__ = "0.1.0"
