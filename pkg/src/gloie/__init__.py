"""Temporal set prediction with a Tweedie VAE fused with local item embeddings."""

from .dataset import Instance, SplitSpec, UserSequence, Vocab, load_dataset, make_instance, split_users
from .errors import ConfigError, ConvergenceError, DataError, DivergenceError, GloieError
from .featurize import decayed_sum, normalize_recon
from .fusion import FusionParams, GloieModel, rank_items, train_fusion
from .local import LocalEmbeddingTable, LocalEncoder, load_external_embeddings
from .pipeline import RunConfig, eval_run, train_run
from .vae import VaeModel, reconstruct, train_vae

__version__ = "0.1.0"
