"""Image restoration and manipulation with a fine-tuned GAN prior (toy scale)."""
from .errors import (CheckpointError, ConfigurationError, DGPError, DivergenceError, DomainError,
                     IntegrityError, StateError)
from .gan_core import ArchConfig, Discriminator, Generator, build_pair, discriminator_features, generate
from .checkpoint import load_checkpoint, save_checkpoint
from .degradations import Compose, Downsample, Gray, Identity, Mask, PerturbObserved
from .engine import (LossWeights, ReconstructionResult, ReconstructionSchedule, Stage, feature_matching_loss,
                     init_latent, run_dgp, swap_bn_to_in, total_loss)
from .presets import load_preset, preset_names
from .tasks import colorize, defend, hybrid, inpaint, super_resolve
from .manipulation import jitter, morph, transfer_category

__version__ = "0.1.0"
