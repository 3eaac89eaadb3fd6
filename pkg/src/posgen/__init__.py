"""posgen: optimal-noise retrieval and semantic-preserving prompt rewriting
for text-to-video diffusion, with a small numpy denoiser and a toy video task.
"""

from .config import ConfigError, GenerationConfig, MissingArtifactError, load_config
from .denoiser import Denoiser, DenoiserSpec, load_denoiser, train, train_denoiser
from .embedder import HashedNgramEmbedder, TableEmbedder, cosine, make_embedder
from .metrics import FeatureSet, frechet_distance, inception_score, plan_frames, prompt_similarity
from .npnet import NoisePredictionNet, build_dataset, load_npnet, train_npnet
from .ona import GuidedNoise, MixtureConfig, invert_latent, mix_noise, mixture_coefficients, synthesize
from .pipeline import Artifacts, evaluate, generate, load_artifacts, run_experiment, sweep
from .pool import Pool, PoolEntry
from .schedule import BetaSpec, DiffusionSchedule, dn_step, inv_step, make_schedule
from .spr import DhsConfig, HttpEngine, MockEngine, TransportError, render_instruction, rewrite, synthesize_dhs

__version__ = "0.1.0"

__all__ = [
    "Artifacts", "BetaSpec", "ConfigError", "Denoiser", "DenoiserSpec", "DhsConfig", "DiffusionSchedule",
    "FeatureSet", "GenerationConfig", "GuidedNoise", "HashedNgramEmbedder", "HttpEngine", "MissingArtifactError",
    "MixtureConfig", "MockEngine", "NoisePredictionNet", "Pool", "PoolEntry", "TableEmbedder", "TransportError",
    "build_dataset", "cosine", "dn_step", "evaluate", "frechet_distance", "generate", "inception_score",
    "inv_step", "invert_latent", "load_artifacts", "load_config", "load_denoiser", "load_npnet", "make_embedder",
    "make_schedule", "mix_noise", "mixture_coefficients", "plan_frames", "prompt_similarity", "render_instruction",
    "rewrite", "run_experiment", "sweep", "synthesize", "synthesize_dhs", "train", "train_denoiser", "train_npnet",
]
