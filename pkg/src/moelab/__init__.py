"""Desk-scale laboratory for dynamic mixture-of-experts language models.

The workflow: generate a two-regime synthetic corpus, pretrain a small
static MoE transformer, inject parameterless zero candidates into its
routing pools, and distill the augmented student back onto the frozen
teacher (supervised stage, then on-policy stage). Analytic FLOPs
accounting and token-level routing records quantify what the learned
token-dependent compute allocation buys.
"""

from .balancing import AuxConfig, aux_loss, group_aux_loss, target_rze
from .checkpoint import load_model, save_model
from .corpus import Corpus, CorpusSpec, generate_corpus
from .errors import (
    ConfigError,
    InputError,
    MissingArtifactError,
    MoelabError,
    NumericalError,
    StateError,
)
from .flops import FlopsConfig, flops_stage, speedup, speedup_table
from .injection import InjectionSpec, diagnose_mismatch, inject
from .model import ModelConfig, MoEModel
from .runconfig import RunConfig, derive_seed, load_run_config
from .sampling import sample_rollouts, score_rollouts, score_tokens
from .training import (
    AdaptConfig,
    OpdConfig,
    SftConfig,
    TeacherConfig,
    adapt,
    evaluate,
    train_teacher,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig",
    "AuxConfig",
    "ConfigError",
    "Corpus",
    "CorpusSpec",
    "FlopsConfig",
    "InjectionSpec",
    "InputError",
    "MissingArtifactError",
    "ModelConfig",
    "MoEModel",
    "MoelabError",
    "NumericalError",
    "OpdConfig",
    "RunConfig",
    "SftConfig",
    "StateError",
    "TeacherConfig",
    "adapt",
    "aux_loss",
    "derive_seed",
    "diagnose_mismatch",
    "evaluate",
    "flops_stage",
    "generate_corpus",
    "group_aux_loss",
    "inject",
    "load_model",
    "load_run_config",
    "sample_rollouts",
    "save_model",
    "score_rollouts",
    "score_tokens",
    "speedup",
    "speedup_table",
    "target_rze",
    "train_teacher",
]
