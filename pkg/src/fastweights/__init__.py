"""Recurrent fast-weight replacements for causal self-attention."""

from .errors import (ConfigError, DimensionError, DivergedState, DivergenceError, NearZeroSum,
                     NormalizerUnderflow)
from .feature_maps import FeatureMapKind, FeatureMapParams, apply_feature_map, sum_normalize
from .grads import GradientBundle, backward_scan, finite_difference_check, gradcheck_rule
from .model import ByteLM, ModelConfig, build_model, convert_mixer, forward_lm, generate
from .rules import (FastWeightState, RuleConfig, RuleKind, RuleParams, SequenceCache,
                    compute_gate_matrix, gate_override_hook, init_state, scan, step)

__all__ = [
    "ByteLM", "ConfigError", "DimensionError", "DivergedState", "DivergenceError", "FastWeightState",
    "FeatureMapKind", "FeatureMapParams", "GradientBundle", "ModelConfig", "NearZeroSum", "NormalizerUnderflow",
    "RuleConfig", "RuleKind", "RuleParams", "SequenceCache", "apply_feature_map", "backward_scan", "build_model",
    "compute_gate_matrix", "convert_mixer", "finite_difference_check", "forward_lm", "gate_override_hook",
    "generate", "gradcheck_rule", "init_state", "scan", "step", "sum_normalize",
]

__version__ = "0.1.0"
