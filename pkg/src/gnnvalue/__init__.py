"""Label-free structure-aware Shapley valuation of test-time graph neighbors."""

from .errors import ConfigError, DataError, GnnValueError, NumericError
from .graph import Graph, SubgraphView, induced_view, k_hop_neighborhood, load_graph, write_graph
from .model import ModelParams, forward, label_propagation, train_mlp
from .perms import Permutation, enumerate_permutations, sample_permutations, validate
from .features import FEATURE_NAMES, FeatureConfig, FeatureExtractor, compute_train_stats
from .valuation import ValueReport, decompose_check, feature_shapley, scalar_shapley
from .fitters import UtilityWeights, fit_sgul_accuracy, fit_sgul_shapley, nn_lasso
from .harness import DropCurve, node_dropping
from .synth import SynthConfig, generate

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "GnnValueError", "NumericError",
    "Graph", "SubgraphView", "induced_view", "k_hop_neighborhood", "load_graph", "write_graph",
    "ModelParams", "forward", "label_propagation", "train_mlp",
    "Permutation", "enumerate_permutations", "sample_permutations", "validate",
    "FEATURE_NAMES", "FeatureConfig", "FeatureExtractor", "compute_train_stats",
    "ValueReport", "decompose_check", "feature_shapley", "scalar_shapley",
    "UtilityWeights", "fit_sgul_accuracy", "fit_sgul_shapley", "nn_lasso",
    "DropCurve", "node_dropping", "SynthConfig", "generate",
]
