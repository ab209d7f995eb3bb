"""Cross-industry heterogeneous temporal graph anti-money-laundering detection."""

from .baselines import RuleSet, default_ruleset, gcn_train_and_score, rulematch_score
from .data import SyntheticSpec, generate_synthetic, load_elliptic
from .errors import GCRMFError
from .estimator import GCRMFDetector, RuleMatchDetector, SemiGCNClassifier, gat_amlp
from .experiment import RunConfig, run_experiment, run_sweep
from .graph import IndustryCategory, Label, RelationType, TemporalHeteroGraph
from .metapath import MetaPath, default_metapaths
from .metrics import compute_f1, precision_at_k

__version__ = "0.1.0"

__all__ = [
    "GCRMFDetector", "SemiGCNClassifier", "RuleMatchDetector", "gat_amlp",
    "TemporalHeteroGraph", "IndustryCategory", "RelationType", "Label", "MetaPath", "default_metapaths",
    "SyntheticSpec", "generate_synthetic", "load_elliptic", "RuleSet", "default_ruleset", "rulematch_score",
    "gcn_train_and_score", "RunConfig", "run_experiment", "run_sweep", "compute_f1", "precision_at_k",
    "GCRMFError",
]
