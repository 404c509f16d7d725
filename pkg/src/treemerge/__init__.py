"""Phylogenetic forest reconstruction from binary characters.

Builds an edge-disjoint forest (or the full tree when the data allow) over
a set of taxa by merging components along their shortest reliably
estimated connecting paths, learning ancestral sequences by recursive
weighted majority as components grow.
"""

from .ancestral import (
    BetaCalibration,
    Decomposition,
    a_of_q,
    calibrate_beta,
    decompose,
    learn_root,
    maj,
    majhat_exact,
    majority_gain,
)
from .distances import (
    SATURATED,
    CalibrationInfeasibleError,
    ReconstructionParams,
    calibrate,
    empirical_distance,
    failure_bound,
    fpm,
    is_saturated,
    me,
    operating_params,
)
from .merge import ExactBackend, MergeResult, SequenceBackend, tree_merge
from .scoring import ScoreReport, score_forest
from .simulate import (
    CFNModel,
    CharacterMatrix,
    GroupModel,
    PercolationConfig,
    exact_leaf_distribution,
    exact_learned_root_distance,
    exact_pair_distance,
    exact_percolation_leaf_distribution,
    kimura_model,
    project_group,
    random_binary_tree,
    sample_cfn,
    sample_group,
    sample_percolation,
)
from .trees import (
    LAMBDA0,
    NewickError,
    Quartet,
    Tree,
    four_point_check,
    forest_to_newick,
    length_from_prob,
    parse_forest,
    parse_newick,
    prob_from_length,
    to_newick,
)

__version__ = "0.1.0"
