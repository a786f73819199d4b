"""Two-stage Q-learning with action pruning learned from auxiliary reward channels.

Stage one fits a vector-valued Q-function over all reward channels and prunes
each state's action set to actions favoured under sampled reward weightings;
stage two runs (conservative) double Q-learning on the sparse main reward with
the bootstrap restricted to the pruned sets.
"""
from .multiobjective import PruneTable, VectorQNetwork, VectorQTrainer, build_prune_table, prune
from .nn import Adam, DenseNetwork, NumericalError, ShapeError
from .policies import WeightPrior, posterior_sample_weights, softmax_probs, soften
from .pruned import PrunedTrainer, greedy_action, pruned_cql_update, pruned_target, pruned_update
from .qlearning import BCQTrainer, QTrainer, ReplayBuffer, TrainerConfig

__version__ = "0.1.0"
