"""Cost-constrained architecture search with stochastic super networks."""

from .compute import ParameterStore, predict, ssn_forward
from .costs import DistributedCost, FlopsCost, ParamsCost, StochasticCost, flops_cost, params_cost
from .errors import BudgetNASError, GraphError, InvalidConfig, NotConnected, TooLarge
from .fabrics import cnf, resnet_fabric, resnet_mask
from .graph import LayerSpec, Mask, ModuleSpec, SuperNetGraph, build_graph, load_graph, save_graph
from .sampler import ArchitectureDistribution, entropy, log_prob_of, sample_mask, sample_masks
from .selection import EvaluatedModel, evaluate_model, pareto_front
from .trainer import BudgetConfig, TrainConfig, objective_D, run_training, train_step

__version__ = "0.1.0"
