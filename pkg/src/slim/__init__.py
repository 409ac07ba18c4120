"""Active object search with relation-coupled particle beliefs in a simulated apartment.

Modules: ``relations`` (relation factor graph), ``simworld`` (grid world and
detector), ``belief`` (multi-object particle filter), ``strategy`` (view
selection) and ``bench`` (trials and reporting).
"""

from .bench import METHODS, TrialConfig, TrialResult, run_benchmark, run_trial
from .belief import BeliefState, ParticleSet, PotentialParams
from .relations import (CommonsenseTable, RelationLabel, build_factor_graph, load_commonsense,
                        run_belief_propagation)
from .simworld import WorldError, WorldMap, load_world
from .strategy import GaussianMixture, UtilityParams, fit_gmm, select_next_view

__version__ = "0.1.0"
