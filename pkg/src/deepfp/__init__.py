"""Deep fictitious play for N-player stochastic differential games."""
from .bsde import BsdeProblem, StageNets, TrainConfig, make_stage_nets, train
from .dfp import (FICTITIOUS_PLAY, POLICY_UPDATE, DfpConfig, DfpReport, NetSpec, StagePolicy,
                  clip_weights, eps_nash_gap, interpolate_policy, policy_distance, run_dfp,
                  run_stage, stage_driver)
from .game import GameSpec, best_response, hamiltonian, nash_fixed_point
from .sde import Partition, PathBatch
from .systemic_risk import InterBankParams, build_game, optimal_policy, riccati_solve

__version__ = "0.1.0"
