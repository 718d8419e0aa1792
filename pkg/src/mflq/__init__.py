"""Mean-field LQ Stackelberg games: solve, simulate, verify.

Pipeline: define a problem (:mod:`mflq.problem`), solve the follower's
Riccati pair (:mod:`mflq.follower`), build and solve the leader's augmented
problem (:mod:`mflq.leader`), Monte Carlo the equilibrium
(:mod:`mflq.simulate`) and run independent checks (:mod:`mflq.verify`).
"""

from .errors import (AsymmetricWeight, BadCovariance, BadGrid,
                     DimensionMismatch, InvertibilityError, MFLQError,
                     MissingField, NonFiniteState, OutOfRange, ParseError,
                     SolvabilityError)
from .follower import (FollowerAdjoint, FollowerSolution, follower_gain_at,
                       follower_value, solve_eta1, solve_follower_riccati)
from .grids import TimeGrid
from .leader import (AugmentedCoefficients, LeaderSolution, build_augmented,
                     compute_L, leader_value, solve_eta2, solve_leader,
                     solve_leader_riccati)
from .problem import (PlayerWeights, ProblemSpec, load_spec, make_problem,
                      refine_problem, save_spec, validate)
from .simulate import (ControlPerturbation, SimBatch, estimate_costs,
                       propagate_mean, simulate_follower_paths,
                       simulate_paths, simulate_with_control)
from .verify import (VerificationReport, convexity_sample, dp_oracle,
                     reduction_check, run_verification,
                     stationarity_residual_follower,
                     stationarity_residual_leader, value_match)

__version__ = "0.1.0"
