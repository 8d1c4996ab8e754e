"""Stable vector fields on Lie groups and the 2-sphere.

A bounded-flow diffeomorphism of the first cover warps a contracting latent
field back onto the manifold, so every model in the class is globally stable
(up to the measure-zero cut locus) by construction.
"""

from .lie_core import S2, SE2, SE3, SO2, SO3, manifold
from .bounded_flow import FlowModel, flow_forward, flow_inverse, flow_jacobian
from .msvf import MsvfModel, eval_field, latent_dynamics, phi, potential, set_target
from .trainer import TrainConfig, TrainReport, bc_loss, bc_train
from .data_io import TrajectoryDataset, Trajectory, estimate_velocities, lasa_to_s2, synth_demos
from .rollout_eval import RolloutConfig, EvalReport, integrate, instability_pct, area_metric, velocity_mse

__version__ = "0.1.0"
