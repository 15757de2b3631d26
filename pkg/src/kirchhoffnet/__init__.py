"""KirchhoffNet: neural networks built from analog circuits whose node voltages follow KCL."""
from .adjoint import backward, finite_diff_grad
from .datasets import (Dataset, density_target, gen2d, gen_friedman, load_csv, load_idx, read_idx,
                       save_csv, write_idx)
from .devices import DeviceKind, branch_current, branch_current_partials
from .dynamics import LayerDynamics, LinearSystem, NodeState, assemble_linear, rhs, rhs_jacobian, rhs_trace
from .errors import (ConfigError, DivergenceError, DomainError, InvalidArgument, KirchhoffError,
                     NumericError, ParseError, UnsupportedDevice, VersionError)
from .integrator import IntegratorConfig, Trajectory, hw_scale, integrate, verify_scale_equivalence
from .model import (KirchhoffNet, LayerSpec, build_net, init_params, load_checkpoint, save_checkpoint,
                    zero_like)
from .topology import Topology, fc_topo, ne_topo, proj_topo
from .training import (OptimizerState, TrainConfig, TrainResult, cosine_lr, evaluate,
                       loss_cross_entropy, loss_density_matching, loss_l2, loss_nll_generation,
                       optimizer_step, train)

__version__ = "0.1.0"
