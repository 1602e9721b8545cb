"""Training-graph memory modeling: swap-out/swap-in and recompute graph
rewrites, a schedule-independent liveness estimator, a deterministic
compute/copy-channel simulator, and a toy numeric executor that proves the
rewrites preserve computation."""

from .graph import (
    CycleError, GraphError, GraphSpec, NodeSpec, TensorDesc, Violation,
    bfs_depths, element_count, load_graph, save_graph, tensor_bytes,
    topo_order, validate_graph,
)
from .models import UNetParams, gen_chain, gen_unet3d
from .training import (
    LivenessReport, TrainingGraph, count_feature_maps, cross_phase_edges,
    cross_phase_tensors, expand_training_graph, load_training_graph,
    save_training_graph, static_peak_estimate,
)
from .rewrite import (
    PRESETS, RewriteConfig, RewritePlan, apply_rewrite, check_rewrite_validity,
    insert_recompute, insert_swap_nodes, load_plan, plan_checkpoints,
    resolve_preset, save_plan, select_swap_tensors,
)
from .sim import (
    DeadlockError, InfeasibleError, SimConfig, SimReport, calibrate_compute_rate,
    emit_trace, epoch_time, op_cost, simulate, stall_report, sweep, xfer_cost,
)
from .numeric import (
    GradCheckReport, UseAfterSwapError, equivalence_check, grad_check, run_numeric,
)

__version__ = "0.1.0"
