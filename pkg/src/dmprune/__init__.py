"""Detection-distortion guided post-training weight pruning.

Second-order per-layer distortion curves plus a globally optimal dynamic
program decide how much to prune in each layer under a FLOPs or count
budget. Includes a bit-exact tensor container (DMB), a miniature
two-headed reference network with analytic gradients, and a verification
suite runnable via `dmprune verify`.
"""

from .allocator import (AllocationResult, brute_force_allocate,
                        dp_allocate_counts, dp_allocate_flops,
                        uniform_allocate)
from .distortion import (DistortionCurve, cross_term_diagnostic,
                         delta_curve_direct, delta_curve_incremental,
                         q_direct)
from .hessian import (FisherMatrix, auto_kappa, cross_form, empirical_fisher,
                      quad_form)
from .model_ir import (BundleError, CalibrationSet, GradientBundle,
                       LayerGrads, LayerRecord, ModelBundle, PruneMask,
                       flops_of, load_bundle, save_bundle)
from .pipeline import (PruneConfig, PruneOutcome, pareto_sweep, run_prune)
from .refnet import (RefNetSpec, build_gradient_bundle, default_spec,
                     finetune, forward, from_model_bundle, init_params,
                     is_refnet_bundle, probe_vector, synth_calibration,
                     to_model_bundle, true_distortion)
from .scoring import (Perturbation, count_grid, mask_at_count,
                      perturbation_at_count, prune_order, sigma_subvector,
                      taylor_scores)

__version__ = "0.1.0"
