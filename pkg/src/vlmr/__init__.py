"""Weakly-supervised video moment retrieval on precomputed feature tensors.

The pipeline: multi-scale segment-group proposals over the frame stream, a
scratch GRU for word-level query states, per-group surrogate selection by
cosine against the final query state, a cascaded cross-modal attention
stack producing a scalar video-query similarity, contrastive training on
weak pair labels, and R@n / IoU evaluation. All gradients come from the
package's own reverse-mode autodiff and are verified by central
differences.
"""

from .autodiff import (Graph, GradCheckReport, Node, ShapeMismatch,
                       finite_diff_check)
from .attention import cascaded_attention, dense_attention, vla_score
from .data import (Dataset, SyntheticSpec, generate_synthetic, load_features,
                   load_manifest, verify_separation, write_features)
from .encoders import featurize_proposals, gru_encode, pool_proposals
from .evaluation import (EvalSample, RankedPrediction, didemo_metrics,
                         evaluate, infer_sample, random_baseline,
                         rank_proposals, recall_at_n_iou)
from .model import TrainingConfig, bind_params, init_params, run_pipeline
from .proposals import (Interval, ProposalGrid, enumerate_contiguous_moments,
                        generate_segment_groups, moments_grid, temporal_iou)
from .surrogate import SurrogateSet, select_surrogates
from .training import (Checkpoint, TrainSample, contrastive_loss,
                       load_checkpoint, sample_negatives, save_checkpoint,
                       train)

__version__ = "0.1.0"
