"""Uncertainty-guided synthetic-view augmentation for visual place
recognition training."""

from .augment import (AugmentConfig, CandidatePose, FailureCase,
                      augmentation_epoch, detect_failures, sample_candidates,
                      score_candidates, select_top_k)
from .backbone import (Backbone, BackboneConfig, Descriptor, DeskVprNet,
                       FeatureMap, similarity)
from .dataset import (DatasetView, PlaceRecord, RecordStore, Triplet,
                      import_transforms, insert_synthetic, load_manifest,
                      mine_triplets, organize, positives_for, save_manifest)
from .evaluation import (RecallReport, RetrievalResult, emit_report,
                         recall_at_n, retrieve)
from .geometry import (Intrinsics, Pose, PoseFeature, bilinear_sample,
                       encode_position, look_at, pose_feature,
                       project_feature_grid, relative_pose)
from .pipeline import PipelineOutcome, evaluate_recall, run_pipeline
from .renderer import (RenderRequest, RenderResult, SceneSpec, psnr,
                       render_external, render_oracle)
from .training import (NormalizationStats, TrainConfig, early_stop, nll_loss,
                       normalize_descriptor, train_ue, train_vpr_epoch,
                       triplet_loss)
from .ue_net import (FusedFeature, ReferenceSet, UEConfig, UENet, UEPrediction,
                     aggregate, build_reference_set, decode, fuse, predict,
                     warp_references)

__version__ = "0.1.0"
