"""aeroseg: domain-adaptive semantic segmentation on a small autodiff core.

A two-headed convolutional network (per-pixel class logits plus per-sample
domain logits) is trained with a three-term objective over mixed
labelled/unlabelled imagery, then scored with a confusion-matrix metric
suite and the label-free SPIE score. Everything runs on a self-contained
float64 reverse-mode autodiff engine.
"""

from .data import (AugmentPolicy, Batch, ColorLegend, Dataset, DatasetSpec,
                   DEFAULT_LEGEND, DEFAULT_TAGS, DomainTag, Sample, augment,
                   color_to_index, index_to_color, load_dataset, load_hidden_truth,
                   make_batches, synth_generate)
from .loss import (LossBreakdown, cross_entropy_pixelwise, dice_loss,
                   domain_misalignment_loss, soft_dice_loss, softmax_probabilities,
                   total_loss)
from .metrics import (ConfusionMatrix, MetricsReport, SegmenterParams, SegmentMap,
                      SpieReport, boundary_disagreement, compute_report,
                      confusion_accumulate, improvement, segment_detect, spie)
from .model import ArchConfig, ModelOutput, ModelParams, forward, init_params, predict_mask
from .tensor import Tensor, finite_difference_check, no_grad
from .trainer import (Checkpoint, TrainConfig, TrainLog, adam_update, evaluate_params,
                      load_checkpoint, save_checkpoint, sgd_update, train_loop, train_step)

__version__ = "0.1.0"
