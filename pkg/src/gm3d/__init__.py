"""Desk-scale masked-autoencoder pretraining for point clouds with
complexity-guided curriculum masking, teacher-student momentum updates, and
feature-level distillation from a frozen teacher."""

from .diffcore import Value, backward, finite_diff_check
from .geometry import PatchSet, PointCloud, fps, knn_group, normalize_patches, unit_sphere_normalize
from .losses import LossWeights, chamfer, loss_gc, loss_rec_f, loss_rec_p, total_loss
from .masking import CurriculumSchedule, MaskPartition, gc_guided_mask, n_sel, random_mask
from .model import ModelConfig, TriModelState, ema_update, init_params, student_forward
from .pipeline import TrainConfig, bootstrap_knowledge_teacher, load_checkpoint, save_checkpoint, train_run
from .probe import eval_probe, extract_feature, fit_linear_probe

__version__ = "0.1.0"
