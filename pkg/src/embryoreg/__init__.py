"""Multi-atlas registration and segmentation of 3D volumes.

Two-stage affine alignment (landmark-supervised, then similarity with a
scaling penalty), diffeomorphic nonrigid refinement with stationary velocity
fields, GA-based atlas selection and majority-vote label fusion, plus
phantoms with ground truth and evaluation metrics.
"""

__version__ = "0.1.0"

from .affine import (AffineTransform, apply_point, compose, invert, matrix_to_params,
                     params_to_matrix, scaling_factors)
from .atlas import (Atlas, AtlasSet, align_to_standard, build_atlas, build_omega_mask,
                    canonical_landmarks, load_atlas_set, save_atlas_set, select_atlases)
from .errors import (DegenerateLandmarksError, DimensionMismatchError, DivergenceError,
                     EmbryoRegError, InputError, InsufficientDataError, MissingLandmarksError,
                     NonInvertibleError, NumericalError, SelectionError)
from .fields import (DisplacementField, VelocityField, compose_fields, integrate_svf,
                     invert_svf, jacobian_det, load_field, save_field)
from .fusion import (RegistrationResult, majority_vote, per_atlas_segmentation, run_ensemble,
                     run_multi_subject, run_single_subject, save_result)
from .losses import (LossWeights, diffusion_reg, fd_check, landmark_mse, ncc_local_sq,
                     nonrigid_loss, scaling_penalty, stage1_loss, stage2_loss)
from .metrics import dice, ev_error, ev_from_mask, evaluate, wilcoxon_two_sided
from .optim import OptimConfig, minimize, register_pipeline, run_nonrigid, run_stage1, run_stage2
from .phantom import PhantomSpec, apply_known_deformation, augment, gen_phantom
from .sampler import sample_trilinear, warp_affine, warp_field, warp_mask
from .volume import (Landmarks, Mask, Volume, dilate, erode, load_mask, load_volume, mask_union,
                     preprocess, save_mask, save_volume)
