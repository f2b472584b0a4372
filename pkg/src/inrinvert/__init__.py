"""Decoder-free text-to-image synthesis by inverting a frozen encoder.

A frequency-aware coordinate network is optimized so that the frozen
encoder's embedding of its render matches a target embedding derived from
a text prompt (Procrustes-projected into the image sub-manifold), starting
from a robust blur-fitted anchor and sweeping learning rate from early to
deep layers.
"""

from .alignment import OrthogonalMap, PairedEmbeddings, build_local_pairs, project_text, solve_procrustes
from .dataset import (DatasetEntry, DatasetStore, blend_target, build_store, load_store,
                      prepare_entry, retrieve_init, save_store)
from .encoder import (EncoderHandle, ToyEncoder, VitEncoder, clipsim, cosine_distance,
                      embed_image, embed_text, load_encoder, normalize)
from .gradients import (GradientReport, LayerBlock, NumericalOverflowError, ParamLayout,
                        ParamVector, evaluate_with_gradient, finite_difference_gradient)
from .imaging import (AugmentationConfig, augment, gaussian_blur, load_png, psnr,
                      radial_power_spectrum, save_png, ssim)
from .inr import (CoordinateGrid, INRSpec, INRWeights, finer_layer, init_finer, load_inr,
                  render, save_inr)
from .inversion import (InversionConfig, ScheduleState, augmented_embedding, invert,
                        invert_to_embedding, schedule_rates, total_loss)
from .robust_init import AWPConfig, RobustFitConfig, compute_awp, fit_inr, train_robust_inr
from .tasks import TaskRequest, TaskResult, edit, reconstruct, style_transfer

__version__ = "0.1.0"
