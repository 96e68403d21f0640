"""silrec: single-silhouette 3D point-cloud reconstruction.

A point-cloud autoencoder learns a latent shape space; a Gaussian mixture
fitted over encoded training shapes acts as a probabilistic prior; inference
jointly optimizes a latent code and an object rotation so that the projected
decoded cloud matches 2D samples of an input silhouette.
"""

from .geometry import (
    ShapeFamilySpec,
    TriMesh,
    generate_shape,
    load_mesh,
    normalize_cloud,
    sample_surface,
)
from .inference import InferenceConfig, lambda_at, reconstruct, run_single, total_loss
from .masks import BinaryMask, load_mask, rasterize, sample_mask
from .metrics import chamfer2, chamfer3, emd_approx, emd_exact
from .neural import (
    AdamState,
    DecoderParams,
    EncoderParams,
    TrainConfig,
    adam_init,
    adam_step,
    decode,
    encode,
    train_autoencoder,
)
from .pose import ImageAlign, Pose, project, rotation_matrix
from .prior import EmConfig, GmmModel, fit_gmm, gmm_nll, gmm_nll_grad, likelihood_profile

__version__ = "0.1.0"
