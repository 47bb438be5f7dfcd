"""Deformable 3D registration with matching-criteria encoders.

The high-level entry point is :class:`matchreg.PairRegistrar`, an
sklearn-style estimator whose ``fit`` runs the three-stage schedule and whose
``predict``/``transform`` register volume pairs. The submodules expose the
underlying pieces: grid math (``volgrid``), similarity terms (``losses``),
the encoder streams (``encoders``), the pyramid decoder (``decoder``), the
training schedule (``trainer``), metrics (``evalsuite``), synthetic data
(``synthdata``), and the command line (``cli``).
"""

from .volgrid import (
    DisplacementField,
    Volume,
    compose_fields,
    jacobian_determinant,
    upsample_field,
    warp_volume,
)
from .losses import LossConfig, mi_score, ncc_loss, smoothness_loss, ssim_loss, stage_loss
from .encoders import (
    EncoderConfig,
    FeaturePyramid,
    PyramidEncoder,
    ReferenceEncoder,
    SEMConfig,
    distill_alignment_loss,
    pca_reduce,
    reference_features,
    sem_self_similarity,
)
from .decoder import DecoderConfig, FusionLayers, LevelFieldEstimator, PyramidDecoder
from .model import NetworkConfig, RegistrationNetwork
from .trainer import (
    ModelState,
    TrainConfig,
    infer,
    init_state,
    load_checkpoint,
    one_shot_adapt,
    save_checkpoint,
    train_stage,
)
from .evalsuite import MetricsReport, assd, dice, evaluate_pair, neg_jacobian_fraction
from .synthdata import (
    DOMAIN_A,
    DOMAIN_B,
    DomainSpec,
    SynthPair,
    gen_domain_sample,
    gen_smooth_field,
    make_pair_dataset,
    read_volume,
    write_volume,
)
from .estimator import PairRegistrar
from .validation import CheckpointError, ContractViolation, VolumeIOError

__version__ = "0.1.0"
