"""Progressive residual extraction pre-training for speech representations."""

from progre.audio import (
    FrameFeatures,
    FrontendParams,
    MfccFeatures,
    Waveform,
    compute_mfcc,
    conv_frontend,
    conv_output_length,
    load_waveform,
)
from progre.encoder import (
    EncoderOutputs,
    MaskSpec,
    ModelConfig,
    ProgRE,
    apply_mask,
    build_model,
    fas_pool,
    progre_forward,
    remove_and_normalize,
    sample_mask,
)
from progre.objectives import (
    LinearWarmupDecay,
    LossBreakdown,
    LossWeights,
    content_loss,
    feature_penalty,
    pretrain_step,
    speaker_loss,
    total_loss,
)
from progre.pitch import NormalizedPitch, PitchContour, estimate_f0, f0_pearson, log_normalize
from progre.probing import LayerWeights, assemble_stack, export_layer_weights, train_probe, weighted_sum
from progre.units import Codebook, FeatureStore, assign_units, fit_minibatch_kmeans

__version__ = "0.1.0"
