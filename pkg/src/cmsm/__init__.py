"""Self-supervised measurement-score diffusion reconstruction for parallel
MRI on synthetic multi-coil phantoms, with baselines, metrics, and a CLI."""

__version__ = "0.1.0"

from .ops import (
    CoilMaps,
    ComplexImage,
    Mask,
    MultiCoilKSpace,
    apply_adjoint,
    apply_forward,
    fft2_unitary,
    ifft2_unitary,
    make_mask,
    restrict,
    rss_normalize,
)
from .phantom import (
    DatasetRecord,
    PhantomSpec,
    gen_coilmaps,
    gen_phantom,
    load_dataset,
    make_training_sample,
    save_dataset,
    synthesize_kspace,
)
from .training import (
    NoiseSchedule,
    TrainConfig,
    TrainingSample,
    csm_smoothness_loss,
    msm_loss,
    perturb,
    predict_measurement,
    sample_sigma,
    total_loss,
    train,
)
from .sampling import (
    SamplerConfig,
    WeightMap,
    ancestral_step,
    build_weight_map,
    combine_weighted,
    dc_update,
    draw_ensemble_masks,
    estimate_csm_inference,
    reconstruct,
)
from .baselines import MetricReport, psnr, ssim, tv_reconstruct, zero_filled
from .nets import (
    AdamState,
    ConvNetSpec,
    ParamStore,
    adam_step,
    csm_forward,
    denoiser_forward,
    load_checkpoint,
    save_checkpoint,
)
