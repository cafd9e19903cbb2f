"""Anchor-attention survival prediction.

Slice geometry over labeled MRI volumes, attention aggregation of
slice-level features into patient representations, partial-likelihood
training, concordance and hazard-ratio evaluation, and a reproducible
cross-validation harness with a synthetic planted-signal cohort.
"""

from .aggregation import (
    AttnMilParams,
    DaalParams,
    FeatureBag,
    PatientRep,
    attnmil_backward,
    attnmil_forward,
    daal_backward,
    daal_forward,
    pool,
    read_fvec,
    write_fvec,
)
from .errors import InputError, NumericalError
from .harness import (
    ExperimentResult,
    ManifestRow,
    SplitPlan,
    SynthConfig,
    load_manifest,
    report,
    run_cv,
    stratified_split,
    synth_generate,
    trim_bag,
)
from .metrics import HazardRatioFit, RiskGroup, c_index, hazard_ratio, majority_vote, median_split
from .numerics import Rng, derive_seed, glorot_init, matvec, softmax
from .optim import AdamState, TrainConfig, adam_init, adam_step, gradcheck, train
from .survival import (
    METHOD_KINDS,
    Method,
    ModelDims,
    RiskHead,
    SurvivalLabel,
    cox_grad,
    cox_loss,
    forward_risk,
    init_method,
    load_checkpoint,
    save_checkpoint,
)
from .volume import (
    AnchorIndices,
    LabeledVolume,
    SliceRef,
    WindowConfig,
    coverage_ratio,
    extract_tile,
    select_anchors,
    slice_window,
)

__version__ = "0.1.0"
