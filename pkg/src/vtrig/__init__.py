"""Trigger-free segmentation of side-channel traces with virtual triggers.

Find the exact CP length of a trace, cut it at computed trigger positions,
align and average the segments, or locate CPs by template matching when
they are not strictly periodic; then score the result with a profiled
Hamming-weight attack.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BoundsError,
    ConfigError,
    ContractError,
    DataError,
    DeltaNotIdentifiableError,
    DegenerateProfileError,
    FormatError,
    NoCPsFoundError,
    NoPeriodicityError,
    VtrigError,
)
from .trace_model import (  # noqa: E402
    DenoisedSegment,
    SegmentMatrix,
    Trace,
    TraceMeta,
    load_iq_trace,
    load_real_trace,
    load_trace,
    save_real_trace,
)
from .synthgen import GroundTruth, SynthConfig, generate, sbox_hw_oracle  # noqa: E402
from .length_estimator import PeriodEstimate, estimate_period_autocorr, l1_distance, refine_period  # noqa: E402
from .segment_aligner import (  # noqa: E402
    AlignmentParams,
    denoise_pipeline,
    fine_align,
    rotate_to_idle,
    segment_trace,
)
from .pattern_pullout import (  # noqa: E402
    Detection,
    SegmentTemplate,
    find_occurrences,
    learn_template,
    pullout_segments,
)
from .attack_eval import (  # noqa: E402
    AttackReport,
    Profile,
    attack,
    build_profile,
    pge_curve,
    precision_sweep,
)
