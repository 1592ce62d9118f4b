"""Model-delta compression and multi-variant serving simulation."""

from .compress import (
    CalibrationSet,
    CompressConfig,
    CompressedDelta,
    LayerDelta,
    compress_model,
    compute_hessian,
    dequantize_layer,
    extract_delta,
    lossless_decode,
    lossless_encode,
    obs_compress_layer,
    pack_codes,
    prune_mask_2of4,
    quantize_group,
    unpack_codes,
)
from .core import Matrix, Rng, WeightStack, frobenius_distance, gaussian_matrix, matmul
from .formats import inspect_delta, read_delta, read_stack, write_delta, write_stack
from .inference import (
    BatchInput,
    DeltaHandle,
    TpLayout,
    decoupled_linear,
    forward_model,
    group_by_delta,
    sbmm,
    tp_forward,
    tp_partition,
)
from .scheduler import (
    Request,
    RequestState,
    SchedulerConfig,
    SchedulerState,
    on_request_finished,
    select_batch,
    sweep_profile,
)
from .simulator import (
    CostModel,
    Metrics,
    TraceEvent,
    WorkloadSpec,
    gen_trace,
    run_sim,
    slo_attainment,
    sweep_n,
)

__version__ = "0.1.0"
