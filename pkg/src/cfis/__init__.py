"""Detection operators: CARAFE upsampling, partial-convolution C2f blocks,
the Inner-SIoU box loss and a precision/recall/mAP evaluation kit."""

from .boxloss import (
    BBox,
    LossBreakdown,
    LossConfig,
    auxiliary_box,
    grad_check,
    inner_iou,
    inner_siou_grad,
    inner_siou_loss,
    iou,
    siou_components,
    siou_loss,
)
from .carafe import CarafeConfig, ReassemblyKernelField, carafe_upsample, predict_kernels, reassemble
from .errors import ConfigError, DataError
from .evalkit import Detection, EvalReport, GroundTruth, average_precision, evaluate, match, pr_curve, throughput_bench
from .fasterblock import (
    C2fFnbSpec,
    C2fSpec,
    CostReport,
    FasterBlockSpec,
    PConvSpec,
    c2f,
    c2f_fnb,
    count_params,
    faster_block,
    flops_conv,
    flops_pconv,
    pconv,
)
from .tensor import ConvSpec, Tensor, conv2d, nearest_upsample, read_tensor, softmax_group, write_tensor

__version__ = "0.1.0"
