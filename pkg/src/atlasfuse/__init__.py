"""One-shot atlas registration, prompt generation and adaptive fusion for 3D segmentation backends."""
__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND
from .volume import ContractError, Geometry, LabelMask, ProbMask, Volume, normalize_intensity
from .io import read_any, read_mvol, read_nifti, write_any, write_mvol, write_nifti
from .xform import AffineTransform, DisplacementField, warp_mask, warp_volume
from .registration import RegConfig, RegistrationDiverged, register_pipeline
from .prompting import EmptyPriorError, Prompt, make_prompt
from .backends import BackendError, BackendSpec, segment
from .fusion import FitConfig, FusionParams, fit_fusion, fuse, kalman_gain
from .metrics import MetricsReport, evaluate
from .pipeline import CaseConfig, CaseInputs, run_case, run_crossval

__all__ = [
    "KERNEL_BACKEND", "ContractError", "Geometry", "LabelMask", "ProbMask", "Volume", "normalize_intensity",
    "read_any", "read_mvol", "read_nifti", "write_any", "write_mvol", "write_nifti",
    "AffineTransform", "DisplacementField", "warp_mask", "warp_volume",
    "RegConfig", "RegistrationDiverged", "register_pipeline", "EmptyPriorError", "Prompt", "make_prompt",
    "BackendError", "BackendSpec", "segment", "FitConfig", "FusionParams", "fit_fusion", "fuse",
    "kalman_gain", "MetricsReport", "evaluate", "CaseConfig", "CaseInputs", "run_case", "run_crossval",
]
