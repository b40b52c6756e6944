"""Correlation plenoptic imaging: simulation, estimation, and reconstruction."""

from .compressive import (CsProblem, CsResult, LassoResult, build_cs_problem,
                          cross_validate_lambda, cs_reconstruct, lasso_cd,
                          lasso_lambda_max)
from .core import (MaskPlane, ObjectScene, OpticalConfig, ValidationError,
                   double_slit_scene, scene_value, slit_mask, triple_slit_scene,
                   validate_config)
from .correlation import (CorrelationAccumulator, CorrelationTensor, accumulate,
                          accumulate_stream, bench_accumulate, finalize,
                          load_tensor, merge, save_tensor)
from .detector import DetectorParams, detect_binary, detect_ideal
from .forward import (PropagationPlan, build_plan, expected_gamma,
                      mean_direct_image, propagate_batch, propagate_frame)
from .frames import (Frame, FramePairStream, pack_bits, read_frames, read_stream,
                     unpack_bits, write_frames, write_stream)
from .metrics import (ResolutionCurve, pearson_r, resolution_scan, sharpness,
                      visibility)
from .pipeline import simulate_stream, uniform_scene_for
from .refocus import RefocusedImage, direct_image, refocus, refocus_stack
from .speckle import (SpeckleField, SpeckleGrid, generate_speckle,
                      speckle_covariance_kernel)
from .tomography import (RayMeasurement, RaySet, SystemMatrix, TomoResult,
                         VoxelGrid, art_solve, build_rays, build_system_matrix,
                         linearize, load_volume, mlem_solve, save_volume,
                         trace_lengths)

__version__ = "0.1.0"
