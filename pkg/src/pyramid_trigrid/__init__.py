"""Differentiable pyramid tri-grid volume rendering and score distillation in numpy."""
from .camera import CameraPose, RayBatch, camera_rays, protocol_21_views, turntable
from .grid import (InvalidInput, PyramidTriGrid, SparseGrad, TriGrid, query_pyramid,
                   query_pyramid_grad, query_trigrid)
from .guidance import (Conditioning, GuidanceError, GuidanceProvider, PointMassOracle, RefineConfig,
                       SDSConfig, refine, run_sds, sds_step)
from .optim import OptimizerState, adam_step, gradcheck, make_gradcheck_scene
from .render import Decoder, NumericalError, RenderTape, RenderedImage, Renderer, ToRGB, render_backward
from .synthesis import SynthesisNetwork, invert, synthesize

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "RayBatch", "camera_rays", "protocol_21_views", "turntable",
    "InvalidInput", "PyramidTriGrid", "SparseGrad", "TriGrid", "query_pyramid",
    "query_pyramid_grad", "query_trigrid",
    "Conditioning", "GuidanceError", "GuidanceProvider", "PointMassOracle", "RefineConfig",
    "SDSConfig", "refine", "run_sds", "sds_step",
    "OptimizerState", "adam_step", "gradcheck", "make_gradcheck_scene",
    "Decoder", "NumericalError", "RenderTape", "RenderedImage", "Renderer", "ToRGB",
    "render_backward", "SynthesisNetwork", "invert", "synthesize",
]
