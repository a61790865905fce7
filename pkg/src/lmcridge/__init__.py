"""Linear mode connectivity analysis for forked small networks."""

from .errors import *  # noqa: F401,F403
from .net import DatasetSlice, Network, error_rate, gradient, hvp, loss, quadratic_form
from .params import LayerLayout, LayerMask, ParamVector, Segment, interpolate, mask_apply

__version__ = "0.1.0"
