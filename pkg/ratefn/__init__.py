"""
Rate-function toolkit for Jackson and processor-sharing networks.
"""

__version__ = "0.3.0"

from .local_model import LocalModel, localize
from .model import JacksonSpec, ModelError, ProcessorSharingSpec, load_network
from .rate_solver import ConvergenceError, RateSolution, local_rate, path_rate, point_rate

__all__ = [
    'JacksonSpec', 'ProcessorSharingSpec', 'ModelError', 'load_network',
    'LocalModel', 'localize',
    'ConvergenceError', 'RateSolution', 'local_rate', 'path_rate', 'point_rate',
]
