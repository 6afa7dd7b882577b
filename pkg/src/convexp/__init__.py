"""Convolution exponentials, graph convolution exponentials and Sylvester flows."""
from .dense import build_equivalent_matrix, dense_expm, logdet_via_lu
from .estimator import FlowDensityEstimator
from .exponential import ExpConfig, expv, inverse_expv, logdet_exp
from .flows import FlowModel, flow_forward, flow_inverse, nll
from .linop import (Conv2dOperator, GraphConvOperator, HouseholderOperator, PowerIterState,
                    spectral_normalize)
from .models import build_model
from .serialization import ModelFormatError, load, save
from .sylvester import (FixedPointConfig, conv_sylvester_layer, original_sylvester_layer,
                        sylvester_forward, sylvester_inverse)

__version__ = "0.1.0"
