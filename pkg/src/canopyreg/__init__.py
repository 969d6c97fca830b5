"""canopyreg: sparse-label canopy regression toolkit.

Dense per-pixel regression of canopy structure (biomass density, canopy
height, canopy cover) from multi-band rasters, supervised only by sparse
point labels. Ships a small numpy layer substrate with analytic gradients,
a pyramid-decoder network with value/uncertainty heads, spectral soft-label
propagation, balanced heteroscedastic losses, density-based sample
weighting, a synthetic world generator for end-to-end validation, staged
training, evaluation and tiled deployment.
"""

__version__ = "0.1.0"

from . import tensor
from . import network
from . import softlabels
from . import losses
from . import weighting
from . import synth
from . import training
from . import evaluation
from . import deployment

__all__ = [
    "tensor",
    "network",
    "softlabels",
    "losses",
    "weighting",
    "synth",
    "training",
    "evaluation",
    "deployment",
    "__version__",
]
