"""Global pairwise feature-interaction detection with calibrated uncertainty.

Train a concrete-dropout Bayesian MLP with a separate linear main-effects
head, aggregate its input Hessians over an L2 partition of the data, and
report per-pair interaction effects with credible intervals, Bayesian
p-values and permutation-based error control.
"""

__version__ = "0.1.0"

from .bnn import ConcreteDropoutMLP, HybridModel, MaskSample  # noqa: F401
from .core import Activation, RngStream, Standardizer  # noqa: F401
from .data import Dataset  # noqa: F401
from .interactions import InteractionEstimate, Partition  # noqa: F401
from .train import FitReport, TrainConfig  # noqa: F401
