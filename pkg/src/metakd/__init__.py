"""Meta-learned knowledge distillation for single-image super-resolution, on a small numpy autodiff engine."""

from .tensor import Tensor, grad, no_grad
from .models import NetConfig, Network, build_network
from .krnet import KRNet, distill_loss

__all__ = ["Tensor", "grad", "no_grad", "NetConfig", "Network", "build_network", "KRNet", "distill_loss"]
__version__ = "0.1.0"
