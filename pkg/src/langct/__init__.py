"""Language-token-guided low-dose CT denoising on plain numpy.

Subpackage tour: :mod:`langct.tensor` (autodiff core), :mod:`langct.ssm`
(state-space kernels), :mod:`langct.scan2d` (four-direction 2-D scans),
:mod:`langct.quantize` (frozen-codebook token pyramid), :mod:`langct.langae`
(token-aligned autoencoder), :mod:`langct.denoiser` (residual denoiser),
:mod:`langct.phantom` (synthetic CT pairs), :mod:`langct.metrics`,
:mod:`langct.io`, :mod:`langct.cli`.
"""

from langct.tensor import Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "__version__"]
