"""Frequency-bias theory of diagonal SSMs, selective-scan kernels, a toy hybrid
SSM/attention backbone and a ridge-regression evaluation harness."""

from .errors import MVHybridError
from .spectral import (EigenInit, FrequencyInterval, InitScheme, TransferFunction, build_init,
                       derivative_magnitude, magnitude_response, total_variation_quadrature,
                       transfer_eval, tv_highfreq_approx_real, tv_highfreq_bound_complex,
                       tv_highfreq_exact_real)

__version__ = "0.1.0"

__all__ = [
    "MVHybridError", "EigenInit", "FrequencyInterval", "InitScheme", "TransferFunction", "build_init",
    "derivative_magnitude", "magnitude_response", "total_variation_quadrature", "transfer_eval",
    "tv_highfreq_approx_real", "tv_highfreq_bound_complex", "tv_highfreq_exact_real",
]
