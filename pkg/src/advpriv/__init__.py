"""
Adversarial privacy for tabular neural classifiers.

Two defences against property-inference attacks on learned representations
(gradient-reversal discriminators and FGSM perturbation of the hidden
layer), the attack harness that measures what leaks, and the evaluation
protocol around them: recall-band threshold calibration, stratified k-fold
cross-validation, demographic cross-tests and external holdouts.
"""

__version__ = "0.1.0"

from .errors import (
    AdvPrivError,
    CalibrationError,
    ConfigError,
    DegenerateLabelError,
    DegenerateSubsetError,
    IntegrityError,
    MissingArtifactError,
    NumericalFaultError,
    ProtocolError,
    RejectedInputError,
)
