"""Python bindings for the naln EEG decoding toolkit."""

from ._naln import (
    Model,
    NalnError,
    TrialSet,
    __version__,
    combine_four_to_three,
    cross_entropy,
    ensemble_logits,
    highpass_response,
    per_class_recall,
    preprocess,
    preprocess_defaults,
    read_eegt,
    resample,
    run_cli,
    synth,
    uar,
    write_eegt,
)

__all__ = [
    "Model",
    "NalnError",
    "TrialSet",
    "__version__",
    "combine_four_to_three",
    "cross_entropy",
    "ensemble_logits",
    "highpass_response",
    "per_class_recall",
    "preprocess",
    "preprocess_defaults",
    "read_eegt",
    "resample",
    "run_cli",
    "synth",
    "uar",
    "write_eegt",
]
