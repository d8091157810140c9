"""Target-conditioned adversarial generator toolkit."""

import json

from ._latinf import (
    ConfigError,
    ContractError,
    DataError,
    Generator,
    IntegrityError,
    Model,
    NumericError,
    Registry,
    __version__,
    clip_to_budget,
    cosine_distance,
    greedy_select_classes,
    mi_fgsm_targeted,
    run_cli,
    write_toy_dataset,
)


def generator(**config):
    """Fresh generator from keyword settings (unset keys keep their defaults)."""
    return Generator(json.dumps(config))


__all__ = [
    "ConfigError",
    "ContractError",
    "DataError",
    "Generator",
    "IntegrityError",
    "Model",
    "NumericError",
    "Registry",
    "__version__",
    "clip_to_budget",
    "cosine_distance",
    "generator",
    "greedy_select_classes",
    "mi_fgsm_targeted",
    "run_cli",
    "write_toy_dataset",
]
