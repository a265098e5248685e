"""Model registry: construct any generative model from a name plus overrides."""

from __future__ import annotations

from .base import (
    BINARY_CHOICE,
    CENSORED_SLIDER,
    CONTINUOUS_LOG_INTENSITY,
    History,
    Model,
    OutcomeSupportError,
)
from .ces import CesModel
from .discounting import DiscountingModel
from .location import LocationFindingModel
from .toy import TOY_PRESETS, ToyJointTable, ToyModel, exact_eig_from_table, toy_enumerate, toy_preset

MODEL_NAMES = ("location", "discounting", "ces", "toy")


def make_model(name: str, **constants) -> Model:
    """Build a model; ``toy-<preset>`` shorthands select toy variants."""
    if name.startswith("toy-"):
        return toy_preset(name[4:], **constants)
    if name == "toy":
        variant = constants.pop("variant", "binary")
        return toy_preset(variant, **constants)
    if name == "location":
        return LocationFindingModel(**constants)
    if name == "discounting":
        return DiscountingModel(**constants)
    if name == "ces":
        return CesModel(**constants)
    raise ValueError(f"unknown model {name!r}; have {MODEL_NAMES}")


__all__ = [
    "BINARY_CHOICE",
    "CENSORED_SLIDER",
    "CONTINUOUS_LOG_INTENSITY",
    "CesModel",
    "DiscountingModel",
    "History",
    "LocationFindingModel",
    "Model",
    "OutcomeSupportError",
    "TOY_PRESETS",
    "ToyJointTable",
    "ToyModel",
    "exact_eig_from_table",
    "make_model",
    "toy_enumerate",
    "toy_preset",
    "MODEL_NAMES",
]
