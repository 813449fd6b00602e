"""Where flow fields come from.

The decoder does not care whether a field was predicted by a network or
derived from ground truth. A :class:`FieldSource` names one of three origins:
the oracle targets of a label map, those targets with seeded noise, or a UEMF
file exported by some external predictor. Fields for image ``X.png`` live at
``X.uemf``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .core import load_labels
from .errors import DimsMismatch, IoFailure
from .flows import FlowField, compute_flow_targets, perturb_field, read_uemf, write_uemf

KINDS = ("oracle", "noisy_oracle", "file")


@dataclass(frozen=True)
class FieldSource:
    kind: str
    path: Path
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "path", Path(self.path))

    @classmethod
    def oracle(cls, labels_path) -> FieldSource:
        return cls("oracle", labels_path)

    @classmethod
    def noisy_oracle(cls, labels_path, sigma: float, seed: int) -> FieldSource:
        return cls("noisy_oracle", labels_path, sigma, seed)

    @classmethod
    def file(cls, uemf_path) -> FieldSource:
        return cls("file", uemf_path)


def resolve_fields(source: FieldSource, expected_dims: tuple[int, int] | None = None) -> FlowField:
    """Materialise the field a source refers to.

    Raises FileNotFoundError for a missing path, BadMagic / NonFiniteField for
    unusable UEMF files and DimsMismatch when `expected_dims` disagrees.
    """
    if not source.path.is_file():
        raise FileNotFoundError(str(source.path))
    if source.kind == "file":
        field = read_uemf(source.path)
    else:
        field = compute_flow_targets(load_labels(source.path))
        if source.kind == "noisy_oracle":
            field = perturb_field(field, source.sigma, source.seed)
    if expected_dims is not None and tuple(field.shape) != tuple(expected_dims):
        raise DimsMismatch(f"{source.path}: field is {field.shape}, expected {tuple(expected_dims)}")
    return field


def save_fields(field: FlowField, path) -> None:
    try:
        write_uemf(field, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def fields_path_for(image_path) -> Path:
    return Path(image_path).with_suffix(".uemf")
