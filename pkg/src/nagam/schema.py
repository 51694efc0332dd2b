"""Concept vocabulary: rating scales, category codes and normalization."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, OutOfRange, UnknownCode

RANGE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class OrdinalConceptDef:
    name: str
    scale_min: int = 1
    scale_max: int = 5
    low_label: str = ""
    high_label: str = ""

    def __post_init__(self):
        if not self.scale_min < self.scale_max:
            raise InputError(f"{self.name}: scale_min must be below scale_max")

    @property
    def span(self) -> int:
        return self.scale_max - self.scale_min

    def normalize(self, raw: float) -> float:
        """Map a (possibly averaged) rating onto [0, 1]."""
        raw = float(raw)
        if not (self.scale_min - RANGE_TOLERANCE <= raw <= self.scale_max + RANGE_TOLERANCE):
            raise OutOfRange(
                f"{self.name}: rating {raw} outside [{self.scale_min}, {self.scale_max}]"
            )
        raw = min(max(raw, self.scale_min), self.scale_max)
        return (raw - self.scale_min) / self.span

    def denormalize(self, value: float) -> float:
        return self.scale_min + float(value) * self.span

    def in_scale(self, rating) -> bool:
        return self.scale_min <= rating <= self.scale_max


@dataclass(frozen=True)
class CategoricalConceptDef:
    name: str
    classes: tuple[str, ...]
    class_codes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "class_codes", tuple(int(c) for c in self.class_codes))
        if len(self.classes) != len(self.class_codes):
            raise InputError(f"{self.name}: classes and class_codes differ in length")
        if len(set(self.classes)) != len(self.classes) or len(set(self.class_codes)) != len(
            self.class_codes
        ):
            raise InputError(f"{self.name}: class labels and codes must be unique")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index_of(self, code: int) -> int:
        try:
            return self.class_codes.index(int(code))
        except ValueError:
            raise UnknownCode(f"{self.name}: unknown class code {code!r}") from None

    def label_of(self, code: int) -> str:
        return self.classes[self.index_of(code)]

    def encode(self, code: int) -> np.ndarray:
        onehot = np.zeros(self.n_classes)
        onehot[self.index_of(code)] = 1.0
        return onehot

    def one_hot_at(self, index: int) -> np.ndarray:
        onehot = np.zeros(self.n_classes)
        onehot[index] = 1.0
        return onehot


@dataclass(frozen=True)
class ConceptSchema:
    ordinals: tuple[OrdinalConceptDef, ...]
    categoricals: tuple[CategoricalConceptDef, ...]
    target: OrdinalConceptDef
    _slices: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ordinals", tuple(self.ordinals))
        object.__setattr__(self, "categoricals", tuple(self.categoricals))
        names = [c.name for c in self.ordinals] + [c.name for c in self.categoricals]
        names.append(self.target.name)
        if len(set(names)) != len(names):
            raise InputError("concept names must be unique across the schema")
        slices, offset = {}, 0
        for c in self.ordinals:
            slices[c.name] = slice(offset, offset + 1)
            offset += 1
        for c in self.categoricals:
            slices[c.name] = slice(offset, offset + c.n_classes)
            offset += c.n_classes
        object.__setattr__(self, "_slices", slices)

    @property
    def concept_names(self) -> list[str]:
        """Input concepts in feature order (ordinals, then categoricals)."""
        return list(self._slices)

    @property
    def ordinal_names(self) -> list[str]:
        return [c.name for c in self.ordinals]

    @property
    def categorical_names(self) -> list[str]:
        return [c.name for c in self.categoricals]

    @property
    def input_dim(self) -> int:
        return len(self.ordinals) + sum(c.n_classes for c in self.categoricals)

    def feature_slice(self, name: str) -> slice:
        return self._slices[name]

    def concept(self, name: str):
        for c in (*self.ordinals, *self.categoricals, self.target):
            if c.name == name:
                return c
        raise KeyError(name)

    def is_ordinal(self, name: str) -> bool:
        return name in self.ordinal_names

    def to_dict(self) -> dict:
        def ordinal(c):
            return {
                "name": c.name,
                "scale_min": c.scale_min,
                "scale_max": c.scale_max,
                "low_label": c.low_label,
                "high_label": c.high_label,
            }

        return {
            "ordinals": [ordinal(c) for c in self.ordinals],
            "categoricals": [
                {
                    "name": c.name,
                    "classes": list(c.classes),
                    "class_codes": list(c.class_codes),
                }
                for c in self.categoricals
            ],
            "target": ordinal(self.target),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConceptSchema":
        try:
            return cls(
                ordinals=[OrdinalConceptDef(**d) for d in data["ordinals"]],
                categoricals=[CategoricalConceptDef(**d) for d in data["categoricals"]],
                target=OrdinalConceptDef(**data["target"]),
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed schema document: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ConceptSchema":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    def subset(self, names) -> "ConceptSchema":
        """Schema restricted to the given input concepts, in the given order."""
        names = list(names)
        return ConceptSchema(
            ordinals=[c for n in names for c in self.ordinals if c.name == n],
            categoricals=[c for n in names for c in self.categoricals if c.name == n],
            target=self.target,
        )


def default_schema() -> ConceptSchema:
    """The LIDC-IDRI nodule concepts: six ordinal ratings, two categories, malignancy."""
    return ConceptSchema(
        ordinals=(
            OrdinalConceptDef("subtlety", 1, 5, "Extremely Subtle", "Obvious"),
            OrdinalConceptDef("sphericity", 1, 5, "Linear", "Round"),
            OrdinalConceptDef("margin", 1, 5, "Poorly Defined", "Sharp"),
            OrdinalConceptDef("lobulation", 1, 5, "No Lobulation", "Marked"),
            OrdinalConceptDef("spiculation", 1, 5, "No Spiculation", "Marked"),
            OrdinalConceptDef("texture", 1, 5, "GGO", "Solid"),
        ),
        categoricals=(
            # codes follow the LIDC XML convention
            CategoricalConceptDef(
                "internal_structure", ("Soft Tissue", "Fluid", "Fat", "Air"), (1, 2, 3, 4)
            ),
            CategoricalConceptDef(
                "calcification",
                ("Popcorn", "Laminated", "Solid", "Non-central", "Central", "Absent"),
                (1, 2, 3, 4, 5, 6),
            ),
        ),
        target=OrdinalConceptDef("malignancy", 1, 5, "Unlikely", "Suspicious"),
    )


def normalize_ordinal(definition: OrdinalConceptDef, raw: float) -> float:
    return definition.normalize(raw)


def encode_categorical(definition: CategoricalConceptDef, code: int) -> np.ndarray:
    return definition.encode(code)
