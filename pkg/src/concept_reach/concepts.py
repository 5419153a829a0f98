"""Concept space of the two-shape scenes, captions, dataset specs and their corruptions.

A scene is described by four factors: back colour, back shape, front colour and
front shape, written as the tuple ``(c1, s1, c2, s2)``. A :class:`DatasetSpec`
assigns an image count to each tuple and carries the caption mask used when the
dataset is materialized. Scarcity, removal and bias corruptions are pure
functions from spec to spec.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

COLORS: tuple[str, ...] = ("red", "green", "blue")
SHAPES: tuple[str, ...] = ("circle", "triangle", "square")
POSITIONS: tuple[str, ...] = ("c1", "s1", "c2", "s2")


class Factor(enum.Enum):
    BACK_COLOR = "c1"
    BACK_SHAPE = "s1"
    FRONT_COLOR = "c2"
    FRONT_SHAPE = "s2"

    @property
    def kind(self) -> str:
        return "color" if self.value.startswith("c") else "shape"

    @property
    def value_set(self) -> tuple[str, ...]:
        return COLORS if self.kind == "color" else SHAPES

    @property
    def index(self) -> int:
        return POSITIONS.index(self.value)

    @classmethod
    def parse(cls, name: str | Factor) -> Factor:
        if isinstance(name, Factor):
            return name
        for f in cls:
            if name in (f.value, f.name, f.name.lower()):
                return f
        raise ValueError(f"unknown factor {name!r}")


@dataclass(frozen=True, order=True)
class ConceptTuple:
    c1: str
    s1: str
    c2: str
    s2: str

    def __post_init__(self):
        if self.c1 == self.c2:
            raise ValueError(f"back and front colour must differ, got {self.c1!r} twice")

    def __iter__(self):
        return iter((self.c1, self.s1, self.c2, self.s2))

    def __getitem__(self, i: int) -> str:
        return (self.c1, self.s1, self.c2, self.s2)[i]

    def get(self, factor: Factor | str) -> str:
        return getattr(self, Factor.parse(factor).value)

    def key(self) -> str:
        return ":".join(self)

    @classmethod
    def from_key(cls, key: str) -> ConceptTuple:
        parts = key.lower().split(":")
        if len(parts) != 4:
            raise ValueError(f"bad tuple string {key!r}, expected c1:s1:c2:s2")
        return cls(*parts)

    def restrict(self, mask: SpecificationMask) -> PartialTuple:
        return PartialTuple(*(v if keep else None for v, keep in zip(self, mask.specified)))

    def hamming(self, other: ConceptTuple) -> int:
        return sum(a != b for a, b in zip(self, other))

    def __str__(self) -> str:
        return "(" + ", ".join(self) + ")"


@dataclass(frozen=True)
class PartialTuple:
    """A concept tuple with some factors left unconstrained (``None``)."""

    c1: str | None = None
    s1: str | None = None
    c2: str | None = None
    s2: str | None = None

    def __iter__(self):
        return iter((self.c1, self.s1, self.c2, self.s2))

    def constraints(self) -> dict[str, str]:
        return {p: v for p, v in zip(POSITIONS, self) if v is not None}

    def matches(self, t: ConceptTuple) -> bool:
        return all(v is None or v == tv for v, tv in zip(self, t))


@dataclass(frozen=True)
class SpecificationMask:
    specified: tuple[bool, bool, bool, bool] = (True, True, True, True)

    @classmethod
    def without(cls, *factors: Factor | str) -> SpecificationMask:
        drop = {Factor.parse(f).index for f in factors}
        return cls(tuple(i not in drop for i in range(4)))

    @classmethod
    def from_names(cls, names: Iterable[str]) -> SpecificationMask:
        keep = {Factor.parse(n).index for n in names}
        return cls(tuple(i in keep for i in range(4)))

    def names(self) -> list[str]:
        return [p for p, keep in zip(POSITIONS, self.specified) if keep]

    @property
    def n_specified(self) -> int:
        return sum(self.specified)

    @property
    def label(self) -> str:
        removed = [p for p, keep in zip(POSITIONS, self.specified) if not keep]
        return "full" if not removed else "no_" + "_".join(removed)

    @classmethod
    def from_label(cls, label: str) -> SpecificationMask:
        if label == "full":
            return cls()
        if not label.startswith("no_"):
            raise ValueError(f"bad mask label {label!r}")
        return cls.without(*label[3:].split("_"))


FULL_MASK = SpecificationMask()

# Caption reduction ladder: each removed-factor set maps to its caption template.
_TEMPLATES: dict[tuple[bool, ...], str] = {
    (True, True, True, True): "a {c1} {s1} behind a {c2} {s2}",
    (False, True, True, True): "a {s1} behind a {c2} {s2}",
    (True, False, True, True): "a {c1} shape behind a {c2} {s2}",
    (True, True, False, True): "a {c1} {s1} behind a {s2}",
    (True, True, True, False): "a {c1} {s1} behind a {c2} shape",
    (False, False, True, True): "a {c2} {s2}",
    (False, False, False, True): "a {s2}",
    (False, False, False, False): "",
}

MASK_LADDER: tuple[SpecificationMask, ...] = tuple(SpecificationMask(k) for k in _TEMPLATES)


def _template_regex(template: str) -> re.Pattern:
    if not template:
        return re.compile(r"^$")
    pattern = re.escape(template)
    for p in POSITIONS:
        values = COLORS if p.startswith("c") else SHAPES
        pattern = pattern.replace(re.escape("{" + p + "}"), f"(?P<{p}>{'|'.join(values)})")
    return re.compile("^" + pattern + "$")


_PARSERS = [(SpecificationMask(k), _template_regex(t)) for k, t in _TEMPLATES.items()]


def enumerate_valid_tuples(colors: Sequence[str] = COLORS, shapes: Sequence[str] = SHAPES) -> list[ConceptTuple]:
    """All tuples with distinct back/front colours, lexicographic in value-set order."""
    return [
        ConceptTuple(c1, s1, c2, s2)
        for c1, s1, c2, s2 in itertools.product(colors, shapes, colors, shapes)
        if c1 != c2
    ]


def caption_of(t: ConceptTuple, mask: SpecificationMask = FULL_MASK) -> str:
    try:
        template = _TEMPLATES[mask.specified]
    except KeyError:
        raise ValueError(f"unsupported specification mask {mask.label!r}") from None
    return template.format(c1=t.c1, s1=t.s1, c2=t.c2, s2=t.s2)


def parse_caption(y: str) -> tuple[PartialTuple, SpecificationMask]:
    y = y.strip().lower()
    for mask, rx in _PARSERS:
        m = rx.match(y)
        if m:
            return PartialTuple(**m.groupdict()), mask
    raise ValueError(f"cannot parse caption {y!r}")


def _as_constraints(constraints) -> dict[str, str]:
    if constraints is None:
        return {}
    if isinstance(constraints, PartialTuple):
        return constraints.constraints()
    return {Factor.parse(k).value: v for k, v in dict(constraints).items()}


def matches(t: ConceptTuple, constraints) -> bool:
    return all(getattr(t, p) == v for p, v in _as_constraints(constraints).items())


@dataclass(frozen=True)
class DatasetSpec:
    counts: Mapping[ConceptTuple, int]
    mask: SpecificationMask = FULL_MASK
    target_total: int = 54000
    rng_seed: int = 0
    value_sets: tuple[tuple[str, ...], tuple[str, ...]] = (COLORS, SHAPES)
    counts_order: tuple[ConceptTuple, ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        for t, n in self.counts.items():
            if not isinstance(t, ConceptTuple):
                raise TypeError(f"spec key {t!r} is not a ConceptTuple")
            if n < 0:
                raise ValueError(f"negative count {n} for {t}")
        # canonical order used for remainder distribution and serialization
        order = tuple(t for t in enumerate_valid_tuples(*self.value_sets) if t in self.counts)
        object.__setattr__(self, "counts_order", order)
        object.__setattr__(self, "counts", {t: int(self.counts[t]) for t in order})

    @property
    def tuples(self) -> tuple[ConceptTuple, ...]:
        return self.counts_order

    def count(self, t: ConceptTuple) -> int:
        return self.counts.get(t, 0)

    def nonzero(self) -> list[ConceptTuple]:
        return [t for t in self.counts_order if self.counts[t] > 0]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def with_mask(self, mask: SpecificationMask) -> DatasetSpec:
        return replace(self, mask=mask)

    def to_dict(self) -> dict:
        return {
            "value_sets": {"colors": list(self.value_sets[0]), "shapes": list(self.value_sets[1])},
            "counts": {t.key(): n for t, n in self.counts.items()},
            "mask": self.mask.names(),
            "target_total": self.target_total,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> DatasetSpec:
        vs = d.get("value_sets", {"colors": COLORS, "shapes": SHAPES})
        return cls(
            counts={ConceptTuple.from_key(k): int(v) for k, v in d["counts"].items()},
            mask=SpecificationMask.from_names(d.get("mask", POSITIONS)),
            target_total=int(d.get("target_total", 54000)),
            rng_seed=int(d.get("rng_seed", 0)),
            value_sets=(tuple(vs["colors"]), tuple(vs["shapes"])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> DatasetSpec:
        return cls.from_dict(json.loads(text))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def baseline_spec(target_total: int = 54000, rng_seed: int = 0, mask: SpecificationMask = FULL_MASK) -> DatasetSpec:
    tuples = enumerate_valid_tuples()
    counts = _split(target_total, tuples)
    return DatasetSpec(counts=counts, mask=mask, target_total=target_total, rng_seed=rng_seed)


def _split(total: int, tuples: Sequence[ConceptTuple]) -> dict[ConceptTuple, int]:
    """Floor split of ``total`` over ``tuples``, remainder handed out in the given order."""
    if not tuples:
        return {}
    base, rem = divmod(int(total), len(tuples))
    return {t: base + (1 if i < rem else 0) for i, t in enumerate(tuples)}


def subset_size(spec: DatasetSpec, constraints=None) -> int:
    cons = _as_constraints(constraints)
    return sum(n for t, n in spec.counts.items() if matches(t, cons))


def _rebalance(spec: DatasetSpec, fixed: Mapping[ConceptTuple, int], free: Sequence[ConceptTuple]) -> DatasetSpec:
    counts = {t: 0 for t in spec.counts}
    counts.update(fixed)
    budget = spec.target_total - sum(fixed.values())
    if budget < 0:
        raise ValueError("fixed counts exceed the target total")
    counts.update(_split(budget, free))
    return replace(spec, counts=counts)


def apply_scarcity(spec: DatasetSpec, factor: Factor | str, value: str, p: float) -> DatasetSpec:
    """Reduce the share of images with ``factor == value`` to ``p`` of the target total.

    Affected tuples share ``round(p * target_total)`` images equally; all other
    nonzero tuples share the rest equally.
    """
    factor = Factor.parse(factor)
    active = spec.nonzero()
    affected = [t for t in active if t.get(factor) == value]
    others = [t for t in active if t.get(factor) != value]
    if not active:
        return spec
    ceiling = len(affected) / len(active)
    if p < 0 or p > ceiling + 1e-9:
        raise ValueError(f"proportion {p} outside [0, {ceiling:.4f}] for {factor.value}={value}")
    fixed = _split(round(p * spec.target_total), affected)
    return _rebalance(spec, fixed, others)


def apply_removal(spec: DatasetSpec, t: ConceptTuple) -> DatasetSpec:
    if t not in spec.counts:
        raise ValueError(f"{t} is not part of the spec")
    free = [u for u in spec.nonzero() if u != t]
    return _rebalance(spec, {t: 0}, free)


def apply_bias(spec: DatasetSpec, tied: tuple[tuple[Factor | str, str], tuple[Factor | str, str]], injected_count: int) -> DatasetSpec:
    """Tie ``factor_a = value_a`` to ``factor_b = value_b`` and inject counterexamples.

    Tuples breaking the biconditional are dropped, except those with
    ``factor_a = value_a`` and ``factor_b != value_b`` which share
    ``injected_count`` images. Surviving tuples share the remaining budget.
    """
    (fa, va), (fb, vb) = tied
    fa, fb = Factor.parse(fa), Factor.parse(fb)
    if fa == fb:
        raise ValueError("tied factors must be distinct")
    if injected_count < 0 or injected_count > spec.target_total:
        raise ValueError(f"injected_count {injected_count} outside [0, {spec.target_total}]")
    active = spec.nonzero()
    consistent = [t for t in active if (t.get(fa) == va) == (t.get(fb) == vb)]
    injected = [t for t in spec.tuples if t.get(fa) == va and t.get(fb) != vb]
    return _rebalance(spec, _split(injected_count, injected), consistent)


class OodClass(enum.Enum):
    IN_DISTRIBUTION = "in_distribution"
    COMPOSITIONAL_OOD = "compositional_ood"
    POSITIONAL_OOD = "positional_ood"
    OTHER_OOD = "other_ood"


# identity, swap colours, swap shapes, swap both
KIND_RESPECTING_PERMUTATIONS: tuple[tuple[int, int, int, int], ...] = (
    (0, 1, 2, 3),
    (2, 1, 0, 3),
    (0, 3, 2, 1),
    (2, 3, 0, 1),
)


def classify_ood(t: ConceptTuple, spec: DatasetSpec) -> OodClass:
    seen = spec.nonzero()
    if spec.count(t) > 0:
        return OodClass.IN_DISTRIBUTION
    if all(any(u[j] == t[j] for u in seen) for j in range(4)):
        return OodClass.COMPOSITIONAL_OOD
    seen_set = set(seen)
    for perm in KIND_RESPECTING_PERMUTATIONS[1:]:
        values = tuple(t[i] for i in perm)
        if values[0] != values[2] and ConceptTuple(*values) in seen_set:
            return OodClass.POSITIONAL_OOD
    return OodClass.OTHER_OOD
