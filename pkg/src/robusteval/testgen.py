"""Input space partitioning over the model hyperparameters and base choice coverage suites.

Five variables are partitioned: hidden neurons ``N``, dropout rate ``R``,
class count ``nb``, optimizer ``O`` and the dataset. Each characteristic
lists its blocks with the base choice first.
"""

from __future__ import annotations

import numbers
from dataclasses import dataclass, field

from .dataset import KNOWN_DATASETS
from .nncore.optim import OPTIMIZERS

VARIABLES = ("N", "R", "nb", "O", "dataset")


@dataclass(frozen=True)
class Block:
    id: str
    valid: bool
    value: object
    label: str = ""


@dataclass(frozen=True)
class Characteristic:
    variable: str
    blocks: tuple

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise ValueError(f"unknown variable {self.variable!r}")
        blocks = tuple(self.blocks)
        if not blocks:
            raise ValueError(f"{self.variable}: a characteristic needs at least one block")
        ids = [b.id for b in blocks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.variable}: duplicate block ids {ids}")
        if not blocks[0].valid:
            raise ValueError(f"{self.variable}: the base choice must be a valid block")
        object.__setattr__(self, "blocks", blocks)

    @property
    def base(self):
        return self.blocks[0]

    def block(self, block_id):
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise ValueError(f"{self.variable}: unknown block {block_id!r}")


@dataclass(frozen=True)
class TestCase:
    """One hyperparameter combination.

    ``choices`` holds one block id per characteristic in ISP order;
    ``overrides`` replaces block values with concrete ones (sweeps).
    """

    __test__ = False  # not a pytest class

    id: str
    choices: tuple
    expected_valid: bool
    overrides: tuple = field(default=())

    def values(self, isp):
        """Concrete ``{variable: value}`` for this case under ``isp``."""
        out = {ch.variable: ch.block(bid).value for ch, bid in zip(isp, self.choices)}
        out.update(dict(self.overrides))
        return out

    def to_dict(self):
        return {
            "id": self.id,
            "choices": list(self.choices),
            "expected_valid": self.expected_valid,
            "overrides": {k: v for k, v in self.overrides},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["id"],
            tuple(d["choices"]),
            bool(d["expected_valid"]),
            tuple(sorted(d.get("overrides", {}).items())),
        )


def default_isp():
    """Base tuple ``(128, 0.2, 10, adadelta, mnist)`` plus one invalid block each."""
    return [
        Characteristic("N", (Block("a1", True, 128, "N = 128"), Block("a2", False, None, "N absent"))),
        Characteristic("R", (Block("b1", True, 0.2, "R = 0.2"), Block("b2", False, -0.3, "R = -0.3"))),
        Characteristic("nb", (Block("c1", True, 10, "nb >= 2"), Block("c2", False, 1, "nb < 2"))),
        Characteristic(
            "O", (Block("d1", True, "adadelta", "O = adadelta"), Block("d2", False, None, "O absent"))
        ),
        Characteristic(
            "dataset",
            (Block("e1", True, "mnist", "MNIST"), Block("e2", False, "no-such-dataset", "non-image")),
        ),
    ]


# multi-flip rows appended after the single-flip base choice rows
EXTRA_COMBINATIONS = (
    ("a2", "b2", "c1", "d1", "e1"),
    ("a2", "b1", "c2", "d1", "e2"),
    ("a1", "b2", "c1", "d2", "e2"),
    ("a1", "b2", "c2", "d2", "e1"),
)

# one-variable sweeps around the base choice; R repeats its base value as a fifth row
SWEEPS = {
    "N": (128, 100, 150, 500, 1000),
    "R": (0.2, 0.02, 0.001, 0.5, 0.2),
    "nb": (10, 2, 50, 100, 200),
    "O": ("adadelta", "adam", "sgd", "adagrad", "rmsprop"),
}


def _case(isp, case_id, choices, overrides=()):
    valid = all(ch.block(bid).valid for ch, bid in zip(isp, choices))
    return TestCase(case_id, tuple(choices), valid, tuple(overrides))


def base_choice_suite(isp):
    """All-base test followed by one test per non-base block, flipping one characteristic."""
    base = [ch.base.id for ch in isp]
    rows = [base]
    for pos, ch in enumerate(isp):
        for block in ch.blocks[1:]:
            row = list(base)
            row[pos] = block.id
            rows.append(row)
    return [_case(isp, f"T{i}", row) for i, row in enumerate(rows, start=1)]


def extended_suite(isp, extra=EXTRA_COMBINATIONS):
    """Base choice suite plus explicit combinations, numbered after it."""
    suite = base_choice_suite(isp)
    for row in extra:
        row = tuple(row)
        if len(row) != len(isp):
            raise ValueError(f"combination {row} names {len(row)} blocks for {len(isp)} characteristics")
        for ch, bid in zip(isp, row):
            ch.block(bid)
        suite.append(_case(isp, f"T{len(suite) + 1}", row))
    return suite


def value_is_valid(variable, value):
    """Whether a concrete value lies in the valid domain of ``variable``."""
    if variable in ("N", "nb"):
        if isinstance(value, bool) or not isinstance(value, numbers.Integral):
            return False
        return value >= (1 if variable == "N" else 2)
    if variable == "R":
        return isinstance(value, numbers.Real) and not isinstance(value, bool) and 0 <= value < 1
    if variable == "O":
        return isinstance(value, str) and value.lower() in OPTIMIZERS
    if variable == "dataset":
        return isinstance(value, str) and value in KNOWN_DATASETS
    raise ValueError(f"unknown variable {variable!r}")


def sweep(isp, base, variable, values):
    """One case per value of ``variable``, the other characteristics held at ``base``.

    An out-of-domain value is kept and flagged ``expected_valid=False``.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    pos = [ch.variable for ch in isp].index(variable)
    ch = isp[pos]
    invalid = next((b.id for b in ch.blocks if not b.valid), ch.base.id)
    suite = []
    for i, value in enumerate(values, start=1):
        ok = value_is_valid(variable, value)
        row = list(base.choices)
        row[pos] = ch.base.id if ok else invalid
        others = all(c.block(b).valid for j, (c, b) in enumerate(zip(isp, row)) if j != pos)
        suite.append(TestCase(f"TC{i}", tuple(row), ok and others, ((variable, value),)))
    return suite


def default_sweeps(isp=None):
    """The four one-variable sweeps around the all-base case, keyed by variable."""
    isp = isp or default_isp()
    base = base_choice_suite(isp)[0]
    return {var: sweep(isp, base, var, vals) for var, vals in SWEEPS.items()}
