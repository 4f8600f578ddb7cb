import re
from dataclasses import dataclass
from fractions import Fraction
from typing import List

from ..core.errors import InvalidParameterError

"""
Approach:

-> Force scales are written the way rate tables label their columns:
   1/L, 2/(L+m), 3/(L+m), 4/(L+m), or a plain number.
-> A ForceScale keeps the label for headers and turns into a number only once
   m and L are known.
-> Step lists accept decimals and fractions: "2,1,1/2,1/4".

Example:

    ForceScale.parse("3/(L+m)").value(m=1, L=10)  -> 3/11 = 0.2727...
    ForceScale.parse("1/L").value(m=1, L=1e9)     -> 1e-9
    ForceScale.parse("0.25").value(m=1, L=10)     -> 0.25
    parse_float_list("2,1,1/2,1/4")               -> [2.0, 1.0, 0.5, 0.25]
"""

_SYMBOLIC = re.compile(
    r"^\s*(?P<num>[0-9]*\.?[0-9]+(?:[eE][+-]?[0-9]+)?)\s*/\s*"
    r"(?P<den>L|\(\s*L\s*\+\s*m\s*\)|\(\s*m\s*\+\s*L\s*\))\s*$"
)


@dataclass(frozen=True)
class ForceScale:
    label: str
    numerator: float
    denominator: str  # "L", "L+m" or "1" for literals

    @classmethod
    def parse(cls, text: str) -> "ForceScale":
        match = _SYMBOLIC.match(text)
        if match:
            numerator = float(match.group("num"))
            den = "L" if match.group("den") == "L" else "L+m"
            label = f"{match.group('num')}/L" if den == "L" else f"{match.group('num')}/(L+m)"
            return cls(label=label, numerator=numerator, denominator=den)
        try:
            value = float(text)
        except ValueError:
            raise InvalidParameterError(f"Cannot parse force scale {text!r}")
        if not value > 0:
            raise InvalidParameterError(f"Force scale must be positive, got {text!r}")
        return cls(label=text.strip(), numerator=value, denominator="1")

    def value(self, m: float, L: float) -> float:
        if self.denominator == "L":
            return self.numerator / L
        if self.denominator == "L+m":
            return self.numerator / (L + m)
        return self.numerator


def parse_number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise InvalidParameterError(f"Cannot parse number {text!r}")


def parse_float_list(text: str) -> List[float]:
    items = [item for item in text.split(",") if item.strip()]
    if not items:
        raise InvalidParameterError("Empty list")
    return [parse_number(item) for item in items]


def parse_scale_list(text: str) -> List[ForceScale]:
    items = [item for item in text.split(",") if item.strip()]
    if not items:
        raise InvalidParameterError("Empty force-scale list")
    return [ForceScale.parse(item) for item in items]
