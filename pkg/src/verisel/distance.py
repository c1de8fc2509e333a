"""Output-distance semantics for network pairs.

Two point distances are supported on a stacked pair network whose output is
the concatenation of both policies' outputs:

  * l1    -- sum of absolute output differences, no side conditions;
  * cdist -- |y1 - y2| restricted to inputs whose outputs fall in a shared
             sign category, 0 where no category holds. The benchmark form
             uses the categories (both >= 0) and (both <= 0) and composes
             their restricted maxima by minimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_SIGN_TOKEN = {1: "+", -1: "-"}
_TOKEN_SIGN = {"+": 1, "-": -1}


@dataclass(frozen=True)
class Category:
    """A sign condition on both scalar outputs: +1 means >= 0, -1 means <= 0."""

    signs: tuple[int, int]

    def __post_init__(self) -> None:
        if len(self.signs) != 2 or any(s not in (-1, 1) for s in self.signs):
            raise ValueError(f"category signs must be a (+1/-1, +1/-1) pair, got {self.signs}")
        object.__setattr__(self, "signs", tuple(int(s) for s in self.signs))

    @property
    def token(self) -> str:
        return "".join(_SIGN_TOKEN[s] for s in self.signs)

    @staticmethod
    def from_token(token: str) -> "Category":
        if len(token) != 2 or any(c not in _TOKEN_SIGN for c in token):
            raise ValueError(f"bad category token {token!r}, expected e.g. '++'")
        return Category(tuple(_TOKEN_SIGN[c] for c in token))


DEFAULT_CATEGORIES = (Category((1, 1)), Category((-1, -1)))


@dataclass(frozen=True)
class DistanceSpec:
    kind: str  # "l1" or "cdist"
    categories: tuple[Category, ...] = field(default=())

    def __post_init__(self) -> None:
        if self.kind not in ("l1", "cdist"):
            raise ValueError(f"unknown distance kind {self.kind!r}")
        cats = tuple(self.categories)
        if self.kind == "l1":
            if cats:
                raise ValueError("l1 distance takes no categories")
        else:
            if not cats:
                cats = DEFAULT_CATEGORIES
            if len(set(c.token for c in cats)) != len(cats):
                raise ValueError("duplicate categories")
        object.__setattr__(self, "categories", cats)

    def with_category(self, category: Category) -> "DistanceSpec":
        return DistanceSpec("cdist", (category,))

    def to_json(self) -> dict:
        if self.kind == "l1":
            return {"kind": "l1"}
        return {"kind": "cdist", "categories": [c.token for c in self.categories]}

    @staticmethod
    def from_json(obj: dict) -> "DistanceSpec":
        if not isinstance(obj, dict) or "kind" not in obj:
            raise ValueError("distance JSON must be an object with a 'kind'")
        kind = obj["kind"]
        if kind == "l1":
            return DistanceSpec("l1")
        if kind == "cdist":
            tokens = obj.get("categories")
            if tokens is None:
                return DistanceSpec("cdist")
            return DistanceSpec("cdist", tuple(Category.from_token(t) for t in tokens))
        raise ValueError(f"unknown distance kind {kind!r}")


def l1() -> DistanceSpec:
    return DistanceSpec("l1")


def cdistance(categories: tuple[Category, ...] = ()) -> DistanceSpec:
    return DistanceSpec("cdist", categories)


def split_outputs(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a stacked pair output into the two policies' halves."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size % 2 != 0:
        raise ValueError(f"pair output length {y.size} is odd")
    k = y.size // 2
    return y[:k], y[k:]


def category_holds(category: Category, y1: np.ndarray, y2: np.ndarray) -> bool:
    s1, s2 = category.signs
    return bool(s1 * float(y1[0]) >= 0.0 and s2 * float(y2[0]) >= 0.0)


def eval_distance(spec: DistanceSpec, y1: np.ndarray, y2: np.ndarray) -> float:
    """Point distance between two output vectors under the spec."""
    y1 = np.asarray(y1, dtype=np.float64).reshape(-1)
    y2 = np.asarray(y2, dtype=np.float64).reshape(-1)
    if y1.shape != y2.shape:
        raise ValueError(f"output shapes differ: {y1.shape} vs {y2.shape}")
    if spec.kind == "l1":
        return float(np.sum(np.abs(y1 - y2)))
    if y1.size != 1:
        raise ValueError("cdist is defined for scalar-output pairs")
    if any(category_holds(c, y1, y2) for c in spec.categories):
        return float(abs(y1[0] - y2[0]))
    return 0.0


def eval_pair_output(spec: DistanceSpec, y: np.ndarray) -> float:
    """eval_distance on a stacked pair output vector."""
    y1, y2 = split_outputs(y)
    return eval_distance(spec, y1, y2)


def category_max(pair, category: Category, domain, gap: float, config=None):
    """Certified bracket of max |y1 - y2| over the category-feasible subset.

    Returns a verifier Bracket, or None when the verifier proves no input in
    the domain satisfies the category.
    """
    from .verifier import maximize

    bracket = maximize(pair, DistanceSpec("cdist", (category,)), domain, gap, config)
    return None if bracket.empty else bracket


def pair_distance_value(pair, spec: DistanceSpec, domain, gap: float, config=None):
    """Certified bracket of the overall distance value (min over categories
    of the per-category max for cdist; plain max for l1).

    Returns None when cdist has every category empty.
    """
    from .verifier import maximize

    if spec.kind == "l1":
        return maximize(pair, spec, domain, gap, config)
    best = None
    for category in spec.categories:
        bracket = category_max(pair, category, domain, gap, config)
        if bracket is None:
            continue
        if best is None or bracket.upper < best.upper:
            best = bracket
    return best
