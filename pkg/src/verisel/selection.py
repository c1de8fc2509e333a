"""Disagreement scoring and model selection.

pdt() runs the binary search over disagreement thresholds with a pluggable
SAT oracle (complete verifier or gradient attack); pdt_table() fills the
pairwise matrix; select() iterates disagreement-score filtering until the
surviving scores look alike or the iteration budget runs out.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, as_boxes
from .distance import DistanceSpec
from .nets import Network, concat, forward_many
from .verifier import BabConfig, Query, VerdictKind, decide

log = logging.getLogger(__name__)

CRITERIA = ("percentile", "max", "combined")


@dataclass(frozen=True)
class OracleAnswer:
    sat: bool
    witness: np.ndarray | None
    certified: bool


class VerifierOracle:
    """Complete oracle: answers via branch-and-bound decide()."""

    is_complete = True

    def __init__(self, config: BabConfig | None = None):
        self.config = config or BabConfig()
        self.calls = 0

    @property
    def oracle_id(self) -> str:
        c = self.config
        return f"verifier:minw={c.min_box_width}:tie={c.tie_tolerance}:cap={c.max_subproblems}"

    def __call__(self, pair: Network, spec: DistanceSpec, box: Box, alpha: float) -> OracleAnswer:
        self.calls += 1
        verdict = decide(Query(pair, spec, box, alpha), self.config)
        return OracleAnswer(verdict.kind is VerdictKind.SAT, verdict.witness, True)


def _binary_search(pair, spec, box, m_cap, epsilon, oracle) -> float:
    low, high = 0.0, float(m_cap)
    while high - low > epsilon:
        alpha = 0.5 * (low + high)
        if oracle(pair, spec, box, alpha).sat:
            low = alpha
        else:
            high = alpha
    return high


def pdt(
    a: Network,
    b: Network,
    spec: DistanceSpec,
    domain,
    m_cap: float,
    epsilon: float,
    oracle,
    events: list | None = None,
) -> float:
    """Provable disagreement threshold of a model pair over the domain.

    Binary search on alpha between 0 and m_cap down to epsilon, one oracle
    query per step; the returned value is the search's upper end, so with a
    complete oracle it is a certified bound on the true max distance.

    Multi-box domains take the max over boxes. Category-restricted distances
    search each category separately and combine by min; a category the
    complete oracle certifies empty is excluded, and if every category is
    empty the pair never shares a sign anywhere, which counts as maximal
    disagreement (m_cap).
    """
    if m_cap <= 0 or epsilon <= 0:
        raise ValueError("m_cap and epsilon must be positive")
    boxes = as_boxes(domain)
    pair = concat(a, b)
    complete = bool(getattr(oracle, "is_complete", False))
    value = 0.0
    for bi, box in enumerate(boxes):
        if spec.kind == "l1":
            box_value = _binary_search(pair, spec, box, m_cap, epsilon, oracle)
        else:
            per_category = []
            for cat in spec.categories:
                sub = spec.with_category(cat)
                probe = oracle(pair, sub, box, 0.0)
                if not probe.sat:
                    if complete and probe.certified:
                        if events is not None:
                            events.append({"box": bi, "category": cat.token, "event": "empty"})
                        log.info("category %s empty on box %d of %s", cat.token, bi, pair.name)
                        continue
                    if events is not None:
                        events.append(
                            {"box": bi, "category": cat.token, "event": "no-feasible-point"}
                        )
                per_category.append(_binary_search(pair, sub, box, m_cap, epsilon, oracle))
            if per_category:
                box_value = min(per_category)
            else:
                box_value = float(m_cap)
                if events is not None:
                    events.append({"box": bi, "event": "all-categories-empty"})
                log.warning("no shared sign category anywhere on box %d of %s", bi, pair.name)
        value = max(value, box_value)
    return value


@dataclass(frozen=True)
class PdtTable:
    model_ids: tuple[str, ...]
    values: np.ndarray  # (k, k), symmetric, zero diagonal
    m_cap: float
    epsilon: float
    events: tuple = ()
    oracle_calls: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        k = len(self.model_ids)
        if v.shape != (k, k):
            raise ValueError(f"table shape {v.shape} does not match {k} ids")
        if len(set(self.model_ids)) != k:
            raise ValueError("duplicate model ids")
        if not np.allclose(v, v.T, atol=0.0):
            raise ValueError("table must be symmetric")
        if np.any(np.diag(v) != 0.0):
            raise ValueError("table diagonal must be zero")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "model_ids", tuple(self.model_ids))
        object.__setattr__(self, "events", tuple(self.events))

    def index(self, model_id: str) -> int:
        try:
            return self.model_ids.index(model_id)
        except ValueError:
            raise KeyError(f"unknown model id {model_id!r}") from None

    def value(self, a: str, b: str) -> float:
        return float(self.values[self.index(a), self.index(b)])

    def to_json(self) -> dict:
        return {
            "model_ids": list(self.model_ids),
            "values": [[float(x) for x in row] for row in self.values],
            "m_cap": float(self.m_cap),
            "epsilon": float(self.epsilon),
            "events": list(self.events),
            "oracle_calls": int(self.oracle_calls),
        }

    @staticmethod
    def from_json(obj: dict) -> "PdtTable":
        return PdtTable(
            tuple(obj["model_ids"]),
            np.asarray(obj["values"], dtype=np.float64),
            float(obj["m_cap"]),
            float(obj["epsilon"]),
            tuple(obj.get("events", ())),
            int(obj.get("oracle_calls", 0)),
        )


def _pair_worker(payload):
    a, b, spec, boxes, m_cap, epsilon, oracle = payload
    events: list = []
    value = pdt(a, b, spec, boxes, m_cap, epsilon, oracle, events)
    return value, events, int(getattr(oracle, "calls", 0))


def pdt_table(
    models,
    spec: DistanceSpec,
    domain,
    m_cap: float,
    epsilon: float,
    oracle,
    jobs: int = 1,
) -> PdtTable:
    """All unordered pairs' PDTs; symmetric with zero diagonal.

    jobs > 1 distributes pairs over processes; results are assembled in a
    fixed order so the table is identical regardless of parallelism.
    """
    if isinstance(models, dict):
        ids = list(models.keys())
        nets = [models[i] for i in ids]
    else:
        nets = list(models)
        ids = [n.name for n in nets]
    if len(nets) < 2:
        raise ValueError("need at least 2 models")
    if len(set(ids)) != len(ids):
        raise ValueError("model ids must be unique")
    boxes = as_boxes(domain)
    k = len(nets)
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    payloads = [(nets[i], nets[j], spec, boxes, m_cap, epsilon, oracle) for i, j in pairs]

    values = np.zeros((k, k))
    events: list = []
    calls = 0
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_pair_worker, payloads))
    else:
        results = [_pair_worker(p) for p in payloads]
        calls = int(getattr(oracle, "calls", 0))
    for (i, j), (value, pair_events, pair_calls) in zip(pairs, results):
        values[i, j] = values[j, i] = value
        for e in pair_events:
            events.append({"pair": [ids[i], ids[j]], **e})
        if jobs > 1:
            calls += pair_calls
    return PdtTable(tuple(ids), values, float(m_cap), float(epsilon), tuple(events), calls)


def disagreement_scores(table: PdtTable, subset=None) -> dict[str, float]:
    """Mean PDT of each model against the other surviving models."""
    ids = list(table.model_ids if subset is None else subset)
    if len(ids) < 2:
        raise ValueError("disagreement scores need at least 2 models")
    idx = [table.index(i) for i in ids]
    sub = table.values[np.ix_(idx, idx)]
    scores = sub.sum(axis=1) / (len(ids) - 1)
    return {mid: float(s) for mid, s in zip(ids, scores)}


def _removal_order(ds: dict[str, float]) -> list[str]:
    return sorted(ds, key=lambda mid: (-ds[mid], mid))


def filter_step(ds: dict[str, float], criterion: str, p: float = 25.0) -> list[str]:
    """Ids to remove this iteration, in removal (DS-descending) order.

    percentile: the floor(p% of n) highest scorers, at least one;
    max: sort descending, cut at the largest adjacent gap, remove all at or
    above the gap's upper value;
    combined: whichever of the two removes more (max's set on a tie).
    Removal always leaves at least one survivor.
    """
    if not ds:
        raise ValueError("empty disagreement-score map")
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    n = len(ds)
    if n == 1:
        return []
    order = _removal_order(ds)

    def percentile_set() -> list[str]:
        count = max(1, math.floor(p / 100.0 * n))
        return order[: min(count, n - 1)]

    def max_set() -> list[str]:
        values = [ds[mid] for mid in order]
        gaps = [values[i] - values[i + 1] for i in range(n - 1)]
        cut = int(np.argmax(gaps))
        threshold = values[cut]
        chosen = [mid for mid in order if ds[mid] >= threshold]
        return chosen[: n - 1]

    if criterion == "percentile":
        return percentile_set()
    if criterion == "max":
        return max_set()
    pct, mx = percentile_set(), max_set()
    return mx if len(mx) >= len(pct) else pct


@dataclass(frozen=True)
class SelectionConfig:
    m_cap: float = 16.0
    epsilon: float = 1.0
    criterion: str = "percentile"
    p: float = 25.0
    iterations: int = 16
    similarity_spread: float | None = None  # None -> epsilon
    similarity_absolute: float = 2.0

    def __post_init__(self) -> None:
        if self.m_cap <= 0 or self.epsilon <= 0:
            raise ValueError("m_cap and epsilon must be positive")
        if self.criterion not in CRITERIA:
            raise ValueError(f"unknown criterion {self.criterion!r}")
        if not (0.0 < self.p < 100.0):
            raise ValueError("p must be in (0, 100)")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.similarity_spread is None:
            object.__setattr__(self, "similarity_spread", float(self.epsilon))
        if self.similarity_spread < 0 or self.similarity_absolute < 0:
            raise ValueError("similarity thresholds must be nonnegative")

    def to_json(self) -> dict:
        return {
            "m_cap": self.m_cap,
            "epsilon": self.epsilon,
            "criterion": self.criterion,
            "p": self.p,
            "iterations": self.iterations,
            "similarity_spread": self.similarity_spread,
            "similarity_absolute": self.similarity_absolute,
        }

    @staticmethod
    def from_json(obj: dict) -> "SelectionConfig":
        return SelectionConfig(**obj)


@dataclass(frozen=True)
class IterationRecord:
    survivors_before: tuple[str, ...]
    scores: dict[str, float]
    removed: tuple[str, ...]
    reason: str  # "filtered" | "similar"


@dataclass(frozen=True)
class SelectionTrace:
    records: tuple[IterationRecord, ...]
    terminated: str  # "similar" | "iterations" | "exhausted"
    config: SelectionConfig

    def to_json(self) -> dict:
        return {
            "iterations": [
                {
                    "survivors_before": list(r.survivors_before),
                    "scores": {k: float(v) for k, v in r.scores.items()},
                    "removed": list(r.removed),
                    "reason": r.reason,
                }
                for r in self.records
            ],
            "terminated": self.terminated,
            "config": self.config.to_json(),
        }

    @staticmethod
    def from_json(obj: dict) -> "SelectionTrace":
        records = tuple(
            IterationRecord(
                tuple(r["survivors_before"]),
                {k: float(v) for k, v in r["scores"].items()},
                tuple(r["removed"]),
                r["reason"],
            )
            for r in obj["iterations"]
        )
        return SelectionTrace(records, obj["terminated"], SelectionConfig.from_json(obj["config"]))

    def to_text(self) -> str:
        lines = []
        for t, rec in enumerate(self.records, start=1):
            lines.append(f"iteration {t}: {len(rec.survivors_before)} models")
            for mid in sorted(rec.scores, key=lambda m: (-rec.scores[m], m)):
                mark = " [removed]" if mid in rec.removed else ""
                lines.append(f"  DS {rec.scores[mid]:10.4f}  {mid}{mark}")
            if rec.reason == "similar":
                lines.append("  scores similar, stopping")
        lines.append(f"terminated: {self.terminated}")
        return "\n".join(lines) + "\n"


def select(models, config: SelectionConfig, table: PdtTable) -> tuple[list[str], SelectionTrace]:
    """Iterative disagreement filtering; returns survivors plus the full trace.

    Each iteration recomputes DS over the survivors, stops early when the
    scores are similar (spread <= similarity_spread, or every score already
    <= similarity_absolute), otherwise removes filter_step's set.
    """
    if isinstance(models, dict):
        ids = list(models.keys())
    else:
        ids = [m.name if isinstance(m, Network) else str(m) for m in models]
    for mid in ids:
        table.index(mid)  # raises on unknown ids
    survivors = list(ids)
    records: list[IterationRecord] = []
    terminated = "iterations"
    for _ in range(config.iterations):
        if len(survivors) < 2:
            terminated = "exhausted"
            break
        ds = disagreement_scores(table, survivors)
        values = list(ds.values())
        spread = max(values) - min(values)
        if spread <= config.similarity_spread or max(values) <= config.similarity_absolute:
            records.append(IterationRecord(tuple(survivors), ds, (), "similar"))
            terminated = "similar"
            break
        removed = filter_step(ds, config.criterion, config.p)
        records.append(IterationRecord(tuple(survivors), ds, tuple(removed), "filtered"))
        survivors = [mid for mid in survivors if mid not in removed]
    return survivors, SelectionTrace(tuple(records), terminated, config)


def uniform_box_sampler(domain):
    """Uniform sampler over a box union: boxes drawn with equal probability."""
    boxes = as_boxes(domain)

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        if len(boxes) == 1:
            return boxes[0].sample(rng, n)
        choice = rng.integers(0, len(boxes), size=n)
        xs = np.empty((n, boxes[0].dim))
        for i, box in enumerate(boxes):
            mask = choice == i
            xs[mask] = box.sample(rng, int(mask.sum()))
        return xs

    return sample


def uncertainty_rank(models, sampler, m: int, seed: int) -> dict[str, float]:
    """Variance-based confidence score: mean squared deviation of each model's
    output from the ensemble mean over m sampled inputs (lower = more confident).
    """
    if m < 2:
        raise ValueError("need at least 2 samples")
    if isinstance(models, dict):
        ids = list(models.keys())
        nets = [models[i] for i in ids]
    else:
        nets = list(models)
        ids = [n.name for n in nets]
    if not nets:
        raise ValueError("need at least one model")
    if not callable(sampler):
        sampler = uniform_box_sampler(sampler)
    rng = np.random.default_rng(seed)
    xs = sampler(rng, m)
    if xs.shape[1] != nets[0].input_dim:
        raise ValueError("sampler dimension does not match the models")
    outs = np.stack([forward_many(net, xs) for net in nets])  # (k, m, out)
    mean = outs.mean(axis=0)
    dev = np.sum((outs - mean) ** 2, axis=2).mean(axis=1)
    return {mid: float(v) for mid, v in zip(ids, dev)}
