"""Gradient attacks: cheap incomplete stand-ins for the complete verifier.

Each attack climbs the pair's output distance inside the input box and
reports the best concrete point it saw. An attack can only under-witness:
it answers SAT when its best point clears alpha, never certifies UNSAT, so
PDT values it produces are at most the verifier's.

Gradients go backward through the fixed activation pattern of the query
point, with sign(0) taken as +1 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Box
from .distance import Category, DistanceSpec
from .nets import Network, forward_preacts
from .selection import OracleAnswer

ATTACK_KINDS = ("fgsm", "pgd", "cpgd")


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "pgd"
    step_fraction: float | None = None  # of box width; default 1/2 fgsm, 1/50 pgd
    iterations: int = 100  # T: pgd steps per start, cpgd outer rounds
    restarts: int = 4  # random starts beyond the box midpoint
    signed: bool = True  # signed gradient steps; False uses the raw gradient
    inner_x: int = 20  # T_x: cpgd maximization steps per round
    inner_lambda: int = 5  # T_lambda: cpgd multiplier steps per round
    lambda_step: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.step_fraction is not None and self.step_fraction <= 0:
            raise ValueError("step_fraction must be positive")
        if min(self.iterations, self.inner_x, self.inner_lambda) < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if self.lambda_step <= 0:
            raise ValueError("lambda_step must be positive")

    @property
    def oracle_id(self) -> str:
        return (
            f"attack:{self.kind}:step={self.step_fraction}:T={self.iterations}"
            f":restarts={self.restarts}:signed={self.signed}"
            f":Tx={self.inner_x}:Tl={self.inner_lambda}:ls={self.lambda_step}:seed={self.seed}"
        )


@dataclass(frozen=True)
class AttackResult:
    x: np.ndarray | None
    value: float
    feasible: bool


def _sign(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0.0, 1.0, -1.0)


def output_jacobian(net: Network, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Output vector and its (out_dim, in_dim) Jacobian at x's activation pattern."""
    preacts, y = forward_preacts(net, x)
    jac = net.layers[-1].weights
    for layer_idx in range(net.depth - 2, -1, -1):
        mask = preacts[layer_idx] >= 0.0
        jac = (jac * mask[None, :]) @ net.layers[layer_idx].weights
    return y, jac


def make_l1_objective(pair: Network):
    """x -> (sum |y1-y2|, gradient, feasible=True) for a stacked pair."""
    k = pair.output_dim // 2

    def objective(x: np.ndarray):
        y, jac = output_jacobian(pair, x)
        diff = y[:k] - y[k:]
        grad = _sign(diff) @ (jac[:k] - jac[k:])
        return float(np.sum(np.abs(diff))), grad, True

    return objective


def make_category_objective(pair: Network, categories: tuple[Category, ...]):
    """x -> (|y1-y2|, gradient, any category holds) for a scalar pair.

    The gradient is of the unconstrained distance; feasibility is only
    tracked, which is what FGSM/PGD can do with side conditions.
    """
    if pair.output_dim != 2:
        raise ValueError("category objectives need scalar-output pairs")

    def objective(x: np.ndarray):
        y, jac = output_jacobian(pair, x)
        diff = y[0] - y[1]
        grad = float(_sign(np.array(diff))) * (jac[0] - jac[1])
        feasible = any(
            s1 * y[0] >= 0.0 and s2 * y[1] >= 0.0 for (s1, s2) in (c.signs for c in categories)
        )
        return float(abs(diff)), grad, feasible

    return objective


def _objective_for(pair: Network, spec: DistanceSpec):
    if spec.kind == "l1":
        return make_l1_objective(pair)
    return make_category_objective(pair, spec.categories)


def _starts(box: Box, restarts: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    pts = [box.midpoint]
    if restarts > 0:
        pts.append(box.sample(rng, restarts))
    return np.vstack([p.reshape(1, -1) if p.ndim == 1 else p for p in pts])


class _Best:
    def __init__(self) -> None:
        self.value = -np.inf
        self.x: np.ndarray | None = None

    def offer(self, value: float, feasible: bool, x: np.ndarray) -> None:
        if feasible and value > self.value:
            self.value = float(value)
            self.x = x.copy()

    def result(self) -> AttackResult:
        if self.x is None:
            return AttackResult(None, 0.0, False)
        return AttackResult(self.x, self.value, True)


def fgsm(objective, box: Box, config: AttackConfig | None = None) -> AttackResult:
    """One signed-gradient step from the box midpoint; keeps the better point."""
    cfg = config or AttackConfig(kind="fgsm")
    step = (cfg.step_fraction if cfg.step_fraction is not None else 0.5) * box.width
    best = _Best()
    x0 = box.midpoint
    v0, g0, feas0 = objective(x0)
    best.offer(v0, feas0, x0)
    x1 = box.clip(x0 + step * _sign(g0))
    v1, _, feas1 = objective(x1)
    best.offer(v1, feas1, x1)
    return best.result()


def pgd(objective, box: Box, config: AttackConfig | None = None) -> AttackResult:
    """Projected gradient ascent, best iterate over all starts."""
    cfg = config or AttackConfig(kind="pgd")
    step = (cfg.step_fraction if cfg.step_fraction is not None else 1.0 / 50.0) * box.width
    best = _Best()
    for x0 in _starts(box, cfg.restarts, cfg.seed):
        x = x0
        for _ in range(cfg.iterations):
            v, g, feas = objective(x)
            best.offer(v, feas, x)
            direction = _sign(g) if cfg.signed else g
            x = box.clip(x + step * direction)
        v, _, feas = objective(x)
        best.offer(v, feas, x)
    return best.result()


def constrained_pgd(
    pair: Network,
    category: Category,
    box: Box,
    config: AttackConfig | None = None,
) -> AttackResult:
    """Lagrangian alternation for category-constrained distance maximization.

    Rounds alternate multiplier ascent on the violation penalties with
    projected gradient ascent on L(x) - sum_i lambda_i relu(C_i(x)), where
    C_i > 0 iff output i breaks its sign condition. Only feasible iterates
    (both sign conditions holding exactly) count toward the result.
    """
    if pair.output_dim != 2:
        raise ValueError("constrained_pgd needs a scalar-output pair")
    cfg = config or AttackConfig(kind="cpgd")
    step = (cfg.step_fraction if cfg.step_fraction is not None else 1.0 / 50.0) * box.width
    signs = np.asarray(category.signs, dtype=np.float64)
    best = _Best()

    def pieces(x: np.ndarray):
        y, jac = output_jacobian(pair, x)
        diff = y[0] - y[1]
        value = float(abs(diff))
        grad_value = float(_sign(np.array(diff))) * (jac[0] - jac[1])
        violation = -signs * y  # C_i(x); positive means condition i is broken
        grad_violation = -signs[:, None] * jac
        return value, grad_value, violation, grad_violation

    for x0 in _starts(box, cfg.restarts, cfg.seed):
        x = x0
        lam = np.zeros(2)
        for _ in range(cfg.iterations):
            value, _, violation, _ = pieces(x)
            best.offer(value, bool(np.all(violation <= 0.0)), x)
            for _ in range(cfg.inner_lambda):
                lam = np.maximum(0.0, lam + cfg.lambda_step * np.maximum(violation, 0.0))
            for _ in range(cfg.inner_x):
                value, grad_value, violation, grad_violation = pieces(x)
                best.offer(value, bool(np.all(violation <= 0.0)), x)
                active = (violation >= 0.0).astype(np.float64)
                grad = grad_value - (lam * active) @ grad_violation
                direction = _sign(grad) if cfg.signed else grad
                x = box.clip(x + step * direction)
        value, _, violation, _ = pieces(x)
        best.offer(value, bool(np.all(violation <= 0.0)), x)
    return best.result()


class AttackOracle:
    """Incomplete SAT oracle built from one attack kind.

    The attack itself does not depend on alpha, so each (pair, box, category)
    is attacked once and every binary-search probe reuses the best value.
    """

    is_complete = False

    def __init__(self, config: AttackConfig | None = None):
        self.config = config or AttackConfig()
        self.calls = 0
        self.attack_runs = 0
        self._memo: dict = {}

    @property
    def oracle_id(self) -> str:
        return self.config.oracle_id

    def _run(self, pair: Network, spec: DistanceSpec, box: Box) -> AttackResult:
        cfg = self.config
        self.attack_runs += 1
        if cfg.kind == "fgsm":
            return fgsm(_objective_for(pair, spec), box, cfg)
        if cfg.kind == "pgd" or spec.kind == "l1":
            return pgd(_objective_for(pair, spec), box, cfg)
        results = [constrained_pgd(pair, cat, box, cfg) for cat in spec.categories]
        feasible = [r for r in results if r.feasible]
        if not feasible:
            return AttackResult(None, 0.0, False)
        return max(feasible, key=lambda r: r.value)

    def __call__(self, pair: Network, spec: DistanceSpec, box: Box, alpha: float) -> OracleAnswer:
        self.calls += 1
        key = (
            id(pair),
            box.lower.tobytes(),
            box.upper.tobytes(),
            spec.kind,
            tuple(c.token for c in spec.categories),
        )
        hit = self._memo.get(key)
        if hit is None:
            hit = (pair, self._run(pair, spec, box))  # keep pair alive so id() stays unique
            self._memo[key] = hit
        result = hit[1]
        sat = result.feasible and result.value >= alpha
        return OracleAnswer(sat, result.x if sat else None, False)


def attack_oracle(config: AttackConfig | None = None) -> AttackOracle:
    return AttackOracle(config)
