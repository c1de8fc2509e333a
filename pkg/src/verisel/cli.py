"""Pipeline driver: train fixtures, build PDT tables, select, evaluate, compare.

Subcommands read one JSON config file and write reports under the output
directory. Exit codes: 0 success, 2 usage, 3 missing file, 4 config or schema
violation, 5 verification budget exhausted, 1 anything else. All randomness
derives from the config seed; reruns against a warm cache are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace

from .attacks import AttackConfig, attack_oracle
from .boxes import Box, as_boxes
from .distance import DistanceSpec
from .envs import classify, env_preset, query_domain, rollout
from .nets import Network, NetworkError, load_network, save_network
from .nets import to_json as net_to_json
from .selection import (
    PdtTable,
    SelectionConfig,
    VerifierOracle,
    pdt_table,
    select,
)
from .trainer import TrainConfig, make_fixture_set
from .verifier import BabConfig, BudgetExhausted, VerifierError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_BUDGET = 5

ORACLES = ("verifier", "fgsm", "pgd", "constrained-pgd")
_ATTACK_KIND = {"fgsm": "fgsm", "pgd": "pgd", "constrained-pgd": "cpgd"}
BENCHMARKS = ("cartpole", "mountaincar")


class ConfigError(ValueError):
    """Pipeline config file is malformed or inconsistent."""


@dataclass(frozen=True)
class PipelineConfig:
    output_dir: str
    seed: int = 0
    benchmark: str | None = None
    models: tuple[str, ...] = ()
    model_dir: str | None = None
    train: dict | None = None
    distance: DistanceSpec = DistanceSpec("l1")
    domain: str | tuple[Box, ...] | None = None
    selection: SelectionConfig = SelectionConfig()
    oracle: str = "verifier"
    attack: AttackConfig = AttackConfig()
    verifier: BabConfig = BabConfig()
    eval_episodes: int = 20

    def __post_init__(self) -> None:
        if self.oracle not in ORACLES:
            raise ConfigError(f"oracle must be one of {ORACLES}, got {self.oracle!r}")
        if self.benchmark is not None and self.benchmark not in BENCHMARKS:
            raise ConfigError(f"benchmark must be one of {BENCHMARKS}, got {self.benchmark!r}")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if not self.output_dir:
            raise ConfigError("output_dir is required")


_CONFIG_KEYS = {
    "output_dir",
    "seed",
    "benchmark",
    "models",
    "model_dir",
    "train",
    "distance",
    "domain",
    "selection",
    "oracle",
    "attack",
    "verifier",
    "eval_episodes",
}


def _parse_domain(raw):
    if raw is None:
        return None
    if isinstance(raw, str):
        return raw
    if isinstance(raw, dict):
        return (Box.from_json(raw),)
    if isinstance(raw, list):
        return tuple(Box.from_json(b) for b in raw)
    raise ConfigError(f"domain must be a preset name or box(es), got {type(raw).__name__}")


def load_config(path: str) -> PipelineConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return PipelineConfig(
            output_dir=raw.get("output_dir", ""),
            seed=int(raw.get("seed", 0)),
            benchmark=raw.get("benchmark"),
            models=tuple(raw.get("models", ())),
            model_dir=raw.get("model_dir"),
            train=raw.get("train"),
            distance=DistanceSpec.from_json(raw.get("distance", {"kind": "l1"})),
            domain=_parse_domain(raw.get("domain")),
            selection=SelectionConfig.from_json(raw.get("selection", {})),
            oracle=raw.get("oracle", "verifier"),
            attack=AttackConfig(**raw.get("attack", {})),
            verifier=BabConfig(**raw.get("verifier", {})),
            eval_episodes=int(raw.get("eval_episodes", 20)),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def resolved_config(cfg: PipelineConfig) -> dict:
    """Full effective config, embedded in every report for reproducibility."""
    domain = cfg.domain
    if isinstance(domain, tuple):
        domain = [b.to_json() for b in domain]
    return {
        "output_dir": cfg.output_dir,
        "seed": cfg.seed,
        "benchmark": cfg.benchmark,
        "models": list(cfg.models),
        "model_dir": cfg.model_dir,
        "train": cfg.train,
        "distance": cfg.distance.to_json(),
        "domain": domain,
        "selection": cfg.selection.to_json(),
        "oracle": cfg.oracle,
        "attack": asdict(cfg.attack),
        "verifier": asdict(cfg.verifier),
        "eval_episodes": cfg.eval_episodes,
    }


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_atomic(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_models(cfg: PipelineConfig) -> dict[str, Network]:
    paths = list(cfg.models)
    if cfg.model_dir is not None:
        entries = sorted(os.listdir(cfg.model_dir))
        paths.extend(os.path.join(cfg.model_dir, e) for e in entries if e.endswith(".json"))
    if not paths:
        raise ConfigError("no models: set 'models' paths or 'model_dir'")
    nets: dict[str, Network] = {}
    for p in paths:
        mid = os.path.splitext(os.path.basename(p))[0]
        if mid in nets:
            raise ConfigError(f"duplicate model id {mid!r} (file {p})")
        nets[mid] = load_network(p)
    return dict(sorted(nets.items()))


def _resolve_domain(cfg: PipelineConfig, models: dict[str, Network]) -> tuple[Box, ...]:
    if cfg.domain is None:
        if cfg.benchmark is None:
            raise ConfigError("set 'domain' (preset name or boxes) or 'benchmark'")
        boxes = query_domain(cfg.benchmark)
    elif isinstance(cfg.domain, str):
        boxes = query_domain(cfg.domain)
    else:
        boxes = as_boxes(cfg.domain)
    dims = {net.input_dim for net in models.values()}
    if len(dims) != 1:
        raise ConfigError(f"models disagree on input dimension: {sorted(dims)}")
    (dim,) = dims
    if boxes[0].dim != dim:
        raise ConfigError(f"domain dimension {boxes[0].dim} does not match models ({dim})")
    return boxes


def _build_oracle(cfg: PipelineConfig, choice: str | None = None):
    choice = choice or cfg.oracle
    if choice == "verifier":
        return VerifierOracle(cfg.verifier)
    kind = _ATTACK_KIND[choice]
    return attack_oracle(replace(cfg.attack, kind=kind))


def _seed_from(*parts) -> int:
    """Stable integer seed from mixed ints and strings."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "big")


def cache_key(models: dict[str, Network], spec: DistanceSpec, boxes, m_cap, epsilon, oracle_id) -> str:
    payload = {
        "models": [[mid, net_to_json(net)] for mid, net in models.items()],
        "distance": spec.to_json(),
        "boxes": [b.to_json() for b in boxes],
        "m_cap": float(m_cap),
        "epsilon": float(epsilon),
        "oracle": oracle_id,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _compute_table(cfg: PipelineConfig, out_dir: str, jobs: int, oracle_choice: str | None = None):
    """Build or load the PDT table for the configured model set.

    Returns (table, cache_hit, key, oracle_calls_this_run).
    """
    models = _load_models(cfg)
    boxes = _resolve_domain(cfg, models)
    oracle = _build_oracle(cfg, oracle_choice)
    sel = cfg.selection
    key = cache_key(models, cfg.distance, boxes, sel.m_cap, sel.epsilon, oracle.oracle_id)
    cache_dir = os.path.join(out_dir, "cache")
    os.makedirs(cache_dir, exist_ok=True)
    cache_path = os.path.join(cache_dir, f"pdt-{key[:16]}.json")
    if os.path.exists(cache_path):
        with open(cache_path, "r", encoding="utf-8") as fh:
            stored = json.load(fh)
        if stored.get("key") == key:
            log.info("PDT cache hit: %s", cache_path)
            return PdtTable.from_json(stored["table"]), True, key, 0
        log.info("PDT cache stale (key changed), recomputing")
    table = pdt_table(models, cfg.distance, boxes, sel.m_cap, sel.epsilon, oracle, jobs=jobs)
    write_atomic(cache_path, _dump({"key": key, "table": table.to_json()}))
    return table, False, key, table.oracle_calls


def cmd_train(cfg: PipelineConfig, out_dir: str, jobs: int) -> int:
    if cfg.benchmark is None:
        raise ConfigError("cmd_train needs 'benchmark'")
    section = dict(cfg.train or {})
    tc_raw = section.pop("train_config", None)
    try:
        train_cfg = TrainConfig(**tc_raw) if tc_raw else None
    except TypeError as exc:
        raise ConfigError(f"bad train_config: {exc}") from exc
    allowed = {"n_good", "n_bad", "divergence_target", "rejection_budget", "eval_episodes"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    env_cfg = env_preset(f"{cfg.benchmark}-indist", seed=cfg.seed)
    fixtures = make_fixture_set(env_cfg, seed=cfg.seed, train_config=train_cfg, **section)
    model_dir = os.path.join(out_dir, "models")
    os.makedirs(model_dir, exist_ok=True)
    for mid, net in fixtures.networks.items():
        save_network(net, os.path.join(model_dir, f"{mid}.json"))
    report = {
        "command": "train",
        "config": resolved_config(cfg),
        "fixtures": fixtures.manifest,
        "model_dir": model_dir,
    }
    write_atomic(os.path.join(out_dir, "train-manifest.json"), _dump(report))
    for mid in fixtures.networks:
        print(f"trained {mid}: in-dist mean {fixtures.manifest['models'][mid]['in_dist_mean']:.1f}")
    for mid in fixtures.manifest["skipped_bad"]:
        print(f"skipped {mid}: rejection budget exhausted")
    print(f"wrote {len(fixtures.networks)} models to {model_dir}")
    return EXIT_OK


def cmd_pdt(cfg: PipelineConfig, out_dir: str, jobs: int) -> int:
    table, hit, key, calls = _compute_table(cfg, out_dir, jobs)
    report = {
        "command": "pdt",
        "config": resolved_config(cfg),
        "cache_key": key,
        "cache_hit": hit,
        "oracle_calls": calls,
        "model_ids": list(table.model_ids),
        "values": [[float(x) for x in row] for row in table.values],
        "events": list(table.events),
    }
    write_atomic(os.path.join(out_dir, "pdt-report.json"), _dump(report))
    print(f"pdt table over {len(table.model_ids)} models "
          f"({'cache hit' if hit else f'{calls} oracle calls'})")
    width = max(len(m) for m in table.model_ids)
    for mid, row in zip(table.model_ids, table.values):
        print(f"  {mid:<{width}} " + " ".join(f"{v:7.3f}" for v in row))
    return EXIT_OK


def cmd_select(cfg: PipelineConfig, out_dir: str, jobs: int) -> int:
    table, hit, key, calls = _compute_table(cfg, out_dir, jobs)
    survivors, trace = select(list(table.model_ids), cfg.selection, table)
    report = {
        "command": "select",
        "config": resolved_config(cfg),
        "cache_key": key,
        "cache_hit": hit,
        "oracle_calls": calls,
        "survivors": survivors,
        "terminated": trace.terminated,
    }
    write_atomic(os.path.join(out_dir, "survivors.json"), _dump(report))
    write_atomic(
        os.path.join(out_dir, "selection-trace.json"),
        _dump({"config": resolved_config(cfg), "trace": trace.to_json()}),
    )
    print(trace.to_text(), end="")
    for mid in survivors:
        print(f"survivor: {mid}")
    return EXIT_OK


def _ood_mean(net: Network, benchmark: str, episodes: int, seed: int) -> float:
    """Mean OOD reward; cartpole splits episodes over both platform sides."""
    if benchmark == "cartpole":
        left = (episodes + 1) // 2
        right = episodes - left
        total = rollout(net, env_preset("cartpole-ood-left"), left, _seed_from(seed, "left")).mean_reward * left
        if right:
            total += rollout(net, env_preset("cartpole-ood-right"), right, _seed_from(seed, "right")).mean_reward * right
        return total / episodes
    return rollout(net, env_preset("mountaincar-ood"), episodes, _seed_from(seed, "ood")).mean_reward


def cmd_eval(cfg: PipelineConfig, out_dir: str, jobs: int) -> int:
    if cfg.benchmark is None:
        raise ConfigError("cmd_eval needs 'benchmark'")
    models = _load_models(cfg)
    indist = env_preset(f"{cfg.benchmark}-indist")
    rows = []
    for mid, net in models.items():
        in_mean = rollout(net, indist, cfg.eval_episodes, _seed_from(cfg.seed, mid, "in")).mean_reward
        ood_mean = _ood_mean(net, cfg.benchmark, cfg.eval_episodes, _seed_from(cfg.seed, mid))
        rows.append((mid, in_mean, ood_mean, classify(ood_mean, cfg.benchmark)))
    lines = ["model_id,in_dist_mean,ood_mean,label"]
    lines += [f"{mid},{in_mean!r},{ood!r},{label}" for mid, in_mean, ood, label in rows]
    write_atomic(os.path.join(out_dir, "rewards.csv"), "\n".join(lines) + "\n")
    report = {
        "command": "eval",
        "config": resolved_config(cfg),
        "rows": [
            {"model_id": mid, "in_dist_mean": in_mean, "ood_mean": ood, "label": label}
            for mid, in_mean, ood, label in rows
        ],
    }
    write_atomic(os.path.join(out_dir, "eval-report.json"), _dump(report))
    for line in lines:
        print(line)
    return EXIT_OK


COMPARE_STATUSES = ("ALIGNED", "UNTIGHTENED", "FAILED")


def _event_index(events, wanted: str) -> set[tuple]:
    out = set()
    for e in events:
        if e.get("event") == wanted and "category" in e:
            out.add((tuple(e["pair"]), e["box"], e["category"]))
    return out


def cmd_compare(cfg: PipelineConfig, out_dir: str, jobs: int) -> int:
    """Verifier vs attack PDTs on the same pairs, Table-10 style statuses."""
    ver_table, _, ver_key, _ = _compute_table(cfg, out_dir, jobs, oracle_choice="verifier")
    attack_choice = cfg.oracle if cfg.oracle != "verifier" else {
        "fgsm": "fgsm", "pgd": "pgd", "cpgd": "constrained-pgd"}[cfg.attack.kind]
    atk_table, _, atk_key, _ = _compute_table(cfg, out_dir, jobs, oracle_choice=attack_choice)

    certified_empty = _event_index(ver_table.events, "empty")
    no_feasible = _event_index(atk_table.events, "no-feasible-point")
    failed_pairs = {pk for pk, bi, cat in no_feasible if (pk, bi, cat) not in certified_empty}

    ids = ver_table.model_ids
    pairs = []
    counts = dict.fromkeys(COMPARE_STATUSES, 0)
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            v = float(ver_table.values[i, j])
            a = float(atk_table.values[i, j])
            pk = (ids[i], ids[j])
            if pk in failed_pairs or a > v:
                status = "FAILED"
                if a > v:
                    log.warning("attack PDT %.6g above verifier PDT %.6g for %s", a, v, pk)
            elif a == v:
                status = "ALIGNED"
            else:
                status = "UNTIGHTENED"
            counts[status] += 1
            pairs.append(
                {"a": ids[i], "b": ids[j], "verifier_pdt": v, "attack_pdt": a, "status": status}
            )
    report = {
        "command": "compare",
        "config": resolved_config(cfg),
        "attack_oracle": attack_choice,
        "verifier_cache_key": ver_key,
        "attack_cache_key": atk_key,
        "pairs": pairs,
        "counts": counts,
    }
    write_atomic(os.path.join(out_dir, "compare-report.json"), _dump(report))
    for p in pairs:
        print(f"{p['a']} vs {p['b']}: verifier {p['verifier_pdt']:g} "
              f"attack {p['attack_pdt']:g} {p['status']}")
    for status in COMPARE_STATUSES:
        print(f"# {status}: {counts[status]}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "pdt": cmd_pdt,
    "select": cmd_select,
    "eval": cmd_eval,
    "compare": cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="verisel",
        description="Score and filter policy networks by provable pairwise disagreement.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--output", default=None, help="override output directory")
    return parser


def main(argv=None) -> int:
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed, attack=replace(cfg.attack, seed=args.seed))
        out_dir = args.output or cfg.output_dir
        os.makedirs(out_dir, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir, max(1, args.jobs))
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except BudgetExhausted as exc:
        print(f"error: verification budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, NetworkError, VerifierError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except Exception as exc:  # pragma: no cover - last-resort diagnostic
        log.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
