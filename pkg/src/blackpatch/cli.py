"""Command-line entry point.

Subcommands: ``attack`` (patch optimization), ``baseline`` (random-search
comparison), ``eval`` (score a saved patch on a test set), ``defend-sim``
(attack a detector-wrapped oracle), ``export-curve`` (queries-vs-best
staircase from a run log), and ``serve-echo`` (trivial wire-protocol echo
server for client self-tests).

Runs are configured by a JSON file; unknown keys are rejected by name and
omitted keys take the method defaults, which the summary file echoes in
full so a run is reproducible from its summary alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attack import PatchAttack, center_location, evaluate_patch
from .baseline import RandomSearchAttack
from .defense import DefendedOracle, DetectorConfig, QueryFingerprintDetector, RandomizedOracle
from .oracles import QueryBudgetExceeded, SampleSet, make_synthetic_oracle
from .remote import ProtocolError, RemoteOracle, ServiceError, TransportError
from .runlog import LogError, export_curve, read_log
from .tensor import read_ppm, write_ppm

__all__ = ["ConfigError", "load_config", "load_sample_set", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ORACLE = 3
EXIT_BUDGET = 4


class ConfigError(ValueError):
    pass


ORACLE_SCHEMA = {
    "kind": "blur-depth",
    "seed": 0,
    "precision": "double",
    "endpoint": None,
    "timeout": 30.0,
    "delay": 0.0,
}

DEFENSE_SCHEMA = {
    "enabled": False,
    "noise": 0.05,
    "noise_seed": 99,
    "quant_levels": 32,
    "window": 64,
    "stride": 32,
    "n_hashes": 50,
    "match_threshold": 25,
}

CONFIG_SCHEMA = {
    "method": "square-gradient",
    "oracle": dict(ORACLE_SCHEMA),
    "defense": dict(DEFENSE_SCHEMA),
    "train_dir": None,
    "val_dir": None,
    "test_dir": None,
    "patch_side": 16,
    "location": None,
    "positions": None,
    "max_iters": 10000,
    "max_steps": 50,
    "n_probes": 20,
    "noise_bound": 0.1,
    "noise_decay": 0.98,
    "max_stale_steps": 1,
    "max_stale_iters": 1,
    "uniform_warmup": 100,
    "init_area_frac": 0.025,
    "size_milestones": [100, 500, 1500, 3000, 5000, 10000],
    "learning_rate": 0.1,
    "beta1": 0.5,
    "beta2": 0.5,
    "adam_eps": 1e-8,
    "objective": "footprint",
    "use_score_norm": True,
    "use_adaptive_scale": True,
    "use_prob_sampling": True,
    "query_budget": None,
    "val_subsample": None,
    "seed": 0,
    "threads": 1,
}


def _merge_schema(schema, raw, path):
    merged = {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {path + key!r}")
    for key, default in schema.items():
        if key in raw and isinstance(default, dict) and default:
            if not isinstance(raw[key], dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            merged[key] = _merge_schema(default, raw[key], path + key + ".")
        elif key in raw:
            merged[key] = raw[key]
        else:
            merged[key] = default
    return merged


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = _merge_schema(CONFIG_SCHEMA, raw, "")
    if cfg["method"] not in ("square-gradient", "random-search"):
        raise ConfigError(f"unknown method {cfg['method']!r}")
    if cfg["objective"] not in ("footprint", "full"):
        raise ConfigError(f"unknown objective {cfg['objective']!r}")
    return cfg


def load_sample_set(directory, role, frames):
    """Load a sample set from a directory of PPM files, lexicographically.

    Two-frame (flow) sets pair ``<name>_a.ppm`` with ``<name>_b.ppm``.
    """
    if not os.path.isdir(directory):
        raise IOError(f"sample directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".ppm"))
    if frames == 2:
        samples = []
        for name in names:
            if not name.endswith("_a.ppm"):
                continue
            partner = name[: -len("_a.ppm")] + "_b.ppm"
            if partner not in names:
                raise IOError(f"flow sample {name} is missing its second frame {partner}")
            samples.append((read_ppm(os.path.join(directory, name)),
                            read_ppm(os.path.join(directory, partner))))
    else:
        samples = [read_ppm(os.path.join(directory, n)) for n in names]
    if not samples:
        raise IOError(f"no PPM samples found in {directory}")
    return SampleSet(samples, role)


def build_oracle(cfg):
    choice = cfg["oracle"]
    if choice["endpoint"]:
        return RemoteOracle(choice["endpoint"], timeout=choice["timeout"],
                            delay=choice["delay"])
    return make_synthetic_oracle(choice["kind"], seed=choice["seed"],
                                 precision=choice["precision"])


def _estimator_params(cfg, log_path):
    keys = ("patch_side", "location", "positions", "max_iters", "max_steps",
            "n_probes", "noise_bound", "noise_decay", "max_stale_steps",
            "max_stale_iters", "uniform_warmup", "init_area_frac",
            "learning_rate", "beta1", "beta2", "adam_eps", "objective",
            "use_score_norm", "use_adaptive_scale", "use_prob_sampling",
            "query_budget", "val_subsample", "seed", "threads")
    params = {k: cfg[k] for k in keys}
    params["size_milestones"] = tuple(cfg["size_milestones"])
    params["log_path"] = log_path
    return params


def _write_summary(out_dir, payload):
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.budget is not None:
        cfg["query_budget"] = args.budget
    if args.threads is not None:
        cfg["threads"] = args.threads
    return cfg


def _run_attack(cfg, out_dir, defended=False):
    os.makedirs(out_dir, exist_ok=True)
    oracle = build_oracle(cfg)
    detector = None
    if defended or cfg["defense"]["enabled"]:
        d = cfg["defense"]
        detector = QueryFingerprintDetector(DetectorConfig(
            quant_levels=d["quant_levels"], window=d["window"], stride=d["stride"],
            n_hashes=d["n_hashes"], match_threshold=d["match_threshold"]))
        oracle = DefendedOracle(oracle, detector)
        if d["noise"] > 0:
            oracle = RandomizedOracle(oracle, d["noise"],
                                      np.random.default_rng(d["noise_seed"]))

    frames = oracle.frames_per_sample
    if cfg["train_dir"] is None or cfg["val_dir"] is None:
        raise ConfigError("train_dir and val_dir are required")
    train = load_sample_set(cfg["train_dir"], "train", frames)
    val = load_sample_set(cfg["val_dir"], "val", frames)

    log_path = os.path.join(out_dir, "run.log")
    if cfg["method"] == "random-search":
        est = RandomSearchAttack(
            patch_side=cfg["patch_side"], location=cfg["location"],
            max_iters=cfg["max_iters"], init_area_frac=cfg["init_area_frac"],
            size_milestones=tuple(cfg["size_milestones"]),
            objective=cfg["objective"], query_budget=cfg["query_budget"],
            val_subsample=cfg["val_subsample"], seed=cfg["seed"],
            threads=cfg["threads"], log_path=log_path)
    else:
        est = PatchAttack(**_estimator_params(cfg, log_path))

    est.fit(oracle, train, val)

    write_ppm(os.path.join(out_dir, "best_patch.ppm"), est.best_patch_)
    write_ppm(os.path.join(out_dir, "final_patch.ppm"), est.patch_)
    summary = {
        "method": cfg["method"],
        "best_omega": est.best_score_,
        "final_omega": est.history_[-1].omega if est.history_ else None,
        "total_queries": est.n_queries_,
        "records": len(est.history_),
        "decay_events": getattr(est, "decay_events_", 0),
        "final_epsilon": getattr(est, "epsilon_", None),
        "config": cfg,
    }
    if detector is not None:
        summary["defense"] = {
            "queries_seen": len(detector),
            "detections": detector.detections,
            "detection_rate": detector.detection_rate,
        }
    path = _write_summary(out_dir, summary)
    print(f"best omega* {est.best_score_:.6g} after {est.n_queries_} queries")
    print(f"summary written to {path}")
    return EXIT_OK


def cmd_attack(args):
    cfg = _apply_overrides(load_config(args.config), args)
    return _run_attack(cfg, args.out)


def cmd_baseline(args):
    cfg = _apply_overrides(load_config(args.config), args)
    cfg["method"] = "random-search"
    return _run_attack(cfg, args.out)


def cmd_defend_sim(args):
    cfg = _apply_overrides(load_config(args.config), args)
    cfg["defense"]["enabled"] = True
    return _run_attack(cfg, args.out, defended=True)


def cmd_eval(args):
    cfg = _apply_overrides(load_config(args.config), args)
    patch = read_ppm(args.patch)
    if patch.shape[-1] != cfg["patch_side"] or patch.shape[-2] != cfg["patch_side"]:
        raise ConfigError(
            f"patch is {patch.shape[-2]}x{patch.shape[-1]}, config expects "
            f"{cfg['patch_side']}x{cfg['patch_side']}"
        )
    oracle = build_oracle(cfg)
    test_dir = cfg["test_dir"] or cfg["val_dir"]
    if test_dir is None:
        raise ConfigError("test_dir (or val_dir) is required for eval")
    test = load_sample_set(test_dir, "test", oracle.frames_per_sample)
    if cfg["positions"]:
        positions = [tuple(p) for p in cfg["positions"]]
    elif cfg["location"]:
        positions = [tuple(cfg["location"])]
    else:
        positions = [center_location(test.height, test.width)]
    score = evaluate_patch(oracle, patch, test, positions,
                           objective=cfg["objective"], threads=cfg["threads"])
    print(f"{score!r}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_summary(args.out, {"patch": args.patch, "mean_error": score,
                                  "config": cfg})
    return EXIT_OK


def cmd_export_curve(args):
    records = read_log(args.log)
    text = export_curve(records)
    if args.out:
        with open(args.out, "w", encoding="ascii") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_serve_echo(args):
    from .echo_server import serve_echo

    serve_echo(args.host, args.port)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="blackpatch",
        description="Black-box adversarial patch attacks on pixel-wise regression models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, help="override config threads")
        p.add_argument("--budget", type=int, help="override query budget")

    p = sub.add_parser("attack", help="run the patch attack")
    common(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("baseline", help="run the random-search baseline")
    common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="score a saved patch on the test set")
    common(p)
    p.add_argument("--patch", required=True, help="patch PPM file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("defend-sim", help="attack a detector-wrapped oracle")
    common(p)
    p.set_defaults(func=cmd_defend_sim)

    p = sub.add_parser("export-curve", help="emit the (queries, omega*) staircase")
    p.add_argument("--log", required=True, help="run log file")
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_export_curve)

    p = sub.add_parser("serve-echo", help="run the wire-protocol echo server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="0 picks a free port")
    p.set_defaults(func=cmd_serve_echo)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) in (cmd_attack, cmd_baseline, cmd_defend_sim) and not args.out:
        print("error: --out is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LogError as exc:
        print(f"log error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ServiceError, TransportError, ProtocolError) as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except QueryBudgetExceeded as exc:
        print(f"budget exhausted before initialization: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (IOError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
