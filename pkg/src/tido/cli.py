"""Command-line front door: foresight runs, increment streams, sweeps.

Configuration is a single JSON document overlaid on the defaults below,
with environment overrides of the form TIDO_<UPPER_PATH> (path segments
joined by underscores, matched against the config tree) and flags on
top: flags > environment > file. Run directories are content-addressed
by (config hash, seed) so two different configurations can never
silently overwrite each other.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 partially failed sweep.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys

import numpy as np

from .datagen import (
    LabeledSet,
    build_stream,
    count_steps,
    load_csv,
    load_step,
    save_stream,
    standard_shift,
    standard_stream,
)
from .exceptions import GenerationError, TrainingDiverged
from .foresight import (
    ForesightConfig,
    load_foresight_checkpoint,
    save_foresight_checkpoint,
    train_foresight,
)
from .incremental import (
    IncrementConfig,
    load_increment_checkpoint,
    new_state,
    run_increment,
    save_increment_checkpoint,
    write_epoch_log,
)
from .metrics import (
    BoundReport,
    History,
    IncrementRecord,
    ProbeConfig,
    bound_report,
    evaluate,
    h_distance_proxy,
    source_only_accuracy,
    source_proxy_risk,
    target_risk,
    write_metrics_csv,
)
from .rng import child_seed

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "mode": "stream",
    "seed": 0,
    "out": "runs",
    "checkpoint": None,
    "increment_step": None,
    "data": {
        "kind": "synthetic",
        "synthetic": {
            "dim": 2,
            "steps": 3,
            "shared_per_step": 4,
            "private_per_step": 2,
            "samples_per_class": 200,
            "sigma": 0.18,
            "rotation_deg": 15.0,
            "translation": 0.5,
            "scale": 1.0,
            "noise_sigma": 0.0,
            "private_sample_ratio": 1.0,
            "source_on_all_steps": True,
            "save_stream": False,
        },
        "csv": {"stream_dir": None, "source_path": None},
    },
    "foresight": {
        "latent_dim": 2,
        "hidden": [32],
        "classifier_hidden": [32],
        "epochs": 120,
        "batch_size": 64,
        "learning_rate": 5e-3,
        "neg_ratio": 1.0,
        "k_sigma": 3.0,
        "separability_loss": True,
    },
    "increment": {
        "epochs": 60,
        "learning_rate": 5e-3,
        "confident_fraction": 0.5,
        "proxy_per_class": 64,
        "ae_hidden": [],
        "ae_pretrain_epochs": 40,
        "ae_learning_rate": 1e-2,
        "disc_hidden": [16],
        "gt_hidden": [],
    },
    "bounds": {
        "delta": 0.05,
        "probe_hidden": 8,
        "probe_epochs": 40,
        "probe_lr": 5e-3,
        "latent_dump_per_class": 100,
    },
    "sweep": {"axis": None, "grid": None},
}

SWEEP_AXES = {
    "k_sigma": (("foresight", "k_sigma"), [1.0, 2.0, 3.0, 4.0, 5.0]),
    "ratio": (("foresight", "neg_ratio"), [0.5, 1.0, 1.5]),
    "one_shot_ratio": (("data", "synthetic", "private_sample_ratio"), [0.25, 0.5, 1.0]),
    "separability": (("foresight", "separability_loss"), [True, False]),
}

MODES = ("foresight", "increment", "stream", "sweep")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration resolution


def _deep_merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in overlay.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config field: {here}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(base[key], value, here)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_env_path(node: dict, tokens: list, raw: str, origin: str) -> bool:
    """Greedy longest-key match of underscore-joined tokens into the tree."""
    for cut in range(len(tokens), 0, -1):
        key = "_".join(tokens[:cut])
        if key in node:
            if cut == len(tokens):
                node[key] = _parse_env_value(raw)
                return True
            if isinstance(node[key], dict) and _apply_env_path(
                node[key], tokens[cut:], raw, origin
            ):
                return True
    return False


def apply_env_overrides(cfg: dict, environ) -> None:
    for name, raw in sorted(environ.items()):
        if not name.startswith("TIDO_"):
            continue
        tokens = name[len("TIDO_") :].lower().split("_")
        if not _apply_env_path(cfg, tokens, raw, name):
            raise ConfigError(f"environment override {name} matches no config field")


def resolve_config(config_path=None, environ=None, flags=None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = _deep_merge(cfg, user)
    if environ is not None:
        apply_env_overrides(cfg, environ)
    for key, value in (flags or {}).items():
        if value is None:
            continue
        if key == "sweep_axis":
            cfg["sweep"]["axis"] = value
        else:
            cfg[key] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg['mode']!r}")
    kind = cfg["data"]["kind"]
    if kind not in ("synthetic", "csv"):
        raise ConfigError(f"data.kind must be 'synthetic' or 'csv', got {kind!r}")
    if kind == "csv":
        if cfg["mode"] == "foresight":
            if not (cfg["data"]["csv"]["source_path"] or cfg["data"]["csv"]["stream_dir"]):
                raise ConfigError("missing field: data.csv.source_path (or data.csv.stream_dir)")
        elif not cfg["data"]["csv"]["stream_dir"]:
            raise ConfigError("missing field: data.csv.stream_dir")
    if cfg["mode"] == "sweep":
        axis = cfg["sweep"]["axis"]
        if axis is None:
            raise ConfigError("sweep mode requires exactly one sweep.axis")
        if axis not in SWEEP_AXES:
            raise ConfigError(f"sweep.axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    if cfg["mode"] == "increment" and not cfg["checkpoint"]:
        raise ConfigError("missing field: checkpoint (increment mode needs a prior run)")
    if int(cfg["seed"]) < 0:
        raise ConfigError("seed must be a non-negative integer")


def hashable_config(cfg: dict) -> dict:
    """The resolved config without its output location."""
    doc = copy.deepcopy(cfg)
    doc.pop("out", None)
    return doc


def config_hash(cfg: dict) -> str:
    doc = json.dumps(hashable_config(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(doc.encode()).hexdigest()[:12]


def make_run_dir(cfg: dict) -> str:
    run_dir = os.path.join(cfg["out"], f"{cfg['mode']}-{config_hash(cfg)}-s{int(cfg['seed'])}")
    if os.path.exists(run_dir):
        raise ConfigError(f"run directory already exists: {run_dir}")
    os.makedirs(run_dir)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(hashable_config(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return run_dir


# ---------------------------------------------------------------------------
# config -> module configs


def foresight_config(cfg: dict, seed: int) -> ForesightConfig:
    f = cfg["foresight"]
    return ForesightConfig(
        latent_dim=int(f["latent_dim"]),
        hidden=tuple(f["hidden"]),
        classifier_hidden=tuple(f["classifier_hidden"]),
        epochs=int(f["epochs"]),
        batch_size=int(f["batch_size"]),
        learning_rate=float(f["learning_rate"]),
        neg_ratio=float(f["neg_ratio"]),
        seed=seed,
        k_sigma=float(f["k_sigma"]),
        separability_loss=bool(f["separability_loss"]),
    )


def increment_config(cfg: dict, seed: int) -> IncrementConfig:
    i = cfg["increment"]
    return IncrementConfig(
        epochs=int(i["epochs"]),
        learning_rate=float(i["learning_rate"]),
        confident_fraction=float(i["confident_fraction"]),
        proxy_per_class=int(i["proxy_per_class"]),
        ae_hidden=tuple(i["ae_hidden"]),
        ae_pretrain_epochs=int(i["ae_pretrain_epochs"]),
        ae_learning_rate=float(i["ae_learning_rate"]),
        disc_hidden=tuple(i["disc_hidden"]),
        gt_hidden=tuple(i["gt_hidden"]),
        seed=seed,
        refresh=foresight_config(cfg, child_seed(seed, "refresh")),
    )


def probe_config(cfg: dict, seed: int) -> ProbeConfig:
    b = cfg["bounds"]
    return ProbeConfig(
        hidden=int(b["probe_hidden"]),
        epochs=int(b["probe_epochs"]),
        learning_rate=float(b["probe_lr"]),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# data assembly


def synthetic_stream(cfg: dict):
    s = cfg["data"]["synthetic"]
    dim = int(s["dim"])
    shift = standard_shift(dim)
    shift.rotation_deg = float(s["rotation_deg"])
    t = np.zeros(dim)
    t[:2] = float(s["translation"]) / np.sqrt(2.0)
    shift.translation = t
    shift.scale = float(s["scale"])
    shift.noise_sigma = float(s["noise_sigma"])
    schedule, spec = standard_stream(
        seed=int(cfg["seed"]),
        n_steps=int(s["steps"]),
        shared_per_step=int(s["shared_per_step"]),
        private_per_step=int(s["private_per_step"]),
        samples_per_class=int(s["samples_per_class"]),
        dim=dim,
        sigma=float(s["sigma"]),
        shift=shift,
        private_sample_ratio=float(s["private_sample_ratio"]),
        source_on_all_steps=bool(s["source_on_all_steps"]),
    )
    return build_stream(schedule, spec)


def load_stream_data(cfg: dict):
    if cfg["data"]["kind"] == "synthetic":
        return synthetic_stream(cfg)
    stream_dir = cfg["data"]["csv"]["stream_dir"]
    n = count_steps(stream_dir)
    if n == 0:
        raise ConfigError(f"data.csv.stream_dir has no step_<t> directories: {stream_dir}")
    bundles, evals = [], []
    for t in range(n):
        b, e = load_step(stream_dir, t)
        bundles.append(b)
        evals.append(e)
    return bundles, evals


# ---------------------------------------------------------------------------
# run pipelines


def run_stream(cfg: dict, run_dir: str) -> dict:
    """Foresight on step 0's source, then one increment per step.

    Writes per-step checkpoints, the metrics CSV, bound reports and a
    consolidated report.json. Returns the report dict.
    """
    seed = int(cfg["seed"])
    bundles, evals = load_stream_data(cfg)
    if bundles[0].source is None or len(bundles[0].source) == 0:
        raise ConfigError("step 0 must carry labeled source data for the foresight stage")
    if cfg["data"]["kind"] == "synthetic" and cfg["data"]["synthetic"]["save_stream"]:
        save_stream(os.path.join(run_dir, "stream"), bundles, evals)

    fcfg = foresight_config(cfg, child_seed(seed, "foresight"))
    model, ps, fhist, class_ids = train_foresight(
        bundles[0].source.features, bundles[0].source.labels, fcfg
    )
    save_foresight_checkpoint(os.path.join(run_dir, "foresight"), model, ps, fhist, class_ids)

    icfg = increment_config(cfg, child_seed(seed, "increment"))
    state = new_state(model, ps, class_ids, icfg)

    dump_per_class = int(cfg["bounds"]["latent_dump_per_class"])
    history = History()
    eval_reports, records, steps_out = [], [], []
    mean_forgetting: dict = {}
    failure = None
    for t, bundle in enumerate(bundles):
        ev = evals[t]
        if ev is None:
            raise ConfigError(f"step {t} has no target_eval.csv; evaluation is impossible")
        pre_eps_t = target_risk(state, ev.features, ev.labels)
        if bundle.source is not None and len(bundle.source):
            pre_eps_s = target_risk(state, bundle.source.features, bundle.source.labels)
        else:
            pre_eps_s = source_proxy_risk(state, 64, child_seed(seed, "pre-src-risk", t))
        new_source = bundle.source if t > 0 else None
        try:
            state, inc_report = run_increment(
                state, bundle.target_features, bundle.one_shot, icfg, new_source=new_source
            )
        except (TrainingDiverged, GenerationError) as exc:
            failure = f"step {t}: {exc}"
            log.error("stream stopped: %s", failure)
            break
        step_dir = os.path.join(run_dir, f"step_{t:02d}")
        save_increment_checkpoint(step_dir, state)
        write_epoch_log(os.path.join(step_dir, "epoch_log.csv"), inc_report.epochs)

        post_eps_t = target_risk(state, ev.features, ev.labels)
        if bundle.source is not None and len(bundle.source):
            post_eps_s = target_risk(state, bundle.source.features, bundle.source.labels)
        else:
            post_eps_s = source_proxy_risk(state, 64, child_seed(seed, "post-src-risk", t))
        src_lat = state.source_latents(dump_per_class, child_seed(seed, "dump", t))
        tgt_lat = state.target_latents(bundle.target_features)
        d_hat = h_distance_proxy(src_lat, tgt_lat, probe_config(cfg, child_seed(seed, "probe", t)))
        records.append(
            IncrementRecord(
                step=t,
                pre_eps_s=pre_eps_s,
                pre_eps_t=pre_eps_t,
                post_eps_s=post_eps_s,
                post_eps_t=post_eps_t,
                d_hat=d_hat,
                m_prime=min(src_lat.shape[0], tgt_lat.shape[0]),
                n_params=state.n_params(),
            )
        )
        cum_x = np.concatenate([e.features for e in evals[: t + 1]], axis=0)
        cum_y = np.concatenate([e.labels for e in evals[: t + 1]])
        rep = evaluate(state, cum_x, cum_y, step=t, history=history)
        eval_reports.append(rep)
        mean_forgetting[t] = (
            float(np.mean(list(rep.forgetting.values()))) if rep.forgetting else None
        )
        steps_out.append(
            {
                "step": t,
                "all_acc": rep.all_acc,
                "priv_acc": rep.priv_acc,
                "shared_acc": rep.shared_acc,
                "baseline_shared_acc": source_only_accuracy(state, cum_x, cum_y),
                "forgetting_mean": mean_forgetting[t],
                "new_shared": inc_report.new_shared,
                "new_private": inc_report.new_private,
            }
        )

    bounds = bound_report(records, float(cfg["bounds"]["delta"])) if records else None
    if bounds is not None:
        bounds.save(os.path.join(run_dir, "bounds.json"))
    write_metrics_csv(os.path.join(run_dir, "metrics.csv"), eval_reports, bounds, mean_forgetting)
    report = {
        "format": "stream-report/v1",
        "config_hash": config_hash(cfg),
        "seed": seed,
        "steps": steps_out,
        "bounds": bounds.to_json_dict() if bounds else None,
        "failure": failure,
    }
    with open(os.path.join(run_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def cmd_foresight(cfg: dict) -> int:
    run_dir = make_run_dir(cfg)
    if cfg["data"]["kind"] == "synthetic":
        bundles, _ = synthetic_stream(cfg)
        source = bundles[0].source
    else:
        path = cfg["data"]["csv"]["source_path"]
        if path:
            source = load_csv(path)
        else:
            bundle, _ = load_step(cfg["data"]["csv"]["stream_dir"], 0)
            source = bundle.source
    if source is None or len(source) == 0:
        print("error: no labeled source data found", file=sys.stderr)
        return 2
    fcfg = foresight_config(cfg, child_seed(int(cfg["seed"]), "foresight"))
    try:
        model, ps, hist, class_ids = train_foresight(source.features, source.labels, fcfg)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    save_foresight_checkpoint(run_dir, model, ps, hist, class_ids)
    print(run_dir)
    return 0


def cmd_stream(cfg: dict) -> int:
    run_dir = make_run_dir(cfg)
    try:
        report = run_stream(cfg, run_dir)
    except (TrainingDiverged, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(run_dir)
    return 0 if report["failure"] is None else 3


def cmd_increment(cfg: dict) -> int:
    run_dir = make_run_dir(cfg)
    ckpt = cfg["checkpoint"]
    seed = int(cfg["seed"])
    icfg = increment_config(cfg, child_seed(seed, "increment"))
    if os.path.exists(os.path.join(ckpt, "registry.json")):
        state = load_increment_checkpoint(ckpt)
    else:
        model, ps, class_ids = load_foresight_checkpoint(ckpt)
        state = new_state(model, ps, class_ids, icfg)
    step = int(cfg["increment_step"]) if cfg["increment_step"] is not None else state.step
    bundle, ev = load_step(cfg["data"]["csv"]["stream_dir"], step)
    try:
        state, inc_report = run_increment(
            state, bundle.target_features, bundle.one_shot, icfg, new_source=bundle.source
        )
    except (TrainingDiverged, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    save_increment_checkpoint(run_dir, state)
    write_epoch_log(os.path.join(run_dir, "epoch_log.csv"), inc_report.epochs)
    if ev is not None:
        rep = evaluate(state, ev.features, ev.labels, step=step)
        with open(os.path.join(run_dir, "eval.json"), "w") as fh:
            json.dump(rep.to_json_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(run_dir)
    return 0


def _set_path(cfg: dict, path: tuple, value) -> None:
    node = cfg
    for key in path[:-1]:
        node = node[key]
    node[path[-1]] = value


def cmd_sweep(cfg: dict) -> int:
    axis = cfg["sweep"]["axis"]
    path, default_grid = SWEEP_AXES[axis]
    grid = cfg["sweep"]["grid"] if cfg["sweep"]["grid"] is not None else default_grid
    if not grid:
        print("error: sweep.grid is empty", file=sys.stderr)
        return 2
    run_dir = make_run_dir(cfg)
    rows = []
    any_failed = False
    for i, value in enumerate(grid):
        point_cfg = copy.deepcopy(cfg)
        point_cfg["mode"] = "stream"
        _set_path(point_cfg, path, value)
        point_dir = os.path.join(run_dir, f"point_{i:02d}")
        os.makedirs(point_dir)
        with open(os.path.join(point_dir, "config.json"), "w") as fh:
            json.dump(hashable_config(point_cfg), fh, indent=2, sort_keys=True)
            fh.write("\n")
        try:
            report = run_stream(point_cfg, point_dir)
            if report["failure"] is not None:
                raise TrainingDiverged(report["failure"])
            last = report["steps"][-1]
            rows.append(
                {
                    "value": value,
                    "status": "ok",
                    "all_acc": last["all_acc"],
                    "priv_acc": last["priv_acc"],
                }
            )
        except (TrainingDiverged, GenerationError, ConfigError) as exc:
            log.error("sweep point %s=%r failed: %s", axis, value, exc)
            rows.append({"value": value, "status": "failed", "all_acc": None, "priv_acc": None})
            any_failed = True
    with open(os.path.join(run_dir, "summary.csv"), "w") as fh:
        fh.write(f"{axis},status,all_acc,priv_acc\n")
        for r in rows:
            acc = "" if r["all_acc"] is None else repr(r["all_acc"])
            priv = "" if r["priv_acc"] is None else repr(r["priv_acc"])
            fh.write(f"{r['value']},{r['status']},{acc},{priv}\n")
    with open(os.path.join(run_dir, "sweep_report.json"), "w") as fh:
        json.dump(
            {"format": "sweep-report/v1", "axis": axis, "rows": rows}, fh, indent=2, sort_keys=True
        )
        fh.write("\n")
    print(run_dir)
    return 4 if any_failed else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="tido",
        description="Source-free task-incremental learning runner",
    )
    parser.add_argument("--config", help="path to a JSON config document")
    parser.add_argument("--seed", type=int, help="run seed (64-bit)")
    parser.add_argument("--out", help="output root directory")
    parser.add_argument("--mode", choices=MODES, help="what to run")
    parser.add_argument("--sweep-axis", dest="sweep_axis", choices=sorted(SWEEP_AXES))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(
            config_path=args.config,
            environ=os.environ,
            flags={
                "seed": args.seed,
                "out": args.out,
                "mode": args.mode,
                "sweep_axis": args.sweep_axis,
            },
        )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if cfg["mode"] == "foresight":
            return cmd_foresight(cfg)
        if cfg["mode"] == "stream":
            return cmd_stream(cfg)
        if cfg["mode"] == "increment":
            return cmd_increment(cfg)
        return cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
