"""``diffcast`` command line: synth, train, forecast, eval, plot.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Hyperparameters come from a JSON config; flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError, ModelConfig, Prediction, check_config
from .data import SPLITS, EventStore, SyntheticConfig, load_events, make_benchmark, read_payload
from .framework import (CheckpointError, DiffCast, NonFiniteLossError, forecast, load_checkpoint,
                        save_checkpoint, training_step)
from .metrics import DEFAULT_POOLS, DEFAULT_THRESHOLDS, evaluate

log = logging.getLogger("diffcast")

SECTIONS = {"model", "synthetic", "benchmark", "train", "eval"}
BENCHMARK_KEYS = {"counts", "seed", "T_pixel", "max_sequences"}
TRAIN_KEYS = {"iters", "batch", "checkpoint_every"}
EVAL_KEYS = {"thresholds", "pools"}


class UsageError(Exception):
    pass


@dataclass
class Experiment:
    raw: bytes
    model: ModelConfig
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    benchmark: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)


def _strict(section: dict, allowed: set, name: str) -> dict:
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {unknown}")
    return dict(section)


def load_experiment(path) -> Experiment:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    raw = p.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _strict(doc, SECTIONS, "config")
    return Experiment(
        raw=raw,
        model=check_config(ModelConfig.from_dict(doc.get("model", {}))),
        synthetic=SyntheticConfig.from_dict(doc.get("synthetic", {})),
        benchmark=_strict(doc.get("benchmark", {}), BENCHMARK_KEYS, "benchmark"),
        train=_strict(doc.get("train", {}), TRAIN_KEYS, "train"),
        eval=_strict(doc.get("eval", {}), EVAL_KEYS, "eval"),
    )


def update_run_manifest(out_dir: Path, **fields):
    path = Path(out_dir) / "run_manifest.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    for k, v in fields.items():
        if isinstance(v, dict) and isinstance(doc.get(k), dict):
            doc[k].update(v)
        else:
            doc[k] = v
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def cmd_synth(config_path, out_dir, seed=None) -> EventStore:
    exp = load_experiment(config_path)
    b = exp.benchmark
    seed = b.get("seed", exp.model.seed) if seed is None else seed
    counts = b.get("counts", {"train": 100, "val": 20, "test": 20})
    store = make_benchmark(exp.synthetic, counts, out_dir, seed=seed, T_pixel=b.get("T_pixel", 0.05),
                           L_in=exp.model.L_in, L_out=exp.model.L_out, max_sequences=b.get("max_sequences"))
    for split in SPLITS:
        print(f"{split}: {len(store.ids(split))} events")
    return store


def _check_store(store: EventStore, cfg: ModelConfig):
    doc = store.read_manifest()
    if doc.get("L_in", cfg.L_in) != cfg.L_in or doc.get("L_out", cfg.L_out) != cfg.L_out:
        raise ConfigError(f"store holds L_in/L_out = {doc.get('L_in')}/{doc.get('L_out')}, "
                          f"config expects {cfg.L_in}/{cfg.L_out}")


def cmd_train(config_path, store_dir, out_dir, backbone=None, alpha=None, frozen=False,
              no_globalnet=False, iters=None, batch=None, init_from=None, seed=None) -> dict:
    exp = load_experiment(config_path)
    cfg = exp.model
    if backbone is not None:
        cfg.backbone = backbone
    if alpha is not None:
        cfg.alpha = float(alpha)
    if frozen:
        if init_from is None:
            raise UsageError("--frozen requires --init-from <checkpoint>")
        cfg.frozen_backbone = True
    if no_globalnet:
        cfg.use_globalnet = False
    if seed is not None:
        cfg.seed = int(seed)
    check_config(cfg)
    iters = int(iters if iters is not None else exp.train.get("iters", 1000))
    batch = int(batch if batch is not None else exp.train.get("batch", 4))
    every = int(exp.train.get("checkpoint_every", max(iters, 1)))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_bytes(exp.raw)
    store = EventStore(store_dir)
    _check_store(store, cfg)
    events = load_events(store, "train")
    if not events:
        raise ConfigError("store has no training events")

    t0 = time.perf_counter()
    models = DiffCast(cfg)
    if init_from is not None:
        src = load_checkpoint(init_from)
        models.backbone.load_state_dict(src.backbone.state_dict())
    picker = np.random.default_rng(cfg.seed)
    rng = torch.Generator().manual_seed(cfg.seed)
    log_path = out / "train_log.jsonl"
    checkpoints = []
    with open(log_path, "w") as fh:
        for _ in range(iters):
            idx = picker.integers(0, len(events), size=batch)
            try:
                rep = training_step([events[i] for i in idx], models, models.schedule, cfg, rng)
            except NonFiniteLossError:
                last = out / "last_good.pt"
                save_checkpoint(last, models)
                update_run_manifest(out, checkpoints=checkpoints + [str(last)], status="failed")
                raise
            if cfg.frozen_backbone and rep.grad_norm_backbone != 0.0:
                raise RuntimeError("frozen backbone received gradients")
            fh.write(rep.to_json() + "\n")
            if rep.step % every == 0 or rep.step == iters:
                ck = out / f"checkpoint_{rep.step:06d}.pt"
                save_checkpoint(ck, models)
                checkpoints.append(str(ck))
    final = out / "model.pt"
    save_checkpoint(final, models)
    elapsed = time.perf_counter() - t0
    return update_run_manifest(
        out, command="train", config_snapshot=str(out / "config.json"), seed=cfg.seed,
        model_config=cfg.to_dict(), config_hash=cfg.digest(), checkpoint=str(final),
        checkpoints=checkpoints, step_log=str(log_path), metric_reports=[],
        timings={"train_seconds": elapsed}, status="ok",
    )


def _event_seed(seed: int, index: int, sample: int) -> int:
    return int(np.random.SeedSequence([seed, index, sample]).generate_state(1)[0])


def cmd_forecast(checkpoint, store_dir, split, out_dir, samples=1, sampler=None, steps=None,
                 seed=None, config_path=None) -> dict:
    expect = load_experiment(config_path).model if config_path else None
    models = load_checkpoint(checkpoint, expect_config=expect)
    stored_hash = models.cfg.digest()
    cfg = models.cfg
    if sampler is not None:
        cfg.sampler = sampler
    if steps is not None:
        cfg.sample_steps = int(steps)
    if seed is not None:
        cfg.seed = int(seed)
    check_config(cfg)
    store = EventStore(store_dir)
    _check_store(store, cfg)
    entries = [e for e in store.read_manifest()["events"] if e["split"] == split]

    out = Path(out_dir)
    (out / "events").mkdir(parents=True, exist_ok=True)
    records = []
    t_all = time.perf_counter()
    for idx, entry in enumerate(entries):
        full = read_payload(store, entry)
        x = full[: entry["L_in"]]
        for k in range(int(samples)):
            rng = torch.Generator().manual_seed(_event_seed(cfg.seed, idx, k))
            t0 = time.perf_counter()
            pred = forecast(x, models, models.schedule, cfg, rng)
            dt = time.perf_counter() - t0
            name = f"{entry['id']}__s{k}.bin"
            stack = np.stack([pred.mu, pred.residual_hat, pred.y_hat]).astype("<f4")
            (out / "events" / name).write_bytes(stack.tobytes(order="C"))
            records.append({"id": entry["id"], "sample": k, "file": f"events/{name}",
                            "sampling_seconds": dt})
    manifest = {
        "checkpoint": str(checkpoint), "config_hash": stored_hash, "split": split,
        "samples": int(samples), "sampler": cfg.sampler, "steps": cfg.sample_steps, "seed": cfg.seed,
        "L_out": cfg.L_out, "fields": ["mu", "residual_hat", "y_hat"], "events": records,
    }
    if entries:
        manifest.update(H=entries[0]["H"], W=entries[0]["W"], C=entries[0]["C"],
                        data_range=entries[0]["data_range"])
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    update_run_manifest(out, command="forecast", seed=cfg.seed, checkpoint=str(checkpoint),
                        forecast_manifest=str(out / "manifest.json"),
                        timings={"forecast_seconds": time.perf_counter() - t_all})
    return manifest


def read_forecasts(forecast_dir):
    """Yield (event id, sample, Prediction) from a forecast directory."""
    root = Path(forecast_dir)
    doc = json.loads((root / "manifest.json").read_text())
    shape = (3, doc["L_out"], doc["H"], doc["W"], doc["C"]) if doc["events"] else None
    for rec in doc["events"]:
        raw = (root / rec["file"]).read_bytes()
        if len(raw) != 4 * int(np.prod(shape)):
            raise ValueError(f"forecast payload {rec['file']} has unexpected size")
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        yield rec["id"], rec["sample"], Prediction.compose(arr[0], arr[1])


def cmd_eval(forecast_dir, store_dir, thresholds=None, pools=None, out_dir=None, config_path=None):
    if config_path is not None:
        ev = load_experiment(config_path).eval
        thresholds = thresholds or ev.get("thresholds")
        pools = pools or ev.get("pools")
    store = EventStore(store_dir)
    entries = {e["id"]: e for e in store.read_manifest()["events"]}
    preds, targets = [], []
    for eid, _, pred in read_forecasts(forecast_dir):
        if eid not in entries:
            raise ValueError(f"forecast event {eid!r} not present in the store")
        entry = entries[eid]
        full = read_payload(store, entry)
        preds.append(pred)
        targets.append(full[entry["L_in"]:])
    if not preds:
        raise ValueError("no forecasts to evaluate")
    data_range = tuple(next(iter(entries.values()))["data_range"])
    report = evaluate(preds, targets, thresholds or DEFAULT_THRESHOLDS, pools or DEFAULT_POOLS, data_range)
    out = Path(out_dir or forecast_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "metrics.json", out / "framewise.csv")
    update_run_manifest(out, metric_reports=[str(out / "metrics.json"), str(out / "framewise.csv")])
    return report


def cmd_plot(forecast_dir, store_dir, event_id, out_png, sample=0):
    from .plotting import plot_forecast

    store = EventStore(store_dir)
    entries = {e["id"]: e for e in store.read_manifest()["events"]}
    if event_id not in entries:
        raise ValueError(f"unknown event id {event_id!r}")
    for eid, k, pred in read_forecasts(forecast_dir):
        if eid == event_id and k == sample:
            full = read_payload(store, entries[eid])
            L_in = entries[eid]["L_in"]
            return plot_forecast(full[:L_in], full[L_in:], pred.mu, pred.residual_hat, pred.y_hat,
                                 out_png, title=f"{eid} sample {k}")
    raise ValueError(f"no forecast for event {event_id!r} sample {sample}")


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def _ints(text):
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcast", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic event store")
    s.add_argument("config")
    s.add_argument("out_dir")
    s.add_argument("--seed", type=int)

    t = sub.add_parser("train", help="train backbone + residual diffusion jointly")
    t.add_argument("config")
    t.add_argument("store_dir")
    t.add_argument("out_dir")
    t.add_argument("--backbone", choices=["convgru", "simvp"])
    t.add_argument("--alpha", type=float)
    t.add_argument("--frozen", action="store_true")
    t.add_argument("--no-globalnet", action="store_true")
    t.add_argument("--iters", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--init-from")
    t.add_argument("--seed", type=int)

    f = sub.add_parser("forecast", help="sample forecasts for a store split")
    f.add_argument("checkpoint")
    f.add_argument("store_dir")
    f.add_argument("split", choices=list(SPLITS))
    f.add_argument("out_dir")
    f.add_argument("--samples", type=int, default=1)
    f.add_argument("--sampler", choices=["ddpm", "ddim"])
    f.add_argument("--steps", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--config", help="verify the checkpoint against this config")

    e = sub.add_parser("eval", help="score forecasts against the store")
    e.add_argument("forecast_dir")
    e.add_argument("store_dir")
    e.add_argument("--thresholds", type=_floats)
    e.add_argument("--pools", type=_ints)
    e.add_argument("--out")
    e.add_argument("--config", help="take thresholds and pools from this config's eval section")

    pl = sub.add_parser("plot", help="render a forecast comparison grid")
    pl.add_argument("forecast_dir")
    pl.add_argument("store_dir")
    pl.add_argument("event_id")
    pl.add_argument("out_png")
    pl.add_argument("--sample", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    threads = os.environ.get("DIFFCAST_NUM_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        if args.command == "synth":
            cmd_synth(args.config, args.out_dir, args.seed)
        elif args.command == "train":
            m = cmd_train(args.config, args.store_dir, args.out_dir, args.backbone, args.alpha, args.frozen,
                          args.no_globalnet, args.iters, args.batch, args.init_from, args.seed)
            print(f"checkpoint: {m['checkpoint']}")
        elif args.command == "forecast":
            m = cmd_forecast(args.checkpoint, args.store_dir, args.split, args.out_dir, args.samples,
                             args.sampler, args.steps, args.seed, args.config)
            print(f"{len(m['events'])} forecasts written to {args.out_dir}")
        elif args.command == "eval":
            r = cmd_eval(args.forecast_dir, args.store_dir, args.thresholds, args.pools, args.out, args.config)
            print(json.dumps({"mean_csi": r.mean_csi, "mean_hss": r.mean_hss, "ssim": r.ssim}))
        elif args.command == "plot":
            cmd_plot(args.forecast_dir, args.store_dir, args.event_id, args.out_png, args.sample)
    except (ConfigError, UsageError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"error: training diverged: {exc.diagnostics}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
