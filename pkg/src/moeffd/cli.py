"""Command-line entry point: ``moeffd <command> [options]``.

Commands: gen-data, train, eval, ablate, verify, report-experts.

Relative output paths are resolved against ``$MOEFFD_OUTPUT_ROOT`` when it is
set. Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 I/O
error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import PRESETS, DESK_TRAIN, ModelConfig, RunConfig, TrainConfig
from .data import PERTURBATIONS, Dataset, PerturbationSpec, load_split, perturb_dataset, read_manifest, write_dataset
from .errors import CheckpointError, ConfigError, MoEFFDError, NumericError
from .metrics import (ExpertFrequencyReport, auc, eer, expert_frequencies, read_gate_records, write_gate_records,
                      write_metrics_csv)
from .model import MoEFFDModel, load_model, predict, save_checkpoint, train

log = logging.getLogger("moeffd")

OUTPUT_ROOT_ENV = "MOEFFD_OUTPUT_ROOT"

SWEEPS = {
    "rank": None,                       # one cell per rank in the config's lora_ranks
    "adapter_kind": None,               # one cell per adapter kind
    "top_k": [1, 2, 3],
    "lambda": [0.0, 0.1, 1.0, 5.0, 10.0],
    "moe_vs_multi": ["moe", "multi_experts"],
}


def resolve(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """``section.key=value`` pairs (value parsed as JSON when possible) merged into a config dict."""
    data = copy.deepcopy(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(raw)
    return data


def base_config(preset_name: str | None) -> dict:
    cfg = RunConfig().to_dict()
    if preset_name:
        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset {preset_name!r}; expected one of {sorted(PRESETS)}")
        cfg["model"].update(PRESETS[preset_name])
        if preset_name == "desk":
            cfg["train"].update(DESK_TRAIN)
    return cfg


def load_run_config(path: str | None, preset_name: str | None, overrides: list[str]) -> RunConfig:
    data = base_config(preset_name)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CheckpointError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        for section in ("model", "train"):
            if section in user:
                if not isinstance(user[section], dict):
                    raise ConfigError(f"config section {section!r} must be an object")
                data[section].update(user.pop(section))
        data.update(user)
    data = apply_overrides(data, overrides)
    return RunConfig.from_dict(data)


def _dataset(path: str | None, split: str) -> Dataset:
    if not path:
        raise ConfigError("no dataset given (set 'dataset' in the config or pass --dataset)")
    ds = load_split(path, split)
    if len(ds) == 0:
        raise ConfigError(f"dataset {path} has no samples in split {split!r}")
    return ds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(out_dir, seed: int, size: int, n_train: tuple[int, int], n_test: tuple[int, int]) -> Path:
    splits = {"train": {"n_real": n_train[0], "n_fake": n_train[1]},
              "test": {"n_real": n_test[0], "n_fake": n_test[1]}}
    try:
        return write_dataset(resolve(out_dir), seed, size, splits)
    except OSError as exc:
        raise CheckpointError(f"cannot write dataset to {out_dir}: {exc}") from None


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True))


def _write_loss_csv(path: Path, epochs: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "ce", "moe", "moe_share", "test_auc", "test_eer", "seconds"])
        for r in epochs:
            w.writerow([r["epoch"], r["loss"], r["ce"], r["moe"], r["moe_share"], r.get("test_auc", ""),
                        r.get("test_eer", ""), r["seconds"]])


def cmd_train(run: RunConfig, resume: str | None = None, figures: bool = True) -> Path:
    """Train one run; writes config.json, checkpoints, losses.csv, batch_losses.csv, metrics.csv."""
    run_dir = resolve(run.output_dir or f"runs/{run.run_id}")
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.json", run.to_dict())
    train_set = _dataset(run.dataset, "train")
    try:
        test_set = load_split(run.dataset, "test")
    except CheckpointError:
        test_set = None
    model = MoEFFDModel.build(run.model)
    report = train(model, train_set, run.train, test_set, run_dir=run_dir, run_cfg=run,
                   resume=resume, on_epoch=lambda r: log.info("epoch %s: %s", r["epoch"], r))
    save_checkpoint(run_dir / "final.mffd", model, meta={"run_config": run.to_dict(), "epoch": run.train.epochs})
    _write_loss_csv(run_dir / "losses.csv", report.epochs)
    with (run_dir / "batch_losses.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(report.batch_losses, 1))
    rows = []
    for split, ds in (("train", train_set), ("test", test_set)):
        if ds is None or len(set(ds.labels.tolist())) < 2:
            continue
        pred = predict(model, ds)
        rows.append({"run_id": run.run_id, "split": split, "auc": auc(pred.scores, pred.labels),
                     "eer": eer(pred.scores, pred.labels)})
    write_metrics_csv(run_dir / "metrics.csv", rows)
    if figures and report.epochs:
        plotting.loss_curves(report.epochs, run_dir / "loss_curves.png")
    return run_dir


def _eval_one(model, ds: Dataset, run_id: str, split: str):
    pred = predict(model, ds)
    row = {"run_id": run_id, "split": split, "auc": auc(pred.scores, pred.labels),
           "eer": eer(pred.scores, pred.labels)}
    return row, pred


def cmd_eval(checkpoint, dataset, out_dir, split: str = "test", sweep: list[str] | None = None,
             seed: int = 0, run_id: str | None = None, figures: bool = True) -> Path:
    """Noise-free evaluation; optional perturbation sweep over severities 0..5."""
    model, _, meta = load_model(checkpoint)
    run_id = run_id or (meta.get("run_config") or {}).get("run_id", Path(checkpoint).stem)
    ds = _dataset(dataset, split)
    manifest = read_manifest(dataset)
    want = (3, model.cfg.image_size, model.cfg.image_size)
    have = (manifest["channels"], manifest["height"], manifest["width"])
    if have != want:
        raise ConfigError(f"dataset images {have} do not match checkpoint config {want}")
    out = resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    row, pred = _eval_one(model, ds, run_id, split)
    write_metrics_csv(out / "metrics.csv", [row])
    report = expert_frequencies(pred.top1, pred.n_experts)
    report.write_csv(out / "expert_freq.csv")
    write_gate_records(out / "gate_records.csv", ds.ids, pred.top1)
    if figures and report.counts:
        for gt in ("lora", "adapter"):
            if any(k[1] == gt for k in report.counts):
                plotting.expert_frequency_bars(report.counts, out / f"expert_freq_{gt}.png", gt,
                                               _expert_labels(model, gt))
    if sweep:
        rows = []
        for kind in sweep:
            for sev in range(0, 6):
                spec = PerturbationSpec(kind, sev)
                r, _ = _eval_one(model, perturb_dataset(ds, spec, seed), run_id, split)
                rows.append({"kind": kind, "severity": sev, "auc": r["auc"], "eer": r["eer"]})
        with (out / "robustness.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["kind", "severity", "auc", "eer"])
            w.writeheader()
            w.writerows(rows)
        if figures:
            plotting.robustness_curves(rows, out / "robustness.png")
    return out


def _expert_labels(model: MoEFFDModel, gate_type: str) -> list[str]:
    if gate_type == "lora":
        return [f"r={r}" for r in model.cfg.lora_ranks]
    return list(model.cfg.adapter_kinds)


def sweep_cells(run: RunConfig, sweep: str) -> list[tuple[str, RunConfig]]:
    """One RunConfig per ablation cell, in the order the sweep lists them."""
    if sweep not in SWEEPS:
        raise ConfigError(f"unknown sweep {sweep!r}; expected one of {sorted(SWEEPS)}")
    cells = []

    def variant(label, model=None, train_cfg=None):
        m = dict(run.model.to_dict(), **(model or {}))
        t = dict(run.train.to_dict(), **(train_cfg or {}))
        return label, RunConfig(ModelConfig.from_dict(m), TrainConfig.from_dict(t), run.dataset,
                                None, f"{run.run_id}-{sweep}-{label}")

    if sweep == "rank":
        # each cell is a LoRA-only model with a single expert of that rank
        for r in run.model.lora_ranks:
            cells.append(variant(f"r{r}", {"lora_ranks": [r], "adapter": False, "top_k": 1}))
    elif sweep == "adapter_kind":
        for kind in run.model.adapter_kinds:
            cells.append(variant(kind, {"adapter_kinds": [kind], "lora": False, "top_k": 1}))
    elif sweep == "top_k":
        for k in SWEEPS["top_k"]:
            cells.append(variant(f"k{k}", {"top_k": k}))
    elif sweep == "lambda":
        for lam in SWEEPS["lambda"]:
            cells.append(variant(f"lambda{lam:g}", train_cfg={"lambda_moe": lam}))
    else:
        for mode in SWEEPS["moe_vs_multi"]:
            cells.append(variant(mode, {"mode": mode}))
    return cells


def cmd_ablate(run: RunConfig, sweep: str, out_dir=None, figures: bool = True) -> Path:
    """Train and evaluate every cell; a failing cell is recorded and the sweep continues."""
    out = resolve(out_dir or f"ablations/{run.run_id}-{sweep}")
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run.to_dict())
    rows = []
    for label, cell in sweep_cells(run, sweep):
        cell.output_dir = str(out / label)
        try:
            run_dir = cmd_train(cell, figures=figures)
            with (run_dir / "metrics.csv").open() as fh:
                test = [r for r in csv.DictReader(fh) if r["split"] == "test"]
            rows.append({"sweep": sweep, "cell": label, "run_id": cell.run_id,
                         "auc": test[0]["auc"] if test else "", "eer": test[0]["eer"] if test else "",
                         "status": "ok"})
        except MoEFFDError as exc:
            log.error("cell %s failed: %s", label, exc)
            rows.append({"sweep": sweep, "cell": label, "run_id": cell.run_id, "auc": "", "eer": "",
                         "status": f"{type(exc).__name__}: {exc}"})
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["sweep", "cell", "run_id", "auc", "eer", "status"])
        w.writeheader()
        w.writerows(rows)
    if figures:
        plotting.ablation_bars(rows, out / "ablation.png")
    return out


def cmd_verify(level: str = "fast", checkpoint=None, stream=sys.stdout) -> bool:
    from .verify import run_checks
    results = run_checks(level, checkpoint)
    for r in results:
        print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.1f}s): {r.detail}", file=stream)
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed", file=stream)
    return ok


def cmd_report_experts(source, out_dir=None, figures: bool = True) -> Path:
    """Rebuild expert_freq.csv from a persisted gate_records.csv (or an eval directory)."""
    src = Path(source)
    if src.is_dir():
        src = src / "gate_records.csv"
    try:
        top1, _ = read_gate_records(src)
    except OSError as exc:
        raise CheckpointError(f"cannot read gate records {src}: {exc}") from None
    out = resolve(out_dir) if out_dir else src.parent
    n_exp = {k: int(v.max()) + 1 for k, v in top1.items()}
    # keep the expert count of an existing report when available (unused trailing experts)
    existing = src.parent / "expert_freq.csv"
    if existing.exists():
        for k, v in ExpertFrequencyReport.read_csv(existing).counts.items():
            n_exp[k] = max(n_exp.get(k, 0), len(v))
    report = expert_frequencies(top1, n_exp)
    report.write_csv(out / "expert_freq.csv")
    if figures:
        for gt in ("lora", "adapter"):
            if any(k[1] == gt for k in report.counts):
                plotting.expert_frequency_bars(report.counts, out / f"expert_freq_{gt}.png", gt)
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N_REAL,N_FAKE, got {text!r}") from None
    if a < 0 or b < 0:
        raise argparse.ArgumentTypeError("sample counts must be non-negative")
    return a, b


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeffd", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset directory")
    g.add_argument("out_dir")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--train", type=_pair, default=(1000, 1000), metavar="N_REAL,N_FAKE")
    g.add_argument("--test", type=_pair, default=(250, 250), metavar="N_REAL,N_FAKE")
    g.add_argument("--from-manifest", help="regenerate from an existing manifest instead")

    def run_args(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        sp.add_argument("--dataset")
        sp.add_argument("--output-dir")
        sp.add_argument("--run-id")
        sp.add_argument("--mode", help="moe | multi_experts | single_expert:<id> | backbone_only")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int, help="sets both the model and the training seed")
        sp.add_argument("--lambda", dest="lambda_moe", type=float)
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key, e.g. train.lr_gate=1e-3")
        sp.add_argument("--no-figures", action="store_true")

    t = sub.add_parser("train", help="train one run")
    run_args(t)
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--output-dir", default="eval")
    e.add_argument("--sweep", nargs="*", choices=PERTURBATIONS, help="perturbations for a severity sweep")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--run-id")
    e.add_argument("--no-figures", action="store_true")

    a = sub.add_parser("ablate", help="run an ablation sweep")
    run_args(a)
    a.add_argument("--sweep", required=True, choices=sorted(SWEEPS))

    v = sub.add_parser("verify", help="run gradient checks and oracle suites")
    v.add_argument("--level", choices=("fast", "full"), default="fast")
    v.add_argument("--checkpoint")

    r = sub.add_parser("report-experts", help="rebuild expert frequencies from gate records")
    r.add_argument("source", help="gate_records.csv or an eval output directory")
    r.add_argument("--output-dir")
    r.add_argument("--no-figures", action="store_true")
    return p


def _run_config_from_args(args) -> RunConfig:
    overrides = list(args.set)
    for flag, key in (("dataset", "dataset"), ("output_dir", "output_dir"), ("run_id", "run_id"),
                      ("mode", "model.mode"), ("epochs", "train.epochs"), ("lambda_moe", "train.lambda_moe"),
                      ("top_k", "model.top_k")):
        val = getattr(args, flag)
        if val is not None:
            overrides.append(f"{key}={json.dumps(val)}")
    if args.seed is not None:
        overrides += [f"model.seed={args.seed}", f"train.seed={args.seed}"]
    return load_run_config(args.config, args.preset, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            if args.from_manifest:
                from .data import regenerate
                path = regenerate(args.from_manifest, resolve(args.out_dir))
            else:
                path = cmd_gen_data(args.out_dir, args.seed, args.size, args.train, args.test)
            print(path)
        elif args.command == "train":
            print(cmd_train(_run_config_from_args(args), resume=args.resume, figures=not args.no_figures))
        elif args.command == "eval":
            print(cmd_eval(args.checkpoint, args.dataset, args.output_dir, args.split, args.sweep, args.seed,
                           args.run_id, figures=not args.no_figures))
        elif args.command == "ablate":
            print(cmd_ablate(_run_config_from_args(args), args.sweep, args.output_dir,
                             figures=not args.no_figures))
        elif args.command == "verify":
            return 0 if cmd_verify(args.level, args.checkpoint) else 1
        elif args.command == "report-experts":
            print(cmd_report_experts(args.source, args.output_dir, figures=not args.no_figures))
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
