"""Command-line entry point.

One executable, seven subcommands: generate data, train, evaluate,
verify gradients, inspect gate units, probe attributes, and run the
four-mode ablation.  Every artifact-producing command writes the fully
resolved configuration next to its outputs, so a run directory is
self-describing and reproducible from its own files.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import os
import sys
from dataclasses import dataclass
from pathlib import Path


def _cap_threads() -> None:
    """Pin BLAS and OpenMP pools before numpy first loads.

    Runs at import time: `MLFN_THREADS` (default 1, for bit-exact
    reproducibility) is copied into every thread-count variable the
    common BLAS builds consult.  Has no effect on a numpy that some
    other module already imported into this process.
    """
    n = os.environ.get("MLFN_THREADS", "1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "VECLIB_MAXIMUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = n


_cap_threads()

import numpy as np  # noqa: E402  (thread caps must land before numpy)

from . import evaluate as ev  # noqa: E402
from . import inspection as ins  # noqa: E402
from . import train as tr  # noqa: E402
from . import verify  # noqa: E402
from .data import ImageSet, export_ppm_dir, generate_dataset, \
    load_ppm_dir  # noqa: E402
from .errors import DivergenceError, MlfnError  # noqa: E402
from .model import MODES, MLFNConfig, init_params, \
    load_checkpoint  # noqa: E402


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


@dataclass
class RunConfig:
    """Flat, file-serializable run settings; one key per INI line."""

    seed: int = 0
    mode: str = "mlfn"
    # dataset
    n_ids: int = 48
    imgs_per_view: int = 4
    data_dir: str = ""
    # model structure
    n_blocks: int = 4
    factor_counts: str = "4,4,4,4"
    channels: str = "8,16,32,64"
    strides: str = "1,2,2,1"
    fsm_hidden: str = "16:8,16:8,16:8,16:8"
    stem_channels: int = 8
    stem_stride: int = 1
    fusion_dim: int = 64
    # training
    iterations: int = 1200
    batch_size: int = 32
    lr: float = 0.003
    optimizer: str = "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    flip: bool = True
    photometric: float = 0.0
    jitter: int = 0
    eval_every: int = 50
    schedule: str = "constant"
    decay_factor: float = 0.1
    decay_every: int = 0
    early_stop_acc: float = 0.975
    # evaluation
    features: str = "R"
    ranks: str = "1,5,10"


_FIELDS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELDS[key]
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise _UsageError(f"config key {key!r} wants a boolean, got {raw!r}")
    return raw


def load_config_file(path) -> dict:
    """Parse a flat key=value file; unknown keys are usage errors."""
    text = Path(path).read_text()
    parser = configparser.ConfigParser()
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise _UsageError(f"cannot parse config {path}: {exc}")
    out = {}
    for key, raw in parser.items("run"):
        if key not in _FIELDS:
            raise _UsageError(f"unknown config key {key!r} in {path}")
        out[key] = _coerce(key, raw)
    return out


def resolve_run(args) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    run = RunConfig()
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            setattr(run, key, value)
    for flag in ("seed", "mode", "features", "ranks"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(run, flag, value)
    return run


def run_config_text(run: RunConfig, digest: str | None = None) -> str:
    lines = []
    if digest is not None:
        lines.append(f"# model_digest = {digest}")
    for name in sorted(_FIELDS):
        value = getattr(run, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def _write_resolved(run: RunConfig, out: Path,
                    digest: str | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.ini").write_text(run_config_text(run, digest))


def _ints(text: str) -> tuple:
    try:
        return tuple(int(part) for part in text.split(",") if part != "")
    except ValueError:
        raise _UsageError(f"expected a comma list of integers, got {text!r}")


def model_config(run: RunConfig, n_classes: int,
                 input_hw=(32, 16)) -> MLFNConfig:
    try:
        fsm_hidden = tuple(
            tuple(int(x) for x in part.split(":"))
            for part in run.fsm_hidden.split(","))
    except ValueError:
        raise _UsageError(
            f"fsm_hidden wants entries like 16:8, got {run.fsm_hidden!r}")
    return MLFNConfig(
        n_blocks=run.n_blocks,
        factor_counts=_ints(run.factor_counts),
        channels=_ints(run.channels),
        strides=_ints(run.strides),
        fsm_hidden=fsm_hidden,
        stem_channels=run.stem_channels,
        stem_stride=run.stem_stride,
        in_channels=3,
        input_hw=tuple(input_hw),
        fusion_dim=run.fusion_dim,
        n_classes=n_classes,
        mode=run.mode,
        dtype="float32",
        seed=run.seed,
    )


def train_config(run: RunConfig) -> tr.TrainConfig:
    return tr.TrainConfig(
        iterations=run.iterations,
        batch_size=run.batch_size,
        lr=run.lr,
        optimizer=run.optimizer,
        momentum=run.momentum,
        weight_decay=run.weight_decay,
        flip=run.flip,
        photometric=run.photometric,
        jitter=run.jitter,
        eval_every=run.eval_every,
        schedule=run.schedule,
        decay_factor=run.decay_factor,
        decay_every=run.decay_every,
        early_stop_acc=run.early_stop_acc if run.early_stop_acc > 0 else None,
        seed=run.seed,
    )


def _dataset(run: RunConfig):
    if run.data_dir:
        return load_ppm_dir(run.data_dir)
    return generate_dataset(n_ids=run.n_ids,
                            imgs_per_id_per_view=run.imgs_per_view,
                            seed=run.seed)


def _train_arrays(dataset):
    idx = dataset.train_indices()
    labels = np.searchsorted(dataset.train_ids, dataset.ids[idx])
    return dataset.images[idx], labels.astype(np.int64)


def _require_out(args) -> Path:
    if not getattr(args, "out", None):
        raise _UsageError("--out DIR is required for this command")
    return Path(args.out)


def _require_checkpoint(args) -> Path:
    if not getattr(args, "checkpoint", None):
        raise _UsageError("--checkpoint PATH is required for this command")
    path = Path(args.checkpoint)
    if not path.exists():
        raise _UsageError(f"checkpoint {path} does not exist")
    return path


def _load_trained(run: RunConfig, args, dataset):
    cfg = model_config(run, n_classes=len(dataset.train_ids),
                       input_hw=dataset.images.shape[2:])
    model = init_params(cfg)
    load_checkpoint(_require_checkpoint(args), model)
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    run = resolve_run(args)
    out = _require_out(args)
    dataset = generate_dataset(n_ids=run.n_ids,
                               imgs_per_id_per_view=run.imgs_per_view,
                               seed=run.seed)
    export_ppm_dir(dataset, out)
    _write_resolved(run, out)
    print(f"wrote {len(dataset.ids)} images "
          f"({len(dataset.train_ids)} train / {len(dataset.test_ids)} test "
          f"identities) to {out}")
    return 0


def cmd_train(args) -> int:
    run = resolve_run(args)
    out = _require_out(args)
    dataset = _dataset(run)
    cfg = model_config(run, n_classes=len(dataset.train_ids),
                       input_hw=dataset.images.shape[2:])
    model = init_params(cfg)
    images, labels = _train_arrays(dataset)
    out.mkdir(parents=True, exist_ok=True)
    rows = tr.run_training(model, images, labels, train_config(run),
                           log_path=out / "loss_log.csv",
                           ckpt_path=out / "checkpoint.bin",
                           resume=args.resume)
    _write_resolved(run, out, digest=cfg.digest())
    last = rows[-1]
    print(f"finished at iteration {last['iteration']}: "
          f"loss {last['loss']:.4f}, train accuracy {last['train_acc']:.4f}")
    print(f"checkpoint: {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    run = resolve_run(args)
    dataset = _dataset(run)
    model = _load_trained(run, args, dataset)
    report = ev.evaluate_model(model, dataset, kind=run.features,
                               ranks=_ints(run.ranks), split_seed=run.seed)
    print(ev.format_report_text(report))
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ev.write_report_csv(report, out / "report.csv")
        _write_resolved(run, out, digest=model.config.digest())
    return 0


def cmd_grad_check(args) -> int:
    run = resolve_run(args)
    cfg = model_config(run, n_classes=5)
    per_param, overall = verify.run_gradient_suite(
        cfg, seed=run.seed, batch=args.batch, step=args.step,
        max_coords=args.max_coords)
    print(verify.format_gradient_report(per_param, args.tol))
    return 0 if overall <= args.tol else 2


def cmd_inspect(args) -> int:
    run = resolve_run(args)
    out = _require_out(args)
    dataset = _dataset(run)
    model = _load_trained(run, args, dataset)
    out.mkdir(parents=True, exist_ok=True)
    table = ins.correlate_units(model, dataset)
    ins.write_correlations_csv(table, out / "correlations.csv")
    if args.units:
        units = []
        for part in args.units.split(","):
            pieces = part.split(":")
            if len(pieces) != 2:
                raise _UsageError(
                    f"--units wants block:unit pairs, got {part!r}")
            units.append((int(pieces[0]), int(pieces[1])))
    else:
        units = []
        for name in dataset.attr_names:
            if table.best_unit[name] not in units:
                units.append(table.best_unit[name])
    rankings = [ins.rank_by_unit(model, dataset, n, i, args.m)
                for n, i in units]
    ins.export_report(rankings, dataset, out / "inspect")
    _write_resolved(run, out, digest=model.config.digest())
    for name in dataset.attr_names:
        n, i = table.best_unit[name]
        col = dataset.attr_names.index(name)
        row = table.units.index((n, i))
        print(f"attribute {name}: strongest unit block {n} unit {i} "
              f"(association {table.values[row, col]:.3f})")
    return 0


def cmd_probe_attrs(args) -> int:
    run = resolve_run(args)
    dataset = _dataset(run)
    model = _load_trained(run, args, dataset)
    subset = ImageSet(images=dataset.images, ids=dataset.ids,
                      views=dataset.views,
                      indices=np.arange(len(dataset.ids)))
    feats = ev.extract_features(model, subset, kind=run.features)
    per_image_attrs = dataset.attrs[dataset.ids]
    train_mask = np.isin(dataset.ids, dataset.train_ids)
    per_attr, mean_acc = ev.attribute_probe(
        feats.features, per_image_attrs, dataset.attr_names, train_mask)
    baseline = ev.majority_baseline(per_image_attrs, dataset.attr_names,
                                    train_mask)
    for name in dataset.attr_names:
        acc = per_attr[name]
        shown = "skipped" if np.isnan(acc) else f"{acc:.4f}"
        print(f"{name:>10}: probe {shown}  majority {baseline[name]:.4f}")
    print(f"{'mean':>10}: probe {mean_acc:.4f}")
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "attribute_probe.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["attribute", "feature", "probe_accuracy",
                             "majority_accuracy"])
            for name in dataset.attr_names:
                writer.writerow([name, feats.kind, repr(per_attr[name]),
                                 repr(baseline[name])])
            writer.writerow(["mean", feats.kind, repr(mean_acc), ""])
        _write_resolved(run, out, digest=model.config.digest())
    return 0


def cmd_ablate(args) -> int:
    run = resolve_run(args)
    out = _require_out(args)
    seeds = _ints(args.seeds)
    if not seeds:
        raise _UsageError("--seeds wants at least one seed")
    out.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict[str, list]] = {
        mode: {"cmc1": [], "map": []} for mode in MODES}
    detail_rows = []
    for seed in seeds:
        per_seed = dataclasses.replace(run, seed=seed)
        dataset = _dataset(per_seed)
        images, labels = _train_arrays(dataset)
        for mode in MODES:
            per_mode = dataclasses.replace(per_seed, mode=mode)
            cfg = model_config(per_mode, n_classes=len(dataset.train_ids),
                               input_hw=dataset.images.shape[2:])
            model = init_params(cfg)
            tr.run_training(model, images, labels, train_config(per_mode))
            report = ev.evaluate_model(model, dataset, kind="R",
                                       ranks=(1,), split_seed=seed)
            cmc1 = float(report.cmc_values[0])
            results[mode]["cmc1"].append(cmc1)
            results[mode]["map"].append(report.mean_ap)
            detail_rows.append([mode, seed, repr(cmc1),
                                repr(report.mean_ap)])
            print(f"seed {seed} {mode:>8}: CMC@1 {cmc1:.4f} "
                  f"mAP {report.mean_ap:.4f}")

    medians = {mode: (float(np.median(results[mode]["cmc1"])),
                      float(np.median(results[mode]["map"])))
               for mode in MODES}
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "cmc@1", "mAP"])
        for mode in MODES:
            writer.writerow([mode, repr(medians[mode][0]),
                             repr(medians[mode][1])])
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "seed", "cmc@1", "mAP"])
        writer.writerows(detail_rows)
    _write_resolved(run, out)

    warnings_found = []
    for rival in ("nofusion", "resnext"):
        if medians["mlfn"][0] < medians[rival][0]:
            warnings_found.append(
                f"warning: median CMC@1 of mlfn ({medians['mlfn'][0]:.4f}) "
                f"falls below {rival} ({medians[rival][0]:.4f})")
    for line in warnings_found:
        print(line, file=sys.stderr)
    if warnings_found:
        (out / "ablation_warnings.txt").write_text(
            "\n".join(warnings_found) + "\n")
    for mode in MODES:
        print(f"{mode:>8}: median CMC@1 {medians[mode][0]:.4f} "
              f"median mAP {medians[mode][1]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="mlfn", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--mode", choices=MODES, default=None)
    common.add_argument("--features", choices=ev.FEATURE_KINDS, default=None)
    common.add_argument("--ranks", default=None,
                        help="comma list of CMC ranks, e.g. 1,5,10")
    common.add_argument("--out", default=None, help="output directory")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="render the synthetic benchmark to PPM files")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="train one model and write a checkpoint")
    p.add_argument("--resume", action="store_true",
                   help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="cross-view evaluation of a checkpoint")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", parents=[common],
                       help="finite-difference check of every parameter")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--max-coords", type=int, default=8)
    p.add_argument("--tol", type=float, default=verify.DEFAULT_TOLERANCE)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("inspect", parents=[common],
                       help="rank images by gate units, correlate with "
                            "attributes")
    p.add_argument("--checkpoint")
    p.add_argument("--m", type=int, default=20,
                   help="montage size per extreme")
    p.add_argument("--units", default=None,
                   help="comma list of block:unit pairs (default: best "
                        "unit per attribute)")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("probe-attrs", parents=[common],
                       help="linear attribute probes on extracted features")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_probe_attrs)

    p = sub.add_parser("ablate", parents=[common],
                       help="train and compare all four modes")
    p.add_argument("--seeds", default="0",
                   help="comma list of seeds to train per mode")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except MlfnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
