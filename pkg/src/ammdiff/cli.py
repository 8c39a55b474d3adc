"""Command-line entry point: gen-data, pretrain, train, impute, eval.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import CheckpointError, checksum
from .config import ConfigError, RunConfig
from .dataset import (DatasetError, DatasetHandle, all_presence_masks, generate_phantom_dataset,
                      leave_one_out_masks, load_sample, load_stack, mask_to_str, parse_presence, read_record,
                      split_dataset, write_record, MultimodalSample)
from .evaluation import CopyBaseline, correlation_table, evaluate_split, model_predictor
from .iffn import TrainingDivergence, build_iffn, load_params, make_optimizer, save_params
from .model import (build_model, impute, load_checkpoint, load_pretrained_iffn, restore_optimizer,
                    save_checkpoint)
from .spectral import spectral_features
from .training import make_amm_optimizer, pretrain_iffn, train_amm

log = logging.getLogger("ammdiff")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
INCOMPLETE = ".incomplete"
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def artifact_dir(path: Path):
    """Mark a directory incomplete until the enclosed block finishes."""
    path.mkdir(parents=True, exist_ok=True)
    marker = path / INCOMPLETE
    marker.write_text("in progress\n")
    yield path
    marker.unlink()


def write_provenance(path: Path, cfg: RunConfig, command: str, extra: dict | None = None):
    record = {
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "torch_version": torch.__version__,
        "numpy_version": np.__version__,
    }
    if extra:
        record.update(extra)
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def split_handle(cfg: RunConfig, name: str) -> DatasetHandle:
    manifest = cfg.out / "splits" / f"{name}.json"
    if not manifest.exists():
        raise DatasetError(f"missing split manifest {manifest}; run gen-data first")
    return DatasetHandle.from_manifest(manifest)


def save_png(path: Path, image: np.ndarray):
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def _setup_logging(verbose: bool):
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    data_root, split_root = cfg.data_root, cfg.out / "splits"
    if (data_root.exists() and any(data_root.iterdir())) or split_root.exists():
        if not args.force:
            raise FileExistsError(f"{data_root} already exists; pass --force to overwrite")
        shutil.rmtree(data_root, ignore_errors=True)
        shutil.rmtree(split_root, ignore_errors=True)
    with artifact_dir(data_root), artifact_dir(split_root):
        handle = generate_phantom_dataset(cfg.phantom_spec())
        parts = split_dataset(handle, tuple(cfg.data.split), cfg.seed)
        for name, part in zip(SPLITS, parts):
            part.save_manifest(split_root / f"{name}.json")
        write_provenance(split_root / "provenance.json", cfg, "gen-data",
                         {"counts": {n: len(p.subjects) for n, p in zip(SPLITS, parts)}})
    print(" ".join(f"{n}={len(p.subjects)}" for n, p in zip(SPLITS, parts)))
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    out = cfg.out
    ckpt_path = out / "iffn.ckpt"
    loss_log = out / "pretrain_loss.log"
    images = load_stack(split_handle(cfg, "train"))
    tc = cfg.train_config()
    steps = args.steps if args.steps is not None else tc.pretrain_steps
    with artifact_dir(out):
        start = 0
        optimizer = None
        if args.resume:
            model, header, arrays = load_params(ckpt_path, cfg.iffn_config())
            start = int(header["step"])
            optimizer = make_optimizer(model.parameters(), tc.pretrain_lr)
            if "optimizer" in header:
                from .checkpoint import load_optimizer_arrays
                load_optimizer_arrays(optimizer, arrays, header["optimizer"])
            mode = "a"
        else:
            model = build_iffn(cfg.iffn_config(), seed=cfg.seed)
            mode = "w"
        with open(loss_log, mode) as fh:
            def record(step, loss):
                fh.write(f"{step} {loss:.8f}\n")

            optimizer, losses = pretrain_iffn(model, images, steps, cfg.seed, cfg.patch_spec(), cfg.spectral_config(),
                                              tc.batch_size, tc.pretrain_lr, tc.grad_clip, optimizer, start, record)
        save_params(model, ckpt_path, optimizer, start + steps, extra={"seed": cfg.seed})
        write_provenance(out / "pretrain_provenance.json", cfg, "pretrain",
                         {"steps": [start, start + steps], "checksum": checksum(model)})
    if losses:
        print(f"pretrain steps {start}..{start + steps - 1} loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return EXIT_OK


def _validation_logger(cfg, model, schedule, fh):
    tc = cfg.train_config()
    if not tc.val_every:
        return None
    val = load_stack(split_handle(cfg, "val"))[: tc.val_samples]
    if len(val) == 0:
        return None

    def validate(step):
        rng = np.random.default_rng([cfg.seed, 7, step])
        report = evaluate_split(val, model_predictor(model, schedule, cfg.spectral_config()),
                                leave_one_out_masks(4), rng, diagnostics=False)
        fh.write(json.dumps({"step": step, "val_psnr": round(report.mean("psnr"), 6),
                             "val_ssim": round(report.mean("ssim"), 6)}) + "\n")
        model.train()

    return validate


def cmd_train(cfg: RunConfig, args) -> int:
    if args.unet_only and args.no_pretrained:
        raise UsageError("--unet-only and --no-pretrained are mutually exclusive")
    out = cfg.out
    variant = "unet" if args.unet_only else ("iffn" if args.no_pretrained else "pretrained")
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "amm.ckpt"
    metrics_log = out / (ckpt_path.stem + "_metrics.log")
    schedule = cfg.make_schedule()
    images = load_stack(split_handle(cfg, "train"))
    tc = cfg.train_config()
    steps = args.steps if args.steps is not None else tc.train_steps
    with artifact_dir(out):
        if args.resume:
            model, schedule, header, arrays = load_checkpoint(ckpt_path, cfg.model_config(header_conditioning(ckpt_path)),
                                                              cfg.iffn_config())
            start = int(header["step"])
            variant = header.get("extra", {}).get("variant", variant)
            optimizer = make_amm_optimizer(model, tc.lr, tc.iffn_lr_scale)
            restore_optimizer(optimizer, header, arrays)
            mode = "a"
        else:
            model = build_model(cfg.model_config("unet" if args.unet_only else "iffn"), cfg.iffn_config(), seed=cfg.seed)
            if variant == "pretrained":
                iffn_path = Path(args.iffn) if args.iffn else out / "iffn.ckpt"
                if not iffn_path.exists():
                    raise FileNotFoundError(f"pretrained IFFN checkpoint {iffn_path} not found "
                                            "(run pretrain or pass --no-pretrained)")
                pretrained, _, _ = load_params(iffn_path, cfg.iffn_config())
                load_pretrained_iffn(model, pretrained)
            start, optimizer, mode = 0, None, "w"
        with open(metrics_log, mode) as fh:
            validate = _validation_logger(cfg, model, schedule, fh)

            def record(step, metrics):
                if step % tc.log_every == 0 or step == start + steps - 1:
                    fh.write(json.dumps({"step": step, "loss": round(metrics["loss"], 8)}) + "\n")
                if validate and (step + 1) % tc.val_every == 0:
                    validate(step + 1)

            optimizer, losses = train_amm(model, images, schedule, steps, cfg.seed, cfg.spectral_config(),
                                          tc.batch_size, tc.lr, tc.grad_clip, optimizer, start, record,
                                          tc.iffn_lr_scale)
        save_checkpoint(ckpt_path, model, schedule, start + steps, optimizer, {"seed": cfg.seed},
                        extra={"variant": variant})
        write_provenance(out / (ckpt_path.stem + "_provenance.json"), cfg, "train",
                         {"variant": variant, "steps": [start, start + steps], "checksum": checksum(model)})
    if losses:
        print(f"train[{variant}] steps {start}..{start + steps - 1} loss {losses[0]:.5f} -> {losses[-1]:.5f}")
    return EXIT_OK


def header_conditioning(path) -> str:
    from .checkpoint import read_container

    header, _ = read_container(path)
    return header["model_config"]["conditioning"]


def _load_input(cfg: RunConfig, args) -> MultimodalSample:
    if args.record:
        header = json.loads(Path(args.record).read_text())
        root = Path(args.record).parent.parent
        return read_record(root, header["subject_id"], int(header["slice_index"]))
    return load_sample(split_handle(cfg, args.split), args.index)


def cmd_impute(cfg: RunConfig, args) -> int:
    try:
        mask = parse_presence(args.presence)
    except DatasetError as exc:
        raise UsageError(str(exc)) from None
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.out / "amm.ckpt"
    model, schedule, header, _ = load_checkpoint(ckpt_path)
    sample = _load_input(cfg, args)
    names = split_handle(cfg, "train").modality_names if (cfg.out / "splits").exists() else \
        ["FLAIR", "T1", "T1CE", "T2"]
    spec = mask_to_str(mask)
    out = Path(args.out) if args.out else cfg.out / "impute" / f"{sample.subject_id}_{sample.slice_index:04d}_{spec}"
    rng = np.random.default_rng([cfg.seed, int(spec, 2)])
    generated, composite = impute(model, sample.images, mask, schedule, rng, cfg.spectral_config())
    with artifact_dir(out):
        for kind, stack in (("generated", generated), ("composite", composite)):
            write_record(out / kind, MultimodalSample(stack, sample.subject_id, sample.slice_index), names)
            for name, channel in zip(names, stack):
                save_png(out / kind / f"{name}.png", channel)
        if args.dump_spectral:
            feats = spectral_features(sample.images * mask[:, None, None], cfg.spectral_config())
            (out / "spectral").mkdir(exist_ok=True)
            for name, channel in zip(names, feats):
                save_png(out / "spectral" / f"{name}.png", channel)
        write_provenance(out / "provenance.json", cfg, "impute", {
            "presence": args.presence, "presence_bits": spec, "checkpoint": str(ckpt_path),
            "checkpoint_sha256": header["sha256"], "subject_id": sample.subject_id,
            "slice_index": sample.slice_index,
        })
    print(f"imputed {sample.subject_id}/{sample.slice_index} presence {spec} -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    ckpt_path = Path(args.checkpoint) if args.checkpoint else cfg.out / "amm.ckpt"
    model, schedule, header, _ = load_checkpoint(ckpt_path)
    handle = split_handle(cfg, cfg.eval.split)
    images = load_stack(handle)
    if cfg.eval.max_samples:
        images = images[: cfg.eval.max_samples]
    all_configs = args.all_configs or cfg.eval.all_configs
    configs = all_presence_masks(4) if all_configs else leave_one_out_masks(4)
    table = correlation_table(load_stack(split_handle(cfg, "train")))
    out = Path(args.out) if args.out else cfg.out / "eval"
    meta = {"checkpoint": str(ckpt_path), "checkpoint_sha256": header["sha256"], "split": cfg.eval.split,
            "n_samples": int(len(images)), "all_configs": bool(all_configs), "seed": cfg.seed}
    with artifact_dir(out):
        model_report = evaluate_split(images, model_predictor(model, schedule, cfg.spectral_config(), cfg.eval.batch_size),
                                      configs, np.random.default_rng([cfg.seed, 11]), handle.modality_names,
                                      report_config={**meta, "method": "amm"})
        base_report = evaluate_split(images, CopyBaseline(table), configs, np.random.default_rng([cfg.seed, 11]),
                                     handle.modality_names, report_config={**meta, "method": "copy-baseline"})
        model_report.write(out / "model")
        base_report.write(out / "baseline")
        np.savetxt(out / "correlation_table.txt", table, fmt="%.8f")
        write_provenance(out / "provenance.json", cfg, "eval", meta)
    print(model_report.to_table(), end="")
    print(f"mean PSNR model {model_report.mean('psnr'):.3f} dB, copy baseline {base_report.mean('psnr'):.3f} dB")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config field (repeatable)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--output-dir", help="override the output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="ammdiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write the phantom dataset and split manifests")
    p.add_argument("--force", action="store_true", help="overwrite existing data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="Siamese masked-image pretraining of the IFFN")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="end-to-end AMM training")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--checkpoint", help="output checkpoint path (default <out>/amm.ckpt)")
    p.add_argument("--iffn", help="pretrained IFFN checkpoint (default <out>/iffn.ckpt)")
    p.add_argument("--no-pretrained", action="store_true", help="start from a randomly initialised IFFN")
    p.add_argument("--unet-only", action="store_true", help="bypass the IFFN; condition on the masked stack")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", parents=[common], help="synthesise all modalities for one slice")
    p.add_argument("--checkpoint")
    p.add_argument("--presence", required=True, help='comma-separated 0/1 flags, e.g. "1,0,0,1"')
    p.add_argument("--record", help="slice header JSON of the input record")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--dump-spectral", action="store_true", help="also write the high-frequency feature images")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("eval", parents=[common], help="leave-one-out (or all-config) metric reports")
    p.add_argument("--checkpoint")
    p.add_argument("--all-configs", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.override(key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir:
        cfg.output_dir = args.output_dir
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _setup_logging(args.verbose)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"ammdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(1)
    try:
        return args.func(cfg, args)
    except UsageError as exc:
        print(f"ammdiff: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, TrainingDivergence, ConfigError, FileExistsError,
            FileNotFoundError, OSError, ValueError, IndexError) as exc:
        print(f"ammdiff: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
