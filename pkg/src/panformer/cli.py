"""Command-line entry point: ``panformer <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments or configuration.
Failures print a one-line JSON object on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import (
    PROFILES,
    DatasetManifest,
    ParameterError,
    PFRError,
    RasterImage,
    crop_patches,
    degrade_wald,
    denormalize,
    normalize,
    read_pfr,
    synthetic_scene,
    write_patches,
    write_pfr,
)
from .gradcheck import run_suite
from .metrics import MetricsReport, evaluate, format_table, prediction_path
from .model import (
    FUSION_VARIANTS,
    PARAM_BAND,
    REPORTED_PARAMS,
    ConfigError,
    PanFormerConfig,
    PanFormerModel,
    param_count,
)
from .tensor import DimensionError
from .training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    substream,
    train,
    AdamState,
)

DEFAULT_SEED = 42
CONFIG_ECHO = "resolved_config.json"


class UsageError(Exception):
    """Bad arguments or configuration (exit code 2)."""


@dataclass(frozen=True)
class DataConfig:
    sigma: float = 1.0
    bit_depth: int = 10
    bands: int = 4
    patch: int = 256
    test_patch: int = 400
    count: int = 24_000
    stride: int | None = None
    satellite: str = "gaofen2"


@dataclass(frozen=True)
class PathsConfig:
    data: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class RunConfig:
    model: PanFormerConfig = field(default_factory=PanFormerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": dataclasses.asdict(self.data), "paths": dataclasses.asdict(self.paths)}

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {"model", "train", "data", "paths"}
        unknown = sorted(set(raw) - sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        return cls(
            model=PanFormerConfig.from_dict(raw.get("model", {})),
            train=TrainConfig.from_dict(raw.get("train", {})),
            data=_strict(DataConfig, raw.get("data", {}), "data"),
            paths=_strict(PathsConfig, raw.get("paths", {}), "paths"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)


def _strict(kind, values: dict, section: str):
    known = {f.name for f in dataclasses.fields(kind)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {unknown}")
    return kind(**values)


def echo_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_ECHO).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _argdict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _need_file(path, label: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{label}: no such file {p}")
    return p


def _data_manifests(data_dir) -> tuple[DatasetManifest, DatasetManifest]:
    """(train, eval) manifests: either DIR/manifest.json or DIR/train + DIR/test."""
    root = Path(data_dir)
    if (root / "manifest.json").is_file():
        m = DatasetManifest.load(root / "manifest.json")
        return m, m
    train_path, test_path = root / "train" / "manifest.json", root / "test" / "manifest.json"
    if not train_path.is_file():
        raise UsageError(f"--data: neither {root / 'manifest.json'} nor {train_path} exists")
    tr = DatasetManifest.load(train_path)
    return tr, (DatasetManifest.load(test_path) if test_path.is_file() else tr)


# --------------------------------------------------------------------------
# inference helpers


def predict(model: PanFormerModel, pan: RasterImage, ms: RasterImage) -> RasterImage:
    if pan.height != 4 * ms.height or pan.width != 4 * ms.width:
        raise DimensionError(f"PAN {pan.samples.shape} must be 4x MS {ms.samples.shape} spatially")
    with T.no_grad():
        p = normalize(pan).data.astype(np.float32)[None]
        m = normalize(ms).data.astype(np.float32)[None]
        out = model(T.Tensor(p), T.Tensor(m))
    return denormalize(out.data[0], ms.bit_depth)


def predict_manifest(model: PanFormerModel, manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, entry in enumerate(manifest.entries):
        pair = manifest.load_pair(i)
        write_pfr(predict(model, pair.pan, pair.lrms), prediction_path(out, entry))
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth_scene(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pan, ms = synthetic_scene(args.ms_size, args.bands, args.bit_depth, seed=args.seed)
    write_pfr(pan, out / "pan.pfr")
    write_pfr(ms, out / "ms.pfr")
    echo_config(out, {"command": "synth-scene", **_argdict(args)})
    print(f"wrote {out / 'pan.pfr'} ({pan.height}x{pan.width}x1) and {out / 'ms.pfr'} "
          f"({ms.height}x{ms.width}x{ms.bands}), bit depth {args.bit_depth}")
    return 0


def cmd_prepare_data(args) -> int:
    pan = read_pfr(_need_file(args.pan, "--pan"))
    ms = read_pfr(_need_file(args.ms, "--ms"))
    if pan.bit_depth != ms.bit_depth:
        raise UsageError(f"--pan/--ms: bit depths differ ({pan.bit_depth} vs {ms.bit_depth})")
    if pan.height != 4 * ms.height or pan.width != 4 * ms.width:
        raise UsageError(f"--pan/--ms: PAN {pan.height}x{pan.width} is not 4x MS {ms.height}x{ms.width}")
    patch = args.patch if args.patch is not None else (256 if args.split == "train" else 400)
    lr_pan, lr_ms, gt = degrade_wald(pan, ms, args.sigma)
    crop_seed = int(substream(args.seed, "cropping").integers(0, 2**63 - 1))
    if args.split == "train":
        pairs = crop_patches(lr_pan, lr_ms, gt, patch, "random", count=args.count, seed=crop_seed)
    else:
        pairs = crop_patches(lr_pan, lr_ms, gt, patch, "ordered", stride=args.stride or patch)
    manifest = DatasetManifest(split=args.split, satellite=args.satellite, bit_depth=ms.bit_depth,
                               bands=ms.bands, sigma=args.sigma, decimate_offset=0)
    out = Path(args.out)
    write_patches(pairs, out, manifest, prefix=args.split)
    resolved = {"command": "prepare-data", **_argdict(args), "patch": patch,
                "stride": args.stride or patch if args.split == "test" else None}
    echo_config(out, resolved)
    print(f"{args.split}: {len(pairs)} patches of {patch}x{patch} -> {out / 'manifest.json'}")
    return 0


def _build_model(cfg: RunConfig) -> PanFormerModel:
    return PanFormerModel(cfg.model, substream(cfg.train.seed, "init"))


def cmd_train(args) -> int:
    cfg = RunConfig.load(_need_file(args.config, "--config"))
    train_m, _ = _data_manifests(args.data)
    if train_m.bands != cfg.model.bands:
        raise UsageError(f"--data has {train_m.bands} bands but model.bands={cfg.model.bands}")
    out = Path(args.out)
    echo_config(out, {"command": "train", "data": str(args.data), **cfg.to_dict()})
    model = _build_model(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None
    res = train(model, train_m, cfg.train, out, resume=resume,
                on_log=lambda r: print(json.dumps(r), flush=True))
    print(f"checkpoint: {out / 'checkpoint.pfck'} (step {res.checkpoint.step})")
    return 0


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(_need_file(args.ckpt, "--ckpt"))
    model = ckpt.build_model()
    out = Path(args.out)
    if args.manifest:
        manifest = DatasetManifest.load(_need_file(args.manifest, "--manifest"))
        predict_manifest(model, manifest, out)
        echo_config(out, {"command": "infer", **_argdict(args), "model": ckpt.model_config})
        print(f"wrote {len(manifest)} predictions to {out}")
        return 0
    if not (args.pan and args.ms):
        raise UsageError("infer needs --pan and --ms, or --manifest")
    pan = read_pfr(_need_file(args.pan, "--pan"))
    ms = read_pfr(_need_file(args.ms, "--ms"))
    if ms.bands != model.cfg.bands:
        raise UsageError(f"--ms has {ms.bands} bands but the checkpoint model expects {model.cfg.bands}")
    pred = predict(model, pan, ms)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pfr(pred, out)
    Path(str(out) + ".config.json").write_text(
        json.dumps({"command": "infer", **_argdict(args), "model": ckpt.model_config}, indent=2, sort_keys=True))
    print(f"wrote {out} ({pred.height}x{pred.width}x{pred.bands}, {pred.bit_depth}-bit)")
    return 0


def cmd_evaluate(args) -> int:
    manifest = DatasetManifest.load(_need_file(args.manifest, "--manifest"))
    report = evaluate(manifest, args.pred)
    path = Path(args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    table = report.to_table()
    Path(str(path) + ".txt").write_text(table + "\n")
    Path(str(path) + ".config.json").write_text(
        json.dumps({"command": "evaluate", **_argdict(args)}, indent=2, sort_keys=True))
    print(table)
    return 0


def cmd_ablate(args) -> int:
    cfg = RunConfig.load(_need_file(args.config, "--config"))
    train_m, eval_m = _data_manifests(args.data)
    out = Path(args.out)
    echo_config(out, {"command": "ablate", "data": str(args.data), **cfg.to_dict()})
    rows, curves, summary = [], {}, {}
    labels = {"concat": "Concat", "pan_x_ms": "PAN-X-MS", "ms_x_pan": "MS-X-PAN", "bidirectional": "PanFormer"}
    for variant in FUSION_VARIANTS:
        run_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, fusion_variant=variant))
        vdir = out / variant
        echo_config(vdir, {"command": "ablate", "variant": variant, **run_cfg.to_dict()})
        model = _build_model(run_cfg)
        t0 = time.perf_counter()
        res = train(model, train_m, run_cfg.train, vdir)
        elapsed = time.perf_counter() - t0
        predict_manifest(model, eval_m, vdir / "pred")
        report = evaluate(eval_m, vdir / "pred")
        (vdir / "report.json").write_text(report.to_json() + "\n")
        curves[variant] = [[r["iter"], r["loss"]] for r in res.log]
        means = report.means
        rows.append((labels[variant], means))
        summary[variant] = {"label": labels[variant], "params": param_count(model), "means": {
            k: ("inf" if v is not None and v == float("inf") else v) for k, v in means.items()},
            "final_loss": res.log[-1]["loss"] if res.log else None, "train_seconds": round(elapsed, 2)}
        print(f"{labels[variant]}: done in {elapsed:.1f}s", flush=True)
    table = format_table(rows, title="Fusion ablation (desk scale; not comparable to full-scale results)")
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps({"variants": summary}, indent=2) + "\n")
    (out / "loss_curves.json").write_text(json.dumps(curves) + "\n")
    print(table)
    return 0


def cmd_bench(args) -> int:
    if args.ckpt:
        model = load_checkpoint(_need_file(args.ckpt, "--ckpt")).build_model()
    elif args.config:
        cfg = RunConfig.load(_need_file(args.config, "--config"))
        model = _build_model(cfg)
    else:
        raise UsageError("bench needs --ckpt or --config")
    if args.size < 4 or args.size % 4:
        raise UsageError(f"--size must be a positive multiple of 4, got {args.size}")
    if args.repeat < 1:
        raise UsageError(f"--repeat must be >= 1, got {args.repeat}")
    rng = np.random.default_rng(args.seed)
    pan = T.Tensor(rng.random((1, args.size, args.size, 1)))
    ms = T.Tensor(rng.random((1, args.size // 4, args.size // 4, model.cfg.bands)))
    times = []
    with T.no_grad():
        for i in range(2 + args.repeat):
            t0 = time.perf_counter()
            model(pan, ms)
            if i >= 2:
                times.append(time.perf_counter() - t0)
    result = {"median_seconds": statistics.median(times), "mean_seconds": statistics.fmean(times), "times": times, "params": param_count(model),
              "protocol": f"forward only, batch 1, PAN {args.size}x{args.size}x1 + MS "
                          f"{args.size // 4}x{args.size // 4}x{model.cfg.bands}, float32, no I/O, "
                          f"median of {args.repeat} runs after 2 warm-ups, single process"}
    print(json.dumps(result, indent=2))
    return 0


def cmd_param_count(args) -> int:
    cfg = RunConfig.load(_need_file(args.config, "--config")) if args.config else RunConfig()
    counts = {}
    for variant in FUSION_VARIANTS:
        mcfg = dataclasses.replace(cfg.model, fusion_variant=variant)
        counts[variant] = param_count(PanFormerModel(mcfg, 0))
    n = counts[cfg.model.fusion_variant]
    lo, hi = PARAM_BAND
    verdict = "PASS" if lo <= n <= hi else "FAIL"
    spread = (max(counts.values()) - min(counts.values())) / max(counts.values())
    print(f"parameters ({cfg.model.fusion_variant}): {n}")
    print(f"{verdict}: band [{lo}, {hi}] around reported {REPORTED_PARAMS}")
    for variant, c in counts.items():
        print(f"  {variant:<14} {c}")
    print(f"variant spread: {spread:.4%}")
    return 0


def cmd_grad_check(args) -> int:
    t0 = time.perf_counter()
    results = run_suite(args.seed, args.samples, report=lambda line: print(line, flush=True))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - t0:.1f}s")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(2, "UsageError", f"{self.prog}: {message}")


def _fail(code: int, kind: str, message: str):
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    raise SystemExit(code)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-scene", help="write a synthetic PAN/MS pair as PFR files")
    p.add_argument("--out", required=True)
    p.add_argument("--ms-size", type=int, default=128)
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--bit-depth", type=int, default=10, choices=(10, 11, 16))
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_synth_scene)

    p = sub.add_parser("prepare-data", help="Wald degradation and patch cropping")
    p.add_argument("--pan", required=True)
    p.add_argument("--ms", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", required=True, choices=("train", "test"))
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--patch", type=int, default=None, help="PAN/GT patch side (default 256 train, 400 test)")
    p.add_argument("--count", type=int, default=24_000, help="random train patches")
    p.add_argument("--stride", type=int, default=None, help="test tiling stride in PAN pixels")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--satellite", default="gaofen2", choices=sorted(PROFILES) + ["synthetic"])
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model from a RunConfig")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="pan-sharpen one PAN/MS pair or a whole manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pan")
    p.add_argument("--ms")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/ERGAS/SCC over a test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and evaluate all four fusion variants")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="median forward time")
    p.add_argument("--ckpt")
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("param-count", help="count trainable parameters")
    p.add_argument("--config")
    p.set_defaults(func=cmd_param_count)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, ParameterError, FileNotFoundError, PFRError, CheckpointError) as exc:
        _fail(2, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        _fail(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
