"""Command-line front end: data generation, training, evaluation, heatmaps,
the ablation grid, the multiplier sweep, and the built-in verification suite.

Configuration is flat ``section.key=value`` text; ``--set`` flags override the
file.  Every subcommand writes its artifacts plus a manifest (config hash,
seed, file checksums) under the output directory, and identical config + seed
reproduce every output byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import trainer as R
from . import guidance as G
from . import pnm
from .selftest import run_all

__all__ = ["main", "run", "export_heatmap"]

CSV_COLUMNS = ("epoch", "lr", "ce", "ggam", "total", "train_acc", "test_acc", "localization")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "seed": 0,
    "data.classes": 8,
    "data.train_per_class": 32,
    "data.test_per_class": 16,
    "data.size": 64,
    "data.patch": 8,
    "data.clutter": 3,
    "data.noise": 0.12,
    "data.body_ax": 22,
    "data.body_ay": 15,
    "data.body_jitter": 6,
    "data.seed": None,  # derived from the master seed unless set
    "model.channels": "16,32,64",
    "model.reduction": 4,
    "model.head_layers": 1,
    "model.spatial_mode": "eq3",
    "model.channel_attention": True,
    "model.spatial_attention": True,
    "model.ggam": True,
    "model.seed": None,
    "train.epochs": 60,
    "train.batch_size": 16,
    "train.lr": 0.1,
    "train.backbone_lr_factor": 0.1,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.lambda": 1.0,
    "train.seed": None,
    "ablate.seeds": "0,1,2",
    "sweep.lambdas": "1,2,3,4,5,6,7,8,9",
}


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config: {key} expects a boolean, got {raw!r}")
    if isinstance(default, int) or (default is None and not key.endswith("s")):
        try:
            return int(raw)
        except ValueError as e:
            raise UsageError(f"config: {key} expects an integer, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise UsageError(f"config: {key} expects a number, got {raw!r}") from e
    return str(raw)


def load_config(path=None, overrides=()):
    """Defaults, overlaid by the config file, overlaid by --set flags."""
    cfg = dict(DEFAULTS)
    entries = []
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            entries.append((key.strip(), value.strip(), f"{path}:{lineno}"))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        entries.append((key.strip(), value.strip(), "--set"))
    for key, value, where in entries:
        if key not in DEFAULTS:
            raise UsageError(f"{where}: unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def resolve_seeds(cfg):
    """Fan the master seed out to any domain seed not set explicitly."""
    master = cfg["seed"]
    for domain, key in (("data", 100), ("model", 101), ("train", 102)):
        if cfg[f"{domain}.seed"] is None:
            cfg[f"{domain}.seed"] = R.derive_seed(master, key)
    return cfg


def dataset_spec(cfg) -> D.DatasetSpec:
    return D.DatasetSpec(
        num_classes=cfg["data.classes"],
        train_per_class=cfg["data.train_per_class"],
        test_per_class=cfg["data.test_per_class"],
        size=cfg["data.size"],
        body_axes=(cfg["data.body_ax"], cfg["data.body_ay"]),
        body_jitter=cfg["data.body_jitter"],
        patch_size=cfg["data.patch"],
        clutter_count=cfg["data.clutter"],
        noise_level=cfg["data.noise"],
        seed=cfg["data.seed"],
    )


def model_config(cfg, spec: D.DatasetSpec) -> M.ModelConfig:
    channels = tuple(int(c) for c in str(cfg["model.channels"]).split(","))
    return M.ModelConfig(
        in_channels=spec.channels,
        width=spec.size,
        height=spec.size,
        channels=channels,
        reduction=cfg["model.reduction"],
        num_classes=spec.num_classes,
        channel_attention=cfg["model.channel_attention"],
        spatial_attention=cfg["model.spatial_attention"],
        ggam=cfg["model.ggam"],
        spatial_mode=cfg["model.spatial_mode"],
        head_layers=cfg["model.head_layers"],
        seed=cfg["model.seed"],
    )


def hyperparams(cfg) -> R.Hyperparams:
    return R.Hyperparams(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        backbone_lr_factor=cfg["train.backbone_lr_factor"],
        momentum=cfg["train.momentum"],
        weight_decay=cfg["train.weight_decay"],
        lam=cfg["train.lambda"],
        seed=cfg["train.seed"],
    )


# ---------------------------------------------------------------------------
# artifacts


def config_text(cfg) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class OutputDir:
    def __init__(self, out, subcommand, cfg):
        if out is None:
            raise UsageError(f"{subcommand}: missing --out output directory")
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.subcommand = subcommand
        self.cfg = cfg
        self.files = []
        resolved = config_text(cfg)
        self.config_hash = hashlib.sha256(resolved.encode()).hexdigest()
        (self.dir / "config.resolved").write_text(resolved)
        self.files.append("config.resolved")

    def path(self, name) -> Path:
        self.files.append(name)
        return self.dir / name

    def finish(self):
        manifest = {
            "subcommand": self.subcommand,
            "config_sha256": self.config_hash,
            "seed": self.cfg["seed"],
            "files": {name: _sha256(self.dir / name) for name in sorted(self.files)},
        }
        (self.dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


def write_csv(path: Path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def metrics_rows(metrics: R.RunMetrics):
    for em in metrics.epochs:
        yield (em.epoch, em.lr, em.ce, em.ggam, em.total, em.train_acc, em.test_acc, em.localization)


# ---------------------------------------------------------------------------
# subcommands


def _require(value, flag, subcommand):
    if value is None:
        raise UsageError(f"{subcommand}: missing required flag {flag}")
    return value


def _load_dataset(path, subcommand) -> D.Dataset:
    path = Path(_require(path, "--dataset", subcommand))
    if not path.exists():
        raise UsageError(f"{subcommand}: --dataset file not found: {path}")
    return D.load(path)


def cmd_gen_data(args, cfg) -> int:
    out = OutputDir(args.out, "gen-data", cfg)
    spec = dataset_spec(cfg)
    dataset = D.generate(spec)
    D.save(dataset, out.path("dataset.ggds"))
    if args.export_samples:
        for i in range(min(args.export_samples, len(dataset.train))):
            D.export_sample_ppm(dataset.train[i], out.path(f"sample_{i:03d}.ppm"))
    out.finish()
    print(f"gen-data: wrote {spec.train_count} train / {spec.test_count} test samples")
    return 0


def cmd_train(args, cfg) -> int:
    dataset = _load_dataset(args.dataset, "train")
    out = OutputDir(args.out, "train", cfg)
    config = model_config(cfg, dataset.spec)
    h = hyperparams(cfg)
    model = M.build(config)
    metrics = R.train(model, dataset, h)
    write_csv(out.path("metrics.csv"), CSV_COLUMNS, metrics_rows(metrics))
    M.save(model, out.path("checkpoint.ggck"))
    out.finish()
    final = metrics.epochs[-1]
    print(f"train: {h.epochs} epochs, final test_acc={final.test_acc!r} localization={final.localization!r}")
    return 0


def cmd_eval(args, cfg) -> int:
    dataset = _load_dataset(args.dataset, "eval")
    ckpt = Path(_require(args.checkpoint, "--checkpoint", "eval"))
    if not ckpt.exists():
        raise UsageError(f"eval: --checkpoint file not found: {ckpt}")
    model = M.load(ckpt)
    split = dataset.test if args.split == "test" else dataset.train
    accuracy = R.evaluate(model, split)
    localization = R.localization_score(model, split)
    out = OutputDir(args.out, "eval", cfg)
    out.path("eval.txt").write_text(
        f"split={args.split}\naccuracy={accuracy!r}\nlocalization={localization!r}\n"
    )
    out.finish()
    print(f"eval: split={args.split} accuracy={accuracy!r} localization={localization!r}")
    return 0


def export_heatmap(checkpoint, dataset_path, index, out_dir, split="test", cfg=None) -> int:
    """Render one sample's class-activation heatmap as PGM plus a composite PPM."""
    cfg = resolve_seeds(load_config()) if cfg is None else cfg
    dataset = _load_dataset(dataset_path, "heatmap")
    ckpt = Path(_require(checkpoint, "--checkpoint", "heatmap"))
    if not ckpt.exists():
        raise UsageError(f"heatmap: --checkpoint file not found: {ckpt}")
    model = M.load(ckpt)
    samples = dataset.test if split == "test" else dataset.train
    if not 0 <= index < len(samples):
        raise UsageError(f"heatmap: --index {index} out of range for {len(samples)} samples")
    sample = samples[index]
    trace = model.forward(sample.image, retain_graph=True)
    target = G.gradcam_weights(trace)
    heat = G.heatmap(trace.feature_maps, target, dataset.spec.size, dataset.spec.size)

    out = OutputDir(out_dir, "heatmap", cfg)
    pnm.write_pgm(out.path(f"heatmap_{split}_{index:04d}.pgm"), heat)
    composite = np.concatenate([sample.image.data, np.broadcast_to(heat, (3,) + heat.shape)], axis=1)
    pnm.write_ppm(out.path(f"composite_{split}_{index:04d}.ppm"), composite)
    out.finish()
    print(f"heatmap: sample {index} predicted class {trace.predicted}")
    return 0


def cmd_heatmap(args, cfg) -> int:
    return export_heatmap(args.checkpoint, args.dataset, args.index, args.out, args.split, cfg)


def cmd_ablate(args, cfg) -> int:
    dataset = _load_dataset(args.dataset, "ablate")
    out = OutputDir(args.out, "ablate", cfg)
    seeds = tuple(int(s) for s in str(cfg["ablate.seeds"]).split(","))
    config = model_config(cfg, dataset.spec)
    rows = R.ablation_grid(dataset, config, hyperparams(cfg), seeds=seeds)
    write_csv(
        out.path("ablation.csv"),
        ("spatial", "channel", "ggam", "accuracy", "localization"),
        ((int(r.spatial), int(r.channel), int(r.ggam), r.accuracy, r.localization) for r in rows),
    )
    out.finish()
    print(f"ablate: {len(rows)} rows over seeds {seeds}")
    return 0


def cmd_sweep_lambda(args, cfg) -> int:
    dataset = _load_dataset(args.dataset, "sweep-lambda")
    out = OutputDir(args.out, "sweep-lambda", cfg)
    lams = tuple(float(v) for v in str(cfg["sweep.lambdas"]).split(","))
    config = model_config(cfg, dataset.spec)
    rows = R.lambda_sweep(dataset, config, hyperparams(cfg), lams=lams)
    write_csv(
        out.path("lambda_sweep.csv"),
        ("lambda", "accuracy", "localization"),
        ((r.lam, r.accuracy, r.localization) for r in rows),
    )
    out.finish()
    print(f"sweep-lambda: {len(rows)} rows")
    return 0


def cmd_selftest(args, cfg) -> int:
    results, ok = run_all(seed=cfg["seed"])
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.detail})")
    passed = sum(r.passed for r in results)
    print(f"selftest: {passed}/{len(results)} checks passed")
    return 0 if ok else 2


# ---------------------------------------------------------------------------
# entry point


def _build_parser() -> _Parser:
    parser = _Parser(prog="ggam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand")

    def common(p, dataset=False, checkpoint=False):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--seed", type=int, help="master seed (fans out to data/model/train)")
        p.add_argument("--out", help="output directory")
        if dataset:
            p.add_argument("--dataset", help="dataset container path")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint path")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p)
    p.add_argument("--export-samples", type=int, default=0, metavar="N",
                   help="also dump the first N train samples as PPM")

    p = sub.add_parser("train", help="train a model and emit metrics + checkpoint")
    common(p, dataset=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("heatmap", help="export a class-activation heatmap for one sample")
    common(p, dataset=True, checkpoint=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--index", type=int, default=0, help="sample index within the split")

    p = sub.add_parser("ablate", help="run the 2^3 attention/guidance ablation grid")
    common(p, dataset=True)

    p = sub.add_parser("sweep-lambda", help="train across guidance multiplier values")
    common(p, dataset=True)

    p = sub.add_parser("selftest", help="run the gradient-check and oracle suites")
    common(p)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "ablate": cmd_ablate,
    "sweep-lambda": cmd_sweep_lambda,
    "selftest": cmd_selftest,
}


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            raise UsageError("missing subcommand")
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = resolve_seeds(load_config(args.config, overrides))
        return COMMANDS[args.subcommand](args, cfg)
    except UsageError as e:
        print(f"ggam: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ValueError, IndexError, FileNotFoundError, D.DatasetFormatError, M.CheckpointError) as e:
        print(f"ggam: error: {e}", file=sys.stderr)
        return 1
    except R.TrainingDiverged as e:
        print(f"ggam: training aborted: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # unexpected runtime failure
        print(f"ggam: unexpected failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
