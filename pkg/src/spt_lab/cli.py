"""``spt-lab``: synth -> pretrain -> harvest -> init -> train -> eval -> probe -> report.

Exit codes: 0 success, 1 usage error, 2 missing or unreadable artifact,
3 numeric failure (divergence).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataio import (ImageDataset, SynthSpec, load_container, load_dataset_dir, model_entries,
                     model_from_entries, prompt_entries, prompts_from_entries, save_container,
                     save_dataset_dir, synth_dataset)
from .diagnostics import NmiCurve, cka_trace, nmi_trace, read_curve_csv, write_curve_csv, write_summary_json
from .errors import ConfigError, DataError, DivergenceError, FormatError
from .prompt_init import (RANDOM_STRATEGIES, SOURCES, STRATEGIES, TokenPool, build_prompts, cross_layer_init,
                          harvest_tokens, vpt_uniform_bound)
from .prompts import trainable_parameters
from .tensor import precision
from .trainer import TrainConfig, accuracy, train
from .vit import VitConfig, VitModel

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3
VARIANTS = ("vpt-shallow", "vpt-deep", "spt-shallow", "spt-deep")

POOLS, PROMPTS, PROMPTS_META = "pools.sptc", "prompts.sptc", "prompts.meta.json"
TRAIN_LOG, CHECKPOINT, EPOCH_DIR = "train.jsonl", "checkpoint.sptc", "epochs"
NMI_CSV, CKA_CSV, SUMMARY, RESOLVED = "nmi.csv", "cka.csv", "summary.json", "run_config.json"


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    model: VitConfig = field(default_factory=VitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    variant: str = "spt-deep"
    init: str = "random-sample"
    n_prompts: int = 8
    frozen_prompts: bool = False
    source: str = "self_prompt"
    seed: int = 0
    fraction: float | None = None
    harvest_batch: int | None = None
    layers: list[int] | None = None
    data: str | None = None          # dataset directory; None means the synthetic task
    checkpoint: str | None = None
    prompts: str | None = None
    pools: str | None = None
    probe_images: int = 16
    out: str = "runs/default"
    f64: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.init not in STRATEGIES + RANDOM_STRATEGIES:
            raise ConfigError(f"unknown init strategy {self.init!r}")
        if self.variant.startswith("spt") and self.init in RANDOM_STRATEGIES:
            raise ConfigError(f"{self.variant} needs a non-random init strategy, got {self.init!r}")
        if self.n_prompts < 0:
            raise ConfigError("np must be >= 0")
        if self.source not in SOURCES:
            raise ConfigError(f"source must be one of {SOURCES}, got {self.source!r}")
        self.train.seed = self.seed

    @property
    def mode(self) -> str:
        return self.variant.split("-")[1]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def _section(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    return values


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults < config file < flag overrides."""
    merged = {k: dict(v) if isinstance(v, dict) else v for k, v in (file_values or {}).items()}
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if isinstance(v, dict):
            merged.setdefault(k, {}).update({kk: vv for kk, vv in v.items() if vv is not None})
        else:
            merged[k] = v
    if "np" in merged:
        merged["n_prompts"] = merged.pop("np")
    model = VitConfig.from_dict(_section(VitConfig, merged.pop("model", {}), "model"))
    train_cfg = TrainConfig(**_section(TrainConfig, merged.pop("train", {}), "train"))
    data = merged.pop("data", None)
    synth = SynthSpec(**_section(SynthSpec, merged.pop("synth", {}), "synth"))
    if isinstance(data, dict):
        raise ConfigError("[data] is a path; put synthetic settings under [synth]")
    _section(RunConfig, merged, "top level")
    return RunConfig(model=model, train=train_cfg, synth=synth, data=data, **merged)


def parse_layers(text: str | None) -> list[int] | None:
    """"0-6", "0,2,4" or "all" (None)."""
    if text is None or text == "all":
        return None
    out: list[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise ConfigError(f"cannot parse layers {text!r}") from None
    return sorted(set(out))


# --- artifact helpers -----------------------------------------------------

def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact: {path}")
    return path


def load_data(cfg: RunConfig) -> ImageDataset:
    if cfg.data is None:
        return synth_dataset(cfg.synth)
    return load_dataset_dir(_require(cfg.data))


def load_backbone(cfg: RunConfig) -> VitModel:
    path = cfg.checkpoint or cfg.out_dir / CHECKPOINT
    return model_from_entries(load_container(_require(path)))


def save_pools(path, pools: dict[int, TokenPool]) -> Path:
    return save_container(path, {f"pool.layer{i}": p.tokens for i, p in pools.items()})


def load_pools(path) -> dict[int, TokenPool]:
    entries = load_container(_require(path))
    return {int(k[10:]): TokenPool(int(k[10:]), v) for k, v in entries.items() if k.startswith("pool.layer")}


def _write_resolved(cfg: RunConfig, command: str) -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "config": cfg.to_dict()}
    (cfg.out_dir / RESOLVED).write_text(json.dumps(payload, indent=2, sort_keys=True))


# --- subcommands ----------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    ds = synth_dataset(cfg.synth)
    save_dataset_dir(ds, cfg.out_dir)
    counts = {s: int((ds.split == s).sum()) for s in ("train", "val", "test")}
    print(f"wrote synthetic dataset to {cfg.out_dir}: {counts}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig) -> int:
    ds = load_data(cfg)
    vit_cfg = VitConfig.from_dict({**cfg.model.to_dict(), "num_classes": ds.num_classes})
    model = VitModel(vit_cfg, seed=cfg.seed)
    full = TrainConfig(**{**asdict(cfg.train), "full_finetune": True})
    report = train(model, None, ds.subset("train"), ds.subset("val"), full,
                   log_path=cfg.out_dir / TRAIN_LOG)
    save_container(cfg.out_dir / CHECKPOINT, model_entries(model))
    print(f"pretrained backbone: final val acc {report.final_val_acc:.4f}")
    return EXIT_OK


def cmd_harvest(cfg: RunConfig) -> int:
    model = load_backbone(cfg)
    ds = load_data(cfg)
    layers = cfg.layers if cfg.layers is not None else list(range(model.config.depth + 1))
    pools = harvest_tokens(model, ds.subset("train").images, layers, fraction=cfg.fraction,
                           batch_size=cfg.harvest_batch, seed=cfg.seed)
    save_pools(cfg.out_dir / POOLS, pools)
    for i, p in pools.items():
        print(f"pool.layer{i}: {p.tokens.shape[0]} tokens x {p.tokens.shape[1]}")
    return EXIT_OK


def cmd_init(cfg: RunConfig) -> int:
    model = load_backbone(cfg) if (cfg.checkpoint or (cfg.out_dir / CHECKPOINT).exists()) else None
    mc = model.config if model is not None else cfg.model
    depth, dim = mc.depth, mc.dim
    start = time.perf_counter()
    if cfg.init in RANDOM_STRATEGIES:
        scale = vpt_uniform_bound(mc.patch_dim, dim) if cfg.init == "random-uniform" else None
        prompts = build_prompts(cfg.init, cfg.mode, cfg.n_prompts, depth, dim, seed=cfg.seed, scale=scale)
    else:
        pools = load_pools(cfg.pools or cfg.out_dir / POOLS)
        start = time.perf_counter()
        if cfg.mode == "deep":
            needed = {"self_prompt": range(depth), "first_P0": [0], "last_PL": [depth]}[cfg.source]
        else:
            needed = [0]
        missing = [i for i in needed if i not in pools]
        if missing:
            raise MissingArtifact(f"pools file lacks layers {missing}")
        if cfg.mode == "deep":
            prompts = cross_layer_init(pools, cfg.n_prompts, depth, cfg.source, cfg.init, cfg.seed)
        else:
            prompts = build_prompts(cfg.init, "shallow", cfg.n_prompts, depth, dim, pools, cfg.seed)
    seconds = time.perf_counter() - start
    prompts.set_frozen(cfg.frozen_prompts)
    save_container(cfg.out_dir / PROMPTS, prompt_entries(prompts))
    meta = {"strategy": cfg.init, "variant": cfg.variant, "source": cfg.source, "seed": cfg.seed,
            "n_prompts": cfg.n_prompts, "seconds": seconds}
    (cfg.out_dir / PROMPTS_META).write_text(json.dumps(meta, indent=2))
    print(f"{cfg.init} init ({cfg.variant}, N_p={cfg.n_prompts}): {seconds:.6f} s")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    model = load_backbone(cfg)
    prompts = prompts_from_entries(load_container(_require(cfg.prompts or cfg.out_dir / PROMPTS)))
    ds = load_data(cfg)
    if prompts.tokens[0].dtype != model.patch_proj.dtype:
        prompts = prompts.astype(model.patch_proj.dtype)
    prompts.set_frozen(cfg.frozen_prompts)
    model.reset_head(ds.num_classes, seed=cfg.seed)
    model.freeze_backbone(True)
    val = ds.subset("val")
    epoch_dir = cfg.out_dir / EPOCH_DIR

    def snapshot(epoch, m, p):
        entries = prompt_entries(p)
        entries.update({n: t.data for n, t in m.named_head()})
        save_container(epoch_dir / f"epoch{epoch:03d}.sptc", entries)

    snapshot(0, model, prompts)
    try:
        report = train(model, prompts, ds.subset("train"), val, cfg.train,
                       log_path=cfg.out_dir / TRAIN_LOG, on_epoch=snapshot)
    finally:
        entries = model_entries(model)
        entries.update(prompt_entries(prompts))
        save_container(cfg.out_dir / CHECKPOINT, entries)
    summary = trainable_parameters(model, prompts)
    print(f"trained {summary.total} parameters ({summary.prompt_count} prompt, {summary.head_count} head); "
          f"final val acc {report.final_val_acc:.4f}")
    if report.backbone_digest_before != report.backbone_digest_after:
        raise DivergenceError("backbone parameters changed during prompt tuning")
    return EXIT_OK


def _load_run(cfg: RunConfig):
    entries = load_container(_require(cfg.checkpoint or cfg.out_dir / CHECKPOINT))
    model = model_from_entries(entries)
    prompts = prompts_from_entries(entries) if "prompt.deep" in entries else None
    return model, prompts


def cmd_eval(cfg: RunConfig) -> int:
    model, prompts = _load_run(cfg)
    ds = load_data(cfg)
    split = "test" if (ds.split == "test").any() else "val"
    part = ds.subset(split)
    acc = accuracy(model, prompts, part.images, part.labels)
    print(f"{split} accuracy: {acc:.4f} ({len(part)} images)")
    return EXIT_OK


def cmd_probe(cfg: RunConfig) -> int:
    model, _ = _load_run(cfg)
    ds = load_data(cfg)
    probe = ds.subset("val").images[:cfg.probe_images]
    if len(probe) == 0:
        probe = ds.subset("train").images[:cfg.probe_images]
    snaps = sorted(_require(cfg.out_dir / EPOCH_DIR).glob("epoch*.sptc"))
    if not snaps:
        raise MissingArtifact(f"no epoch checkpoints under {cfg.out_dir / EPOCH_DIR}")
    curve = NmiCurve()
    cka_rows = []
    for snap in snaps:
        epoch = int(snap.stem[5:])
        prompts = prompts_from_entries(load_container(snap))
        curve.add(epoch, nmi_trace(model, prompts, probe))
        mat = cka_trace(model, prompts, probe)
        cka_rows.extend((epoch, i + 1, j + 1, float(mat[i, j]))
                        for i in range(mat.shape[0]) for j in range(mat.shape[1]))
    write_curve_csv(cfg.out_dir / NMI_CSV, curve.rows())
    with (cfg.out_dir / CKA_CSV).open("w") as fh:
        fh.write("epoch,prompt_layer,patch_layer,value\n")
        for e, i, j, v in cka_rows:
            fh.write(f"{e},{i},{j},{v:.10g}\n")
    print(f"probed {len(snaps)} checkpoints x {model.config.depth} layers")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    log = _require(cfg.out_dir / TRAIN_LOG)
    records = [json.loads(line) for line in log.read_text().splitlines() if line.strip()]
    summary: dict = {"epochs": len(records)}
    if records:
        summary["final_val_acc"] = records[-1].get("val_acc")
        summary["best_val_acc"] = max((r["val_acc"] for r in records if r["val_acc"] == r["val_acc"]),
                                      default=None)
        summary["final_train_loss"] = records[-1].get("train_loss")
    nmi_path = cfg.out_dir / NMI_CSV
    if nmi_path.exists():
        by_epoch: dict[int, list[float]] = {}
        for e, _, v in read_curve_csv(nmi_path):
            by_epoch.setdefault(e, []).append(v)
        summary["nmi_mean_by_epoch"] = {str(e): float(np.mean(v)) for e, v in sorted(by_epoch.items())}
    meta_path = cfg.out_dir / PROMPTS_META
    if meta_path.exists():
        summary["init"] = json.loads(meta_path.read_text())
    write_summary_json(cfg.out_dir / SUMMARY, summary)
    for k, v in summary.items():
        if not isinstance(v, dict):
            print(f"{k}: {v}")
    return EXIT_OK


HELP = {
    "synth": "write the synthetic task as a dataset directory",
    "pretrain": "train a backbone from scratch (stand-in for a pretrained checkpoint)",
    "harvest": "collect per-layer patch-token pools",
    "init": "build a prompt set from pools or at random",
    "train": "tune prompts and head over the frozen backbone",
    "eval": "print test accuracy of a trained run",
    "probe": "NMI and CKA per epoch checkpoint",
    "report": "summarize a run directory",
}

COMMANDS = {"synth": cmd_synth, "pretrain": cmd_pretrain, "harvest": cmd_harvest, "init": cmd_init,
            "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "report": cmd_report}


# --- argument parsing -----------------------------------------------------

class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML file; flags override its values")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--init", choices=STRATEGIES + RANDOM_STRATEGIES)
    common.add_argument("--np", type=int, dest="np", help="prompt length N_p")
    common.add_argument("--seed", type=int)
    common.add_argument("--frozen-prompts", action="store_true", default=None)
    common.add_argument("--fraction", type=float, help="share of training images to harvest")
    common.add_argument("--harvest-batch", type=int, help="harvest one random batch of this many images")
    common.add_argument("--layers", help='pool layers: "0-6", "0,3,6" or "all"')
    common.add_argument("--source", choices=SOURCES, help="cross-layer pool source for deep prompts")
    common.add_argument("--out", help="run directory")
    common.add_argument("--data", help="dataset directory with train/val/test.sptc")
    common.add_argument("--checkpoint", help="model checkpoint (default: OUT/checkpoint.sptc)")
    common.add_argument("--prompts", help="prompt set (default: OUT/prompts.sptc)")
    common.add_argument("--pools", help="token pools (default: OUT/pools.sptc)")
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--probe-images", type=int)
    common.add_argument("--f64", action="store_true", default=None, help="64-bit verification mode")

    parser = _Parser(prog="spt-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    file_values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifact(f"missing config file: {path}")
        try:
            file_values = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None
    if args.layers is not None:
        file_values["layers"] = parse_layers(args.layers)
    elif isinstance(file_values.get("layers"), str):
        file_values["layers"] = parse_layers(file_values["layers"])
    overrides = {
        "variant": args.variant, "init": args.init, "np": args.np, "seed": args.seed,
        "frozen_prompts": args.frozen_prompts, "fraction": args.fraction, "harvest_batch": args.harvest_batch,
        "source": args.source, "out": args.out, "data": args.data, "checkpoint": args.checkpoint,
        "prompts": args.prompts, "pools": args.pools, "probe_images": args.probe_images, "f64": args.f64,
        "train": {"epochs": args.epochs, "base_lr": args.lr},
    }
    if args.epochs is not None:
        warm = file_values.get("train", {}).get("warmup_epochs", TrainConfig.warmup_epochs)
        if warm >= args.epochs:
            overrides["train"]["warmup_epochs"] = max(0, args.epochs // 10)
    return resolve_config(file_values, overrides)


@contextlib.contextmanager
def _thread_cap():
    n = os.environ.get("SPT_LAB_THREADS")
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = config_from_args(args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as err:
        print(f"spt-lab: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as err:
        print(f"spt-lab: {err}", file=sys.stderr)
        return EXIT_MISSING

    _write_resolved(cfg, args.command)
    dtype = np.float64 if cfg.f64 else np.float32
    try:
        with _thread_cap(), precision(dtype):
            return COMMANDS[args.command](cfg)
    except (MissingArtifact, FormatError, DataError) as err:
        print(f"spt-lab: {err}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as err:
        print(f"spt-lab: config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as err:
        print(f"spt-lab: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
