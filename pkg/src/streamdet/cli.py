"""Command-line entry point: ``streamdet <subcommand> [options]``.

Every run writes into ``$STREAMDET_OUT/<subcommand>-<config hash>`` (default
``runs/``) and starts with a ``header.json`` holding the resolved config,
its hash, the seed and the package version.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from . import __version__

log = logging.getLogger("streamdet")

OUT_ENV = "STREAMDET_OUT"
SUBCOMMANDS = ("gen", "gtdb", "train", "infer", "eval", "bench", "sampler-dump", "ablate", "stats")
FUSION_CHOICES = ("add", "max", "concat", "gru", "none")


class ConfigError(ValueError):
    """Bad configuration; reported as a one-line diagnostic with exit code 2."""


@dataclass(frozen=True)
class RunConfig:
    subcommand: str = ""
    root: str | None = None
    test_root: str | None = None
    model: str | None = None
    gt_db: str | None = None
    # grid
    grid_extent: float = 32.0
    cell_size: float = 1.0
    # fusion
    pc: bool = True
    fm: str = "concat"
    pm: str = "concat"
    # schedule and optimizer
    l_max: int = 20
    dtsl: bool = True
    epochs: int = 8
    batch_size: int = 4
    lr: float = 0.05
    gt_foreground: bool = False
    # augmentation
    aug: bool = False
    gt_paste: int = 0
    # data generation
    sequences: int = 8
    frames: int = 100
    world: dict = field(default_factory=dict)
    # inference / eval
    history: int = 0
    score_min: float = 0.1
    nms_radius: float = 1.5
    thresholds: tuple = (0.5, 1.0, 2.0, 4.0)
    eval_start: int = 0
    eval_stride: int = 1
    # bench
    mode: str = "int"
    k: int = 1
    warmup: int = 50
    points_per_frame: int = 2000
    # sampler-dump without a dataset
    lengths: tuple = ()
    # misc
    seed: int = 0
    threads: int | None = None

    def validate(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        for name in ("fm", "pm"):
            if getattr(self, name) not in FUSION_CHOICES:
                raise ConfigError(f"{name} must be one of {', '.join(FUSION_CHOICES)}")
        if self.frames <= 0:
            raise ConfigError("duration must be positive")
        if self.sequences <= 0:
            raise ConfigError("sequences must be positive")
        if self.cell_size <= 0 or self.grid_extent <= 0:
            raise ConfigError("grid_extent and cell_size must be positive")
        if self.l_max < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("l_max, epochs and batch_size must be >= 1")
        if self.history < 0:
            raise ConfigError("history must be >= 0 (0 = unlimited)")
        if self.mode not in ("int", "concat"):
            raise ConfigError("mode must be int or concat")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if self.subcommand == "bench" and self.frames <= self.warmup:
            raise ConfigError("frames must exceed warmup")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.world:
            from .stream_sim import WorldConfig

            try:
                WorldConfig.from_dict(self.world)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"world: {e}") from None

    def canonical(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["lengths"] = list(self.lengths)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_FIELDS = {f.name: f for f in fields(RunConfig)}
ALIASES = {"seq_len": "l_max"}


def _coerce(key: str, raw: str):
    """Typed value for ``key`` from its text form."""
    text = raw.strip()
    low = text.lower()
    if key.startswith("world."):
        try:
            return json.loads(text)
        except json.JSONDecodeError:
            return text
    f = _FIELDS[key]
    kind = str(f.type)
    if low in ("none", "null") and "None" in kind:
        return None
    if kind.startswith("bool"):
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"{key}: expected on/off, got {raw!r}")
    if kind.startswith("int"):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None
    if kind.startswith("float"):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from None
    if kind.startswith("tuple"):
        parts = [p for p in text.strip("()[]").split(",") if p.strip()]
        try:
            return tuple(float(p) if key == "thresholds" else int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"{key}: expected a comma-separated list, got {raw!r}") from None
    return text


def parse_pairs(pairs, source: str) -> dict:
    """``key=value`` items into typed overrides; unknown keys are rejected."""
    out: dict = {}
    for n, item in enumerate(pairs, 1):
        line = item.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key.startswith("world."):
            key = key.replace("-", "_")
            key = ALIASES.get(key, key)
        if key not in _FIELDS and not key.startswith("world."):
            raise ConfigError(f"{source}:{n}: unknown config key {key!r}")
        if key in ("subcommand", "world"):
            raise ConfigError(f"{source}:{n}: {key!r} cannot be set here")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_pairs(text.splitlines(), str(path))


def build_config(sub: str, file_values: dict, flag_values: dict) -> RunConfig:
    merged = {**file_values, **flag_values}
    world = {k[len("world."):]: v for k, v in merged.items() if k.startswith("world.")}
    plain = {k: v for k, v in merged.items() if not k.startswith("world.")}
    cfg = replace(RunConfig(subcommand=sub), world=world, **plain)
    cfg.validate()
    return cfg


# --- argument parsing -----------------------------------------------------

FLAG_KEYS = {
    "root": str, "test_root": str, "model": str, "gt_db": str, "frames": str, "sequences": str, "seed": str,
    "epochs": str, "batch_size": str, "seq_len": str, "dtsl": str, "aug": str, "gt_paste": str, "pc": str,
    "fm": str, "pm": str, "history": str, "mode": str, "k": str, "warmup": str, "threads": str, "lr": str,
    "lengths": str, "points_per_frame": str, "grid_extent": str, "cell_size": str, "score_min": str,
}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamdet", description="Streaming multi-frame BEV detection toolkit.")
    p.add_argument("--version", action="version", version=f"streamdet {__version__}")
    sub = p.add_subparsers(dest="subcommand", metavar="subcommand")
    helps = {
        "gen": "generate a synthetic dataset", "gtdb": "build the ground-truth object database",
        "train": "train a model with the sequence sampler", "infer": "stream detections to JSON lines",
        "eval": "compute AP on a dataset", "bench": "latency benchmark (memory-bank engine vs concat-k)",
        "sampler-dump": "write a training schedule as JSON lines", "ablate": "fusion-source ablation sweep",
        "stats": "per-sequence point/box counts as CSV",
    }
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key in FLAG_KEYS:
            sp.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return p


def _flag_overrides(ns) -> dict:
    pairs = []
    for key in FLAG_KEYS:
        v = getattr(ns, key, None)
        if v is not None:
            pairs.append(f"{ALIASES.get(key, key)}={v}")
    out = parse_pairs(pairs, "flags")
    out.update(parse_pairs(ns.set, "--set"))
    return out


# --- run directory --------------------------------------------------------

def run_dir(cfg: RunConfig) -> Path:
    base = Path(os.environ.get(OUT_ENV, "runs"))
    d = base / f"{cfg.subcommand}-{cfg.digest()[:12]}"
    d.mkdir(parents=True, exist_ok=True)
    header = {"subcommand": cfg.subcommand, "config": cfg.canonical(), "config_hash": cfg.digest(),
              "seed": cfg.seed, "version": __version__}
    (d / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return d


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _spec(cfg: RunConfig):
    from .image_fusion import GridSpec

    return GridSpec.centered(cfg.grid_extent, cfg.cell_size)


def _fusion(cfg: RunConfig):
    from .model import FusionConfig

    return FusionConfig(pc=cfg.pc, fm=None if cfg.fm == "none" else cfg.fm, pm=None if cfg.pm == "none" else cfg.pm)


def _world(cfg: RunConfig, **extra):
    from .stream_sim import WorldConfig

    d = {**cfg.world, **extra}
    d.setdefault("duration", cfg.frames)
    return WorldConfig.from_dict(d)


def _engine_cfg(cfg: RunConfig):
    from .pipeline import EngineConfig

    return EngineConfig(score_min=cfg.score_min, nms_radius=cfg.nms_radius)


def _load_model(cfg: RunConfig):
    from .model import ToyModel

    model, spec = ToyModel.load(_require(cfg.model, "model"))
    return model, spec


# --- subcommands ----------------------------------------------------------

def cmd_gen(cfg: RunConfig, out: Path) -> dict:
    from .stream_sim import generate_dataset

    root = Path(cfg.root) if cfg.root else out / "dataset"
    ds = generate_dataset(root, _world(cfg), cfg.sequences, cfg.seed)
    (out / "stats.csv").write_text(ds.stats_csv())
    return {"dataset": str(root), "sequences": len(ds.sequences)}


def cmd_gtdb(cfg: RunConfig, out: Path) -> dict:
    from .stream_sim import build_gt_database

    db = build_gt_database(_require(cfg.root, "dataset"))
    target = Path(cfg.gt_db) if cfg.gt_db else out / "gtdb"
    db.save(target)
    return {"gt_db": str(target), "objects": len(db)}


def _aug_ranges(cfg: RunConfig):
    from .seq_aug import AugRanges

    if not cfg.aug and cfg.gt_paste == 0:
        return None
    base = AugRanges() if cfg.aug else AugRanges.none()
    return replace(base, n_paste=cfg.gt_paste)


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    from .model import ToyModel
    from .pipeline import TrainConfig, train
    from .seq_aug import GtDatabase
    from .stream_sim import Dataset

    ds = Dataset(_require(cfg.root, "dataset"))
    db = GtDatabase.load(_require(cfg.gt_db, "gt database")) if cfg.gt_paste else None
    spec = _spec(cfg)
    model = ToyModel.init(_fusion(cfg), seed=cfg.seed)
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, l_max=cfg.l_max, dtsl=cfg.dtsl,
                       seed=cfg.seed, gt_foreground=cfg.gt_foreground)
    hist = train(model, ds, spec, tcfg, aug_ranges=_aug_ranges(cfg), gt_db=db)
    path = Path(cfg.model) if cfg.model else out / "model.ckpt"
    model.save(path, spec)
    rows = ["epoch,segment_length,loss"] + [f"{i},{s},{l:.9f}" for i, (s, l) in
                                            enumerate(zip(hist.segment_length, hist.epoch_loss))]
    (out / "train_log.csv").write_text("\n".join(rows) + "\n")
    return {"model": str(path), "final_loss": hist.epoch_loss[-1], "forward_passes": hist.forward_passes}


def cmd_infer(cfg: RunConfig, out: Path) -> dict:
    from .eval_bench import infer_with_history
    from .pipeline import Engine
    from .stream_sim import Dataset

    ds = Dataset(_require(cfg.root, "dataset"))
    model, spec = _load_model(cfg)
    n = 0
    with open(out / "detections.jsonl", "w") as f:
        for sid in sorted(ds.sequences):
            frames = list(ds.stream(sid))
            if cfg.history:
                dets = infer_with_history(model, spec, frames, cfg.history, range(len(frames)), _engine_cfg(cfg))
            else:
                eng = Engine(model, spec, _engine_cfg(cfg))
                dets = [eng.step(fr, reset=i == 0) for i, fr in enumerate(frames)]
            for fr, ds_ in zip(frames, dets):
                f.write(json.dumps({"seq": sid, "frame": fr.frame_index, "timestamp": fr.timestamp,
                                    "detections": [d.to_dict() for d in ds_]}, sort_keys=True) + "\n")
                n += 1
    return {"frames": n, "output": str(out / "detections.jsonl")}


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    from .eval_bench import evaluate_model
    from .stream_sim import Dataset

    ds = Dataset(_require(cfg.root, "dataset"))
    model, spec = _load_model(cfg)
    seqs = [list(ds.stream(s)) for s in sorted(ds.sequences)]
    res = evaluate_model(model, spec, seqs, cfg.history or None, cfg.eval_start, cfg.eval_stride,
                         _engine_cfg(cfg), cfg.thresholds)
    (out / "eval.csv").write_text(res.to_csv())
    (out / "eval.json").write_bytes(res.to_bytes())
    return {"mAP": res.mAP}


def bench_world(cfg: RunConfig):
    """Fixed-budget stream so every frame carries the same number of points."""
    base = {"points_per_frame": cfg.points_per_frame, "n_static": 40, "n_moving": 8, "obj_points": 400,
            "drop_max": 0.0, "lidar_range": cfg.grid_extent, "duration": cfg.frames}
    base.update(cfg.world)
    from .stream_sim import WorldConfig

    return WorldConfig.from_dict(base)


def cmd_bench(cfg: RunConfig, out: Path) -> dict:
    from .eval_bench import ConcatBaseline, bench_latency
    from .model import ToyModel
    from .pipeline import Engine
    from .stream_sim import Dataset, generate_sequence

    if cfg.model:
        model, spec = _load_model(cfg)
    else:
        spec = _spec(cfg)
        model = ToyModel.init(_fusion(cfg), seed=cfg.seed)
    if cfg.root:
        ds = Dataset(_require(cfg.root, "dataset"))
        stream = (fr for s in sorted(ds.sequences) for fr in ds.stream(s))
    else:
        stream = iter(generate_sequence(bench_world(cfg), cfg.seed, "bench"))
    ecfg = replace(_engine_cfg(cfg), gt_foreground=True)
    runner = Engine(model, spec, ecfg) if cfg.mode == "int" else ConcatBaseline(model, spec, cfg.k, ecfg)
    rep = bench_latency(runner, stream, cfg.frames, cfg.warmup)
    (out / "latency.csv").write_text(rep.to_csv())
    (out / "stages.csv").write_text(rep.stages_csv())
    (out / "latency.svg").write_text(rep.svg())
    (out / "counters.csv").write_text("frame,points_voxelized,resident_bytes\n" + "".join(
        f"{i},{c},{b}\n" for i, c, b in zip(rep.frame_index, rep.points_voxelized, rep.resident_bytes)))
    summary = rep.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    return {k: summary[k] for k in ("frames", "mean_us", "slope_rel_per_100")}


def cmd_sampler_dump(cfg: RunConfig, out: Path) -> dict:
    from .seq_sampler import DtslConfig, SampleIndex, epoch_schedule
    from .stream_sim import Dataset

    if cfg.lengths:
        samples = [SampleIndex(f"s{i}", j) for i, n in enumerate(cfg.lengths) for j in range(n)]
    else:
        samples = Dataset(_require(cfg.root, "dataset")).samples()
    text = []
    for ep in range(cfg.epochs):
        sched = epoch_schedule(samples, DtslConfig(cfg.l_max, cfg.epochs, ep), cfg.batch_size, cfg.seed, cfg.dtsl)
        sched.validate()
        for r in sched.records():
            text.append(json.dumps({"epoch": ep, **r}, separators=(",", ":")))
    (out / "schedule.jsonl").write_text("\n".join(text) + "\n")
    return {"rows": len(text)}


def cmd_ablate(cfg: RunConfig, out: Path) -> dict:
    from .eval_bench import run_ablation, rows_to_csv
    from .pipeline import TrainConfig
    from .stream_sim import Dataset

    train_ds = Dataset(_require(cfg.root, "dataset"))
    test_ds = Dataset(_require(cfg.test_root, "test dataset"))
    seqs = [list(test_ds.stream(s)) for s in sorted(test_ds.sequences)]
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr, l_max=cfg.l_max, dtsl=cfg.dtsl,
                       seed=cfg.seed, gt_foreground=cfg.gt_foreground)
    rows = run_ablation(train_ds, seqs, _spec(cfg), tcfg, model_seed=cfg.seed, history=cfg.history or None,
                        start=cfg.eval_start, stride=cfg.eval_stride, aug_ranges=_aug_ranges(cfg))
    (out / "ablation.csv").write_text(rows_to_csv(rows))
    return {r["setting"]: round(r["mAP"], 6) for r in rows}


def cmd_stats(cfg: RunConfig, out: Path) -> dict:
    from .stream_sim import Dataset

    text = Dataset(_require(cfg.root, "dataset")).stats_csv()
    (out / "stats.csv").write_text(text)
    sys.stdout.write(text)
    return {}


COMMANDS = {"gen": cmd_gen, "gtdb": cmd_gtdb, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "bench": cmd_bench, "sampler-dump": cmd_sampler_dump, "ablate": cmd_ablate, "stats": cmd_stats}


def _cap_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def run(argv=None) -> int:
    parser = make_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not ns.subcommand:
        parser.print_usage(sys.stderr)
        print("streamdet: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        file_values = load_config_file(ns.config) if ns.config else {}
        cfg = build_config(ns.subcommand, file_values, _flag_overrides(ns))
        if cfg.subcommand == "bench":
            _cap_threads(1)
        elif cfg.threads:
            _cap_threads(cfg.threads)
        out = run_dir(cfg)
        result = COMMANDS[cfg.subcommand](cfg, out)
    except ConfigError as e:
        print(f"streamdet: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"streamdet: error: {msg}", file=sys.stderr)
        return 1
    print(json.dumps({"run_dir": str(out), **result}, sort_keys=True))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
