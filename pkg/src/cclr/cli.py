"""``cclr`` command line: train, score, eval and profile.

Every command reads a TOML config (a file path or the name of a bundled
preset such as ``desk``), applies flag overrides, validates the whole
merged view, and only then touches data or models.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import torch

from cclr.checkpoint import load_checkpoint
from cclr.data import Dataset, load_cifar_binary, load_idx, make_synthetic_pair, preprocess
from cclr.denoiser import DenoiserConfig, init_model
from cclr.errors import ArgumentError, CCLRError, ConfigError, DataError
from cclr.evaluation import (
    BASELINE,
    EvalReport,
    Experiment,
    auroc,
    column_name,
    loss_profile,
    run_experiment,
    single_step_reconstruct,
    write_profile_csv,
    write_report_json,
    write_summary_csv,
    write_sweep_samples_csv,
)
from cclr.plotting import plot_loss_profiles, plot_reconstruction_grid, plot_score_violins
from cclr.rng import numpy_generator, torch_generator
from cclr.schedule import build_cosine_schedule
from cclr.scoring import ScoreConfig, format_fraction, parse_fraction, score_dataset
from cclr.training import TrainConfig, train

log = logging.getLogger("cclr")

SCORE_COLUMNS = ["index", "label", "elbo_full", "elbo_partial", "cclr"]

# section -> key -> accepted python types
SCHEMA = {
    "": {"seed": (int,), "threads": (int,), "out": (str,)},
    "model": {
        "base_features": (int,),
        "multipliers": (list,),
        "image_channels": (int,),
        "image_size": (int,),
        "time_embed_dim": (int,),
    },
    "schedule": {"T": (int,), "s": (float, int)},
    "train": {
        "epochs": (int,),
        "learning_rate": (float, int),
        "batch_size": (int,),
        "use_weight": (bool,),
        "checkpoint_every": (int,),
        "holdout": (int,),
    },
    "score": {"k_over_T": (str,), "n_bs": (int,), "combine": (str,), "checkpoint": (str,)},
    "eval": {"sweep": (list,)},
    "profile": {
        "num_bins": (int,),
        "samples_per_bin": (int,),
        "weighted": (bool,),
        "recon": (list,),
        "recon_index": (int,),
    },
    "data": {
        "train": (str,),
        "id": (str,),
        "ood": (str,),
        "train_limit": (int,),
        "eval_limit": (int,),
        "resize": (bool,),
        "synthetic_train_seed": (int,),
        "synthetic_eval_seed": (int,),
    },
}

DEFAULTS = {
    "": {"seed": 0, "threads": 1, "out": "runs/default"},
    "model": DenoiserConfig().to_dict(),
    "schedule": {"T": 1000, "s": 0.008},
    "train": {
        "epochs": 100,
        "learning_rate": 2.0e-5,
        "batch_size": 64,
        "use_weight": True,
        "checkpoint_every": 0,
        "holdout": 0,
    },
    "score": {"k_over_T": "1/5", "n_bs": 100, "combine": "normalized_logsumexp", "checkpoint": ""},
    "eval": {"sweep": ["1/2", "1/3", "1/5", "1/10", "1/20"]},
    "profile": {"num_bins": 20, "samples_per_bin": 200, "weighted": False, "recon": [], "recon_index": 0},
    "data": {
        "train": "",
        "id": "",
        "ood": "",
        "train_limit": 0,
        "eval_limit": 1000,
        "resize": True,
        "synthetic_train_seed": 0,
        "synthetic_eval_seed": 1,
    },
}


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("cclr.presets").iterdir() if p.name.endswith(".toml"))


def read_config_file(ref: str | None) -> dict:
    if not ref:
        return {}
    path = Path(ref)
    if path.is_file():
        raw = path.read_bytes()
    elif ref in preset_names():
        raw = resources.files("cclr.presets").joinpath(f"{ref}.toml").read_bytes()
    else:
        raise ConfigError(f"config {ref!r} is neither a file nor a preset ({', '.join(preset_names())})")
    try:
        return tomli.loads(raw.decode("utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {ref}: {exc}") from exc


def merge_config(doc: dict) -> dict:
    """Overlay ``doc`` on the defaults, rejecting unknown sections and keys."""
    merged = {sec: dict(vals) for sec, vals in DEFAULTS.items()}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(f"unknown config section [{key}]")
            for sub, v in value.items():
                _set(merged, key, sub, v)
        else:
            _set(merged, "", key, value)
    return merged


def _set(merged, section, key, value):
    where = f"{section}.{key}" if section else key
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {where}")
    types = SCHEMA[section][key]
    # bool is an int subclass; keep them apart.
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{where} must be {types[0].__name__}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{where} must be {types[0].__name__}, got {type(value).__name__}")
    merged[section][key] = value


@dataclass
class RunConfig:
    raw: dict
    seed: int
    threads: int
    out: Path
    model: DenoiserConfig
    T: int
    s: float
    train: TrainConfig
    holdout: int
    score: ScoreConfig
    checkpoint: str
    sweep: list = field(default_factory=list)

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def profile(self) -> dict:
        return self.raw["profile"]

    def echo(self) -> dict:
        return self.raw


def build_run_config(args) -> RunConfig:
    merged = merge_config(read_config_file(args.config))
    top, data = merged[""], merged["data"]
    for name in ("seed", "threads", "out"):
        if getattr(args, name, None) is not None:
            top[name] = getattr(args, name)
    if getattr(args, "k", None) is not None:
        merged["score"]["k_over_T"] = args.k
    if getattr(args, "nbs", None) is not None:
        merged["score"]["n_bs"] = args.nbs
    if getattr(args, "sweep", None) is not None:
        merged["eval"]["sweep"] = [k for k in args.sweep.split(",") if k.strip()]
    if getattr(args, "recon", None) is not None:
        merged["profile"]["recon"] = [int(t) for t in args.recon.split(",") if t.strip()]
    if getattr(args, "checkpoint", None) is not None:
        merged["score"]["checkpoint"] = args.checkpoint
    for role in ("train", "id", "ood"):
        value = getattr(args, f"{role}_data", None)
        if value is not None:
            data[role] = value
    if getattr(args, "limit", None) is not None:
        key = "train_limit" if args.command == "train" else "eval_limit"
        data[key] = args.limit

    if top["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    if data["eval_limit"] < 1 or data["train_limit"] < 0:
        raise ConfigError("eval_limit must be >= 1 and train_limit >= 0")
    if merged["train"]["holdout"] < 0:
        raise ConfigError("train.holdout must be >= 0")
    model_cfg = DenoiserConfig(**merged["model"])
    build_cosine_schedule(merged["schedule"]["T"], merged["schedule"]["s"])
    t = merged["train"]
    train_cfg = TrainConfig(
        epochs=t["epochs"],
        learning_rate=float(t["learning_rate"]),
        batch_size=t["batch_size"],
        seed=top["seed"],
        use_weight=t["use_weight"],
        checkpoint_every=t["checkpoint_every"],
    )
    train_cfg.validate()
    sc = merged["score"]
    score_cfg = ScoreConfig(sc["k_over_T"], sc["n_bs"], top["seed"], sc["combine"])
    sweep = [parse_fraction(k) for k in merged["eval"]["sweep"]]
    for k in sweep:
        ScoreConfig(k, sc["n_bs"], top["seed"], sc["combine"])
    prof = merged["profile"]
    if prof["num_bins"] < 1 or prof["samples_per_bin"] < 2:
        raise ConfigError("profile needs num_bins >= 1 and samples_per_bin >= 2")
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in prof["recon"]):
        raise ConfigError("profile.recon must be a list of integer timesteps")
    for v in prof["recon"]:
        if not 0 <= v <= merged["schedule"]["T"] - 1:
            raise ConfigError(f"recon timestep {v} outside [0, {merged['schedule']['T'] - 1}]")
    return RunConfig(
        raw=merged,
        seed=top["seed"],
        threads=top["threads"],
        out=Path(top["out"]),
        model=model_cfg,
        T=merged["schedule"]["T"],
        s=float(merged["schedule"]["s"]),
        train=train_cfg,
        holdout=t["holdout"],
        score=score_cfg,
        checkpoint=sc["checkpoint"],
        sweep=sweep,
    )


# ---------------------------------------------------------------- datasets


def check_source(source: str, role: str) -> None:
    if not source:
        raise ConfigError(f"no {role} dataset configured (data.{role})")
    kind, _, rest = source.partition(":")
    if kind == "synthetic":
        if rest not in ("high", "low"):
            raise ConfigError(f"{role} dataset {source!r}: synthetic sets are 'synthetic:high' and 'synthetic:low'")
        return
    path = Path(rest if kind in ("idx", "cifar") else source)
    if not path.is_file():
        raise ConfigError(f"{role} dataset not found: {path}")


def _sniff(path: Path) -> str:
    with open(path, "rb") as fh:
        head = fh.read(4)
    return "idx" if head == b"\x00\x00\x08\x03" else "cifar"


def load_source(source: str, run: RunConfig, role: str, count: int | None) -> Dataset:
    """Load a dataset and adapt it to the model input."""
    kind, _, rest = source.partition(":")
    cfg = run.model
    if kind == "synthetic":
        seed = run.data["synthetic_train_seed"] if role == "train" else run.data["synthetic_eval_seed"]
        n = count or 1000
        high, low = make_synthetic_pair(cfg.image_size, n, seed, cfg.image_channels)
        return high if rest == "high" else low
    if kind not in ("idx", "cifar"):
        rest, kind = source, _sniff(Path(source))
    loader = load_idx if kind == "idx" else load_cifar_binary
    if role == "train":
        ds = loader(rest, limit=count or None)
    else:
        ds = loader(rest)
        if count and count < len(ds):
            # Evaluation subsets are random draws without replacement.
            pick = numpy_generator(run.seed, "subset", role).choice(len(ds), count, replace=False)
            ds = ds.subset(np.sort(pick))
    if len(ds) == 0:
        raise ArgumentError(f"{role} dataset {source!r} is empty")
    if run.data["resize"]:
        return preprocess(ds, cfg.image_size, cfg.image_channels)
    if ds.images.shape[1:] != (cfg.image_channels, cfg.image_size, cfg.image_size):
        raise DataError(
            f"{role} dataset shape {ds.images.shape[1:]} mismatches model input "
            f"({cfg.image_channels}, {cfg.image_size}, {cfg.image_size}) and data.resize is off"
        )
    return ds


def load_model(run: RunConfig):
    path = Path(run.checkpoint) if run.checkpoint else run.out / "model.ckpt"
    if not path.is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    model, header, _ = load_checkpoint(path)
    T = int(header.get("schedule.T", run.T))
    s = float(header.get("schedule.s", run.s))
    if T != run.T or abs(s - run.s) > 1e-15:
        raise ConfigError(f"schedule mismatch: checkpoint has T={T}, s={s}; config has T={run.T}, s={run.s}")
    if model.config != run.model:
        raise ConfigError(f"model mismatch: checkpoint {model.config.to_dict()} vs config {run.model.to_dict()}")
    model.eval()
    return model, build_cosine_schedule(T, s)


def eval_sets(run: RunConfig, need_ood: bool = True):
    check_source(run.data["id"], "id")
    if need_ood or run.data["ood"]:
        check_source(run.data["ood"], "ood")
    n = run.data["eval_limit"]
    id_set = load_source(run.data["id"], run, "id", n)
    ood_set = load_source(run.data["ood"], run, "ood", n) if run.data["ood"] else None
    return id_set, ood_set


def _prepare_out(run: RunConfig) -> Path:
    try:
        run.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {run.out}: {exc}") from exc
    return run.out


# ---------------------------------------------------------------- commands


def cmd_train(run: RunConfig) -> int:
    check_source(run.data["train"], "train")
    torch.set_num_threads(run.threads)
    limit = run.data["train_limit"]
    ds = load_source(run.data["train"], run, "train", limit or None)
    holdout = None
    if run.holdout:
        if run.holdout >= len(ds):
            raise ConfigError(f"holdout {run.holdout} leaves no training images out of {len(ds)}")
        holdout = Dataset(ds.images[-run.holdout :], ds.label)
        ds = Dataset(ds.images[: -run.holdout], ds.label)
    out = _prepare_out(run)
    build_cosine_schedule(run.T, run.s).to_csv(out / "schedule.csv")
    model = init_model(run.model, run.seed)
    result = train(model, ds, build_cosine_schedule(run.T, run.s), run.train, out_dir=out, holdout=holdout)
    print("epoch,mean_loss")
    for i, loss in enumerate(result.losses, start=1):
        print(f"{i},{loss!r}")
    if result.holdout_losses:
        print(f"# holdout loss {result.holdout_losses[0]!r} -> {result.holdout_losses[-1]!r}")
    print(f"# wrote {out / 'model.ckpt'}")
    return 0


def write_score_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_COLUMNS)
        for index, label, res in rows:
            writer.writerow([index, label, repr(res.elbo_full), repr(res.elbo_partial), repr(res.cclr)])


def cmd_score(run: RunConfig) -> int:
    model, schedule = load_model(run)
    id_set, ood_set = eval_sets(run, need_ood=False)
    torch.set_num_threads(1)
    out = _prepare_out(run)
    rows = []
    offset = 0
    for label, ds in (("ID", id_set), ("OOD", ood_set)):
        if ds is None:
            continue
        keys = range(offset, offset + len(ds))
        results = score_dataset(model, schedule, ds.images, run.score, threads=run.threads, indices=keys)
        rows += [(i, label, r) for i, r in zip(keys, results)]
        offset += len(ds)
    path = out / "scores.csv"
    write_score_csv(path, rows)
    print(f"# k/T={format_fraction(run.score.k_over_T)} n_bs={run.score.n_bs} rows={len(rows)}")
    print(f"# wrote {path}")
    return 0


def read_score_csv(path) -> dict[str, dict[str, list[float]]]:
    """Parse a score CSV into ``{label: {column: values}}``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"score file not found: {path}")
    out = {"ID": {c: [] for c in SCORE_COLUMNS[2:]}, "OOD": {c: [] for c in SCORE_COLUMNS[2:]}}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(SCORE_COLUMNS)}, got {header}")
        for row in reader:
            line = reader.line_num
            if len(row) != len(SCORE_COLUMNS):
                raise DataError(f"{path}:{line}: expected {len(SCORE_COLUMNS)} fields, got {len(row)}")
            label = row[1]
            if label not in out:
                raise DataError(f"{path}:{line}: label must be ID or OOD, got {label!r}")
            try:
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from exc
            if not all(np.isfinite(values)):
                raise DataError(f"{path}:{line}: non-finite score")
            for col, v in zip(SCORE_COLUMNS[2:], values):
                out[label][col].append(v)
    return out


def reports_from_csv(paths, k_over_T) -> list[EvalReport]:
    pooled = {"ID": {c: [] for c in SCORE_COLUMNS[2:]}, "OOD": {c: [] for c in SCORE_COLUMNS[2:]}}
    for p in paths:
        for label, cols in read_score_csv(p).items():
            for c, v in cols.items():
                pooled[label][c] += v
    if not pooled["ID"]["cclr"] or not pooled["OOD"]["cclr"]:
        raise ArgumentError("score files must contain both ID and OOD rows")
    id_full, ood_full = -np.array(pooled["ID"]["elbo_full"]), -np.array(pooled["OOD"]["elbo_full"])
    id_c, ood_c = np.array(pooled["ID"]["cclr"]), np.array(pooled["OOD"]["cclr"])
    return [
        EvalReport(BASELINE, auroc(id_full, ood_full), id_full, ood_full),
        EvalReport(column_name(k_over_T), auroc(id_c, ood_c), id_c, ood_c, k_over_T),
    ]


def cmd_eval(run: RunConfig, score_files=None) -> int:
    if score_files:
        reports = reports_from_csv(score_files, run.score.k_over_T)
        out = _prepare_out(run)
        experiment = Experiment(reports, None, None, [run.score.k_over_T], {"seed": run.seed, "source": [str(p) for p in score_files]})
    else:
        model, schedule = load_model(run)
        id_set, ood_set = eval_sets(run)
        torch.set_num_threads(1)
        out = _prepare_out(run)
        experiment = run_experiment(
            model, schedule, id_set, ood_set, run.sweep, run.score.n_bs, run.seed, run.score.combine, run.threads
        )
        write_sweep_samples_csv(out / "samples.csv", experiment)
    write_report_json(out / "report.json", experiment, run.echo())
    write_summary_csv(out / "summary.csv", experiment)
    plot_score_violins(experiment.reports, out / "violins.png")
    table = experiment.auroc_table()
    print(",".join(table))
    print(",".join(f"{v:.4f}" for v in table.values()))
    return 0


def cmd_profile(run: RunConfig) -> int:
    model, schedule = load_model(run)
    id_set, ood_set = eval_sets(run, need_ood=False)
    out = _prepare_out(run)
    prof = run.profile
    sets = [("ID", id_set)] + ([("OOD", ood_set)] if ood_set is not None else [])
    if len(sets) == 2 and sets[0][1].label == sets[1][1].label:
        sets = [(role, Dataset(ds.images, role)) for role, ds in sets]
    profiles = [
        loss_profile(model, schedule, ds, prof["num_bins"], prof["samples_per_bin"], run.seed, prof["weighted"])
        for _, ds in sets
    ]
    write_profile_csv(out / "profile.csv", profiles)
    plot_loss_profiles(profiles, out / "profile.png")
    print("bin_center,label,mean,stderr")
    for p in profiles:
        for c, m, e in p:
            print(f"{c:.4f},{p.label},{m:.6f},{e:.6f}")
    if prof["recon"]:
        for _, ds in sets:
            idx = prof["recon_index"]
            if not 0 <= idx < len(ds):
                raise ConfigError(f"recon_index {idx} outside dataset of {len(ds)}")
            x0 = torch.from_numpy(ds.images[idx])
            recons = [
                single_step_reconstruct(model, schedule, x0, t, generator=torch_generator(run.seed, "recon", ds.label, t))
                for t in prof["recon"]
            ]
            path = out / f"recon_{ds.label}.png"
            plot_reconstruction_grid(ds.images[idx], recons, prof["recon"], path)
            print(f"# wrote {path}")
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML file or preset name (%s)" % ", ".join(preset_names()))
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--limit", type=int, help="number of images (training cap or evaluation subset)")
    common.add_argument("--checkpoint", help="model checkpoint (default: OUT/model.ckpt)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cclr", description="Complexity-corrected likelihood-ratio OOD scoring with a diffusion denoiser.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train the denoiser")
    p.add_argument("--train-data", dest="train_data")

    for name, text in (("score", "per-sample scores"), ("eval", "AUROC report"), ("profile", "loss profile")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--id-data", dest="id_data")
        p.add_argument("--ood-data", dest="ood_data")
        p.add_argument("--nbs", type=int, help="inference batch size per sample")
        p.add_argument("--k", help="k/T as a fraction, e.g. 1/5")
        if name == "eval":
            p.add_argument("--sweep", help="comma-separated k/T values")
            p.add_argument("--scores", nargs="+", help="score CSVs instead of datasets")
        if name == "profile":
            p.add_argument("--recon", help="comma-separated timesteps for the reconstruction grid")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        run = build_run_config(args)
        if args.command == "train":
            return cmd_train(run)
        if args.command == "score":
            return cmd_score(run)
        if args.command == "eval":
            return cmd_eval(run, args.scores)
        return cmd_profile(run)
    except CCLRError as exc:
        print(f"cclr {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"cclr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cclr {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
