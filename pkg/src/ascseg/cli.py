"""Command-line entry point: ``ascseg <subcommand> ...``.

Configs are flat ``key=value`` text files.  Blank lines and ``#`` comments are
ignored, unknown keys are rejected.  Relative ``data_dir``/``out_dir`` values
resolve against the config file's directory.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .fourier import amplitude_swap
from .metrics import ABNORMAL, NORMAL
from .model import config_for_count, load_params, save_params
from .synthdata import PhantomSpec, gen_source, gen_target
from .trainer import MODES, Flags, NumericalError, TrainConfig, evaluate, train
from .volume import RvolError, read_rvol, write_rvol

log = logging.getLogger("ascseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "dims": (24, 24, 24),
    "classes": 4,
    "beta": 0.1,
    "alpha": 0.99,
    "gamma": 200.0,
    "lr": 1e-4,
    "epochs": 100,
    "batch": 4,
    "seed": 0,
    "ablation": "M5",
    "deterministic": True,
    "ckpt_every": 0,
    "data_dir": None,
    "out_dir": "out",
    # benchmark sizing and network width
    "hidden": 8,
    "n_source": 20,
    "n_target_train": 20,
    "n_target_test": 20,
    "abnormal_fraction": 0.5,
}
SWEEP_VALUES = "10,100,200,500,1000"
MANIFEST_FIELDS = ("path", "role", "subset")
ROLES = ("source", "target-train", "target-test")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- config


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = [int(x) for x in text.replace("x", ",").split(",") if x.strip()]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"dims must be one or three positive ints, got {text!r}")
    return tuple(parts)


_PARSERS = {
    "dims": _parse_dims,
    "classes": int,
    "beta": float,
    "alpha": float,
    "gamma": float,
    "lr": float,
    "epochs": int,
    "batch": int,
    "seed": int,
    "ablation": str.strip,
    "deterministic": _parse_bool,
    "ckpt_every": int,
    "data_dir": str.strip,
    "out_dir": str.strip,
    "hidden": int,
    "n_source": int,
    "n_target_train": int,
    "n_target_test": int,
    "abnormal_fraction": float,
}


def parse_config(text: str, base: Path | None = None) -> dict:
    """Parse flat ``key=value`` text into a fully resolved config dict."""
    cfg = dict(DEFAULTS)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _PARSERS:
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            cfg[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from None
    for key in ("data_dir", "out_dir"):
        if cfg[key] is not None and base is not None and not Path(cfg[key]).is_absolute():
            cfg[key] = str(base / cfg[key])
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["ablation"] not in MODES:
        raise UsageError(f"ablation must be one of {MODES}")
    if cfg["batch"] != 4:
        raise UsageError("batch must be 4 (2 source + 2 target)")
    if not 0 <= cfg["beta"] < 1:
        raise UsageError("beta must lie in [0, 1)")
    if not 0 <= cfg["alpha"] < 1:
        raise UsageError("alpha must lie in [0, 1)")
    if cfg["gamma"] <= 0 or cfg["lr"] <= 0 or cfg["epochs"] < 1 or cfg["hidden"] < 1:
        raise UsageError("gamma, lr, epochs and hidden must be positive")
    if not 0 <= cfg["abnormal_fraction"] <= 1:
        raise UsageError("abnormal_fraction must lie in [0, 1]")
    if min(cfg["n_source"], cfg["n_target_train"]) < 1 or cfg["n_target_test"] < 0:
        raise UsageError("need at least one source and one target-train volume")


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base=path.parent)


def config_hash(cfg: dict) -> str:
    """Digest of every result-affecting key (the output location is excluded)."""
    relevant = {k: v for k, v in cfg.items() if k != "out_dir"}
    blob = json.dumps(_jsonable(relevant), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(cfg: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()}


def train_config(cfg: dict, **overrides) -> TrainConfig:
    fields = dict(
        beta=cfg["beta"], batch=cfg["batch"], epochs=cfg["epochs"], lr=cfg["lr"], gamma=cfg["gamma"],
        alpha=cfg["alpha"], seed=cfg["seed"], ablation=cfg["ablation"], hidden=cfg["hidden"],
        classes=cfg["classes"], deterministic=cfg["deterministic"], ckpt_every=cfg["ckpt_every"],
    )
    fields.update(overrides)
    return TrainConfig(**fields)


def write_run_json(out_dir: Path, command: str, cfg: dict, **extra) -> None:
    meta = {"command": command, "version": __version__, "config": _jsonable(cfg), "config_hash": config_hash(cfg)}
    meta.update(extra)
    (out_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    source: list  # (volume, labels)
    target_train: list  # volumes
    target_test: list  # (volume, labels, subset)
    test_names: list
    train_tags: list | None = None


def label_path(path: Path) -> Path:
    """Labels of ``x.rvol`` live next to it in ``x.label.rvol``."""
    return path.with_name(path.stem + ".label.rvol")


def _phantom_spec(cfg: dict) -> PhantomSpec:
    if cfg["classes"] != 4:
        raise UsageError("the phantom generator produces exactly 4 classes")
    return PhantomSpec(dims=tuple(cfg["dims"]), seed=cfg["seed"])


def synth_dataset(cfg: dict) -> Dataset:
    spec = _phantom_spec(cfg)
    source = gen_source(cfg["n_source"], spec)
    train_t = gen_target(cfg["n_target_train"], spec, cfg["abnormal_fraction"], stream=1)
    test = gen_target(cfg["n_target_test"], spec, cfg["abnormal_fraction"], stream=2)
    names = [f"test_{i:03d}" for i in range(len(test))]
    return Dataset(source, [v for v, _, _ in train_t], test, names, [t for _, _, t in train_t])


def gen_data(cfg: dict, out: Path) -> Path:
    """Write phantom RVOL files plus ``manifest.csv`` under ``out``; returns the manifest path."""
    data = synth_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (v, y) in enumerate(data.source):
        rel = Path("source") / f"src_{i:03d}.rvol"
        _write_pair(out, rel, v, y)
        rows.append((rel.as_posix(), "source", "-"))
    for i, (v, tag) in enumerate(zip(data.target_train, data.train_tags)):
        rel = Path("target-train") / f"tr_{i:03d}.rvol"
        _write_pair(out, rel, v, None)
        rows.append((rel.as_posix(), "target-train", tag))
    for name, (v, y, tag) in zip(data.test_names, data.target_test):
        rel = Path("target-test") / f"{name}.rvol"
        _write_pair(out, rel, v, y)
        rows.append((rel.as_posix(), "target-test", tag))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_FIELDS)
    w.writerows(rows)
    manifest = out / "manifest.csv"
    manifest.write_text(buf.getvalue())
    return manifest


def _write_pair(root: Path, rel: Path, v, y) -> None:
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    write_rvol(path, v)
    if y is not None:
        write_rvol(label_path(path), y)


def read_manifest(path) -> list[tuple[Path, str, str]]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from None
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != MANIFEST_FIELDS:
        raise DataError(f"{path}: manifest header must be {','.join(MANIFEST_FIELDS)}")
    rows = []
    for lineno, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 columns")
        rel, role, subset = (s.strip() for s in row)
        if role not in ROLES:
            raise DataError(f"{path}:{lineno}: unknown role {role!r}")
        if subset not in (NORMAL, ABNORMAL, "-"):
            raise DataError(f"{path}:{lineno}: unknown subset {subset!r}")
        rows.append((path.parent / rel, role, subset))
    return rows


def _read(path: Path):
    try:
        return read_rvol(path)
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except RvolError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_dataset(manifest) -> Dataset:
    data = Dataset([], [], [], [])
    for path, role, subset in read_manifest(manifest):
        v = _read(path)
        if role == "source":
            data.source.append((v, _read(label_path(path))))
        elif role == "target-train":
            data.target_train.append(v)
        else:
            data.target_test.append((v, _read(label_path(path)), NORMAL if subset == "-" else subset))
            data.test_names.append(path.stem)
    return data


def dataset_for(cfg: dict) -> Dataset:
    if cfg["data_dir"] is None:
        return synth_dataset(cfg)
    return load_dataset(Path(cfg["data_dir"]) / "manifest.csv")


# ---------------------------------------------------------------- runs


def run_training(cfg: dict, data: Dataset, out_dir: Path, **overrides):
    """Train once, write log, checkpoints and (if a test set exists) the DSC report."""
    tcfg = train_config(cfg, **overrides)
    if not data.source or not data.target_train:
        raise DataError("training needs source and target-train volumes")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        student, teacher, tlog = train(tcfg, data.source, data.target_train, ckpt_dir=out_dir)
    except NumericalError:
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from None
    tlog.write_csv(out_dir / "trainlog.csv")
    save_params(out_dir / "student.ascp", student)
    save_params(out_dir / "teacher.ascp", teacher)
    report = None
    if data.target_test:
        run_cfg = dict(cfg, **{k: v for k, v in overrides.items() if k in cfg})
        report = evaluate(student, data.target_test, tcfg.net_config(), names=data.test_names)
        report.meta.update(seed=tcfg.seed, config_hash=config_hash(run_cfg))
        report.write_csv(out_dir / "report.csv")
    return student, report


def _table(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def _seeds(text: str | None, cfg: dict) -> list[int]:
    if not text:
        return [cfg["seed"]]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None


def _mean_reports(reports):
    def mean(xs):
        xs = [x for x in xs if x is not None]
        return float(np.mean(xs)) if xs else None

    return mean([r.dsc_a for r in reports]), mean([r.dsc_n for r in reports]), mean([r.avg for r in reports])


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    manifest = gen_data(cfg, out)
    write_run_json(out, "gen-data", cfg)
    print(f"wrote {manifest}")
    return EXIT_OK


def cmd_fda_transform(args) -> int:
    if not 0 <= args.beta < 1:
        raise UsageError("beta must lie in [0, 1)")
    src, tgt = _read(Path(args.src)), _read(Path(args.tgt))
    if src.shape != tgt.shape:
        raise DataError(f"dims differ: {src.shape} vs {tgt.shape}")
    out = amplitude_swap(src, tgt, args.beta)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_rvol(args.out, out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg["out_dir"])
    _, report = run_training(cfg, dataset_for(cfg), out)
    write_run_json(out, "train", cfg)
    if report is not None:
        print(f"target DSC avg={report.avg:.4f} (A={_fmt(report.dsc_a)} N={_fmt(report.dsc_n)})")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        p = load_params(args.ckpt)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint {args.ckpt}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    try:
        net = config_for_count(p.size, args.classes)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    data = load_dataset(args.manifest)
    if not data.target_test:
        raise DataError("manifest has no target-test rows")
    report = evaluate(p, data.target_test, net, names=data.test_names)
    report.meta.update(ckpt=Path(args.ckpt).name)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.write_csv(args.out)
    else:
        sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg["out_dir"])
    seeds = _seeds(args.seeds, cfg)
    data_by_seed = {s: dataset_for(dict(cfg, seed=s)) for s in seeds}
    rows = []
    for mode in MODES:
        reports = []
        for s in seeds:
            _, rep = run_training(dict(cfg, seed=s), data_by_seed[s], out / mode / f"seed{s}", ablation=mode, seed=s)
            if rep is None:
                raise DataError("ablation needs a target-test set")
            reports.append(rep)
        f = Flags.for_mode(mode)
        marks = ["x", "x" if f.seg_sft else "", "x" if f.app_xt else "", "x" if f.app_xtfs else "", "x" if f.structure else ""]
        rows.append([mode, *marks, *map(_fmt, _mean_reports(reports))])
        log.info("%s avg=%s", mode, rows[-1][-1])
    header = ["mode", "seg_xs", "seg_xsft", "app_xt", "app_xtfs", "str", "dsc_a", "dsc_n", "avg"]
    (out / "ablation.csv").write_text(_table(rows, header))
    write_run_json(out, "ablate", cfg, seeds=seeds)
    avgs = [float(r[-1]) for r in rows]
    monotone = all(b >= a for a, b in zip(avgs, avgs[1:]))
    print(f"wrote {out / 'ablation.csv'}; monotone non-decreasing: {'yes' if monotone else 'no'}")
    return EXIT_OK


def cmd_sweep_gamma(args) -> int:
    cfg = load_config(args.config)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad gamma list {args.values!r}") from None
    if not values or min(values) <= 0:
        raise UsageError("gamma values must be positive")
    out = Path(cfg["out_dir"])
    seeds = _seeds(args.seeds, cfg)
    data_by_seed = {s: dataset_for(dict(cfg, seed=s)) for s in seeds}
    rows = []
    for g in values:
        reports = []
        for s in seeds:
            _, rep = run_training(dict(cfg, seed=s, gamma=g), data_by_seed[s], out / f"gamma_{g:g}" / f"seed{s}", gamma=g, seed=s)
            if rep is None:
                raise DataError("gamma sweep needs a target-test set")
            reports.append(rep)
        rows.append([repr(g), *map(_fmt, _mean_reports(reports))])
    (out / "gamma_sweep.csv").write_text(_table(rows, ["gamma", "dsc_a", "dsc_n", "avg"]))
    write_run_json(out, "sweep-gamma", cfg, seeds=seeds, gammas=values)
    print(f"wrote {out / 'gamma_sweep.csv'}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all()
    for name, ok, detail in results:
        print(f"{name}: {'PASS' if ok else 'FAIL'} ({detail})")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_NUMERIC


# ---------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ascseg", description="Appearance/structure consistency domain adaptation on synthetic phantoms.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic phantoms and a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fda-transform", help="low-frequency amplitude swap of one volume")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--beta", type=float, default=DEFAULTS["beta"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fda_transform)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest's target-test rows")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--classes", type=int, default=DEFAULTS["classes"])
    p.add_argument("--out", help="report CSV path (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run modes M1..M5")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-gamma", help="train M5 for several consistency weights")
    p.add_argument("--config", required=True)
    p.add_argument("--values", default=SWEEP_VALUES)
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.set_defaults(func=cmd_sweep_gamma)

    p = sub.add_parser("selftest", help="run built-in numerical checks")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
