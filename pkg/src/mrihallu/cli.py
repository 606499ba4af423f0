"""Command-line pipeline: phantom-gen -> train -> attack -> eval -> detect -> report.

Each stage reads the artifacts of earlier stages from ``--out`` and writes its
own.  Exit codes: 0 success, 1 usage/configuration error, 2 data error
(missing or malformed artifacts), 3 numeric failure.  ``MRIHALLU_WORKERS``
sets the worker-thread count for per-sample stages (default 1).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ksc
from .attack import AttackError, AttackSpec, masked_iterative_fgsm
from .config import SCHEMA_VERSION, ConfigError, config_hash, load_config
from .detect import run_detection_experiment, threshold_detector_eval
from .metrics import METRICS, MetricReport, aggregate, report_pair
from .mri import make_coil_maps, make_mask, make_sample
from .recon import TrainConfig, TrainingDiverged, build_model, load_checkpoint, save_checkpoint, train

log = logging.getLogger("mrihallu")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
WORKERS_ENV = "MRIHALLU_WORKERS"


class DataError(RuntimeError):
    """Missing or unusable artifacts from an earlier stage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# flag -> (config section, key, type)
_FLAGS = {
    "seed": (None, "seed", int),
    "n_samples": ("data", "n_samples", int),
    "n_test": ("data", "n_test", int),
    "height": ("data", "height", int),
    "width": ("data", "width", int),
    "n_coils": ("data", "n_coils", int),
    "acceleration": ("data", "acceleration", float),
    "center_fraction": ("data", "center_fraction", float),
    "mask_kind": ("data", "mask_kind", str),
    "noise_sigma": ("data", "noise_sigma", float),
    "n_ellipses": ("data", "n_ellipses", int),
    "variant": ("model", "variant", str),
    "epochs": ("model", "epochs", int),
    "batch_size": ("model", "batch_size", int),
    "lr": ("model", "lr", float),
    "loss": ("model", "loss", str),
    "cascades": ("model", "cascades", int),
    "alpha": ("attack", "alpha", float),
    "alpha_ratio": ("attack", "alpha_ratio", float),
    "iters": ("attack", "iters", int),
    "clip": ("attack", "clip", str),
    "target_shape": ("attack", "target_shape", str),
    "target_length": ("attack", "length", int),
    "target_width": ("attack", "width", int),
    "dilation": ("attack", "mask_dilation", int),
    "tv_lambda": ("detect", "tv_lambda", float),
    "tv_iters": ("detect", "tv_iters", int),
    "bins": ("detect", "bins", int),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    for flag, (_, _, typ) in _FLAGS.items():
        common.add_argument("--" + flag.replace("_", "-"), dest=flag, type=typ, default=None)
    eps = common.add_mutually_exclusive_group()
    eps.add_argument("--epsilon-rel", type=float, help="budget as a fraction of max|Re(z)|")
    eps.add_argument("--epsilon-abs", type=float, help="absolute budget")
    common.add_argument("--all-entries", action="store_true",
                        help="perturb unsampled k-space entries too")

    parser = _Parser(prog="mrihallu", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("phantom-gen", parents=[common], help="write a synthetic KSC dataset")
    gen.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    sub.add_parser("train", parents=[common], help="train a learned reconstructor")
    sub.add_parser("attack", parents=[common], help="run the masked iterative FGSM attack on test samples")
    sub.add_parser("eval", parents=[common], help="paired metrics for attacked samples")
    sub.add_parser("detect", parents=[common], help="TV-referenced detection experiment")
    sub.add_parser("report", parents=[common], help="aggregate reports into summary tables")
    return parser


def resolve_config(args) -> dict:
    overrides: dict = {}
    for flag, (section, key, _) in _FLAGS.items():
        value = getattr(args, flag)
        if value is None:
            continue
        if section is None:
            overrides[key] = value
        else:
            overrides.setdefault(section, {})[key] = value
    if args.epsilon_rel is not None:
        overrides.setdefault("attack", {}).update(epsilon=args.epsilon_rel, epsilon_mode="relative")
    if args.epsilon_abs is not None:
        overrides.setdefault("attack", {}).update(epsilon=args.epsilon_abs, epsilon_mode="absolute")
    if args.all_entries:
        overrides.setdefault("attack", {})["sampled_only"] = False
    return load_config(args.config, overrides)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer")


def _pmap(fn, items):
    items = list(items)
    n = _workers()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _stamp(cfg: dict) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_hash": config_hash(cfg), "seed": cfg["seed"]}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _write_csv(path: Path, cfg: dict, header, rows) -> None:
    buf = io.StringIO()
    stamp = _stamp(cfg)
    buf.write(f"# schema_version={stamp['schema_version']} config_hash={stamp['config_hash']} seed={stamp['seed']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())


def _echo_config(out: Path, stage: str, cfg: dict) -> None:
    _write_json(out / "run" / f"{stage}.config.json", {**cfg, "config_hash": config_hash(cfg)})


def _attack_spec(cfg: dict) -> AttackSpec:
    return AttackSpec(seed=cfg["seed"], **cfg["attack"])


def _load_split(out: Path, split: str):
    data_dir = out / "data"
    if not data_dir.is_dir() or not ksc.list_samples(data_dir):
        raise DataError(f"no dataset in {data_dir}; run `mrihallu phantom-gen --out {out}` first")
    samples = ksc.read_dataset(data_dir)
    chosen = [s for s in samples if s.meta.get("split") == split]
    if not chosen:
        raise DataError(f"dataset in {data_dir} has no {split!r} samples")
    return chosen


def _load_model(out: Path, variant: str):
    path = out / "models" / f"{variant}.json"
    if variant == "zero_fill":
        return build_model("zero_fill")
    if not path.exists():
        raise DataError(f"no checkpoint {path}; run `mrihallu train --variant {variant} --out {out}` first")
    return load_checkpoint(path)


def _maps_cache():
    cache = {}

    def maps_for(sample):
        key = (sample.kspace.shape, sample.meta.get("coil_seed", 0), sample.meta.get("coil_smoothness", 0.5))
        if key not in cache:
            cache[key] = ksc.sample_maps(sample)
        return cache[key]

    return maps_for


def cmd_phantom_gen(cfg: dict, out: Path, force: bool = False) -> list[Path]:
    d = cfg["data"]
    if d["n_samples"] < 1 or not 0 <= d["n_test"] <= d["n_samples"]:
        raise ConfigError("need n_samples >= 1 and 0 <= n_test <= n_samples")
    # validates acceleration / centre fraction before anything touches disk
    make_mask(d["width"], d["acceleration"], d["center_fraction"], d["mask_kind"], 0)
    maps = make_coil_maps(d["height"], d["width"], d["n_coils"], d["coil_seed"])
    data_dir = out / "data"
    if data_dir.exists() and any(data_dir.iterdir()) and not force:
        raise DataError(f"{data_dir} already holds a dataset; pass --force to overwrite")
    tmp = out / ".data.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    n_train = d["n_samples"] - d["n_test"]

    def one(i):
        s = make_sample(i, h=d["height"], w=d["width"], n_coils=d["n_coils"], acceleration=d["acceleration"],
                        center_fraction=d["center_fraction"], mask_kind=d["mask_kind"],
                        noise_sigma=d["noise_sigma"], n_ellipses=d["n_ellipses"], seed=cfg["seed"],
                        coil_seed=d["coil_seed"], maps=maps)
        return ksc.write_sample(tmp, s, {"split": "train" if i < n_train else "test", "dataset": d["name"]})

    paths = _pmap(one, range(d["n_samples"]))
    if data_dir.exists():
        shutil.rmtree(data_dir)
    tmp.rename(data_dir)
    log.info("wrote %d samples to %s", len(paths), data_dir)
    return [data_dir / p.name for p in paths]


def _model_hyper(cfg: dict) -> dict:
    m = cfg["model"]
    if m["variant"] == "varnet_lite":
        return {"cascades": m["cascades"]}
    return {}


def cmd_train(cfg: dict, out: Path):
    m = cfg["model"]
    if m["variant"] not in ("unet_lite", "varnet_lite"):
        raise ConfigError(f"only learned variants can be trained, got {m['variant']!r}")
    samples = _load_split(out, "train")
    shape = samples[0].kspace.shape[-2:]
    model = build_model(m["variant"], shape, **_model_hyper(cfg)).init(cfg["seed"])
    tc = TrainConfig(epochs=m["epochs"], batch_size=m["batch_size"], lr=m["lr"], momentum=m["momentum"],
                     loss=m["loss"], seed=cfg["seed"])
    maps = _maps_cache()(samples[0])
    model, trace = train(model, samples, tc, maps=maps)
    save_checkpoint(model, out / "models" / m["variant"])
    _write_json(out / "models" / f"{m['variant']}.train.json",
                {**_stamp(cfg), "variant": m["variant"], "loss_trace": trace, "n_train": len(samples)})
    return model, trace


def _attack_dir(out: Path, variant: str) -> Path:
    return out / "attack" / variant


def cmd_attack(cfg: dict, out: Path):
    variant = cfg["model"]["variant"]
    if variant == "tv":
        raise ConfigError("the TV reconstructor is not differentiable and cannot be attacked")
    model = _load_model(out, variant)
    samples = _load_split(out, "test")
    base = _attack_spec(cfg)
    maps_for = _maps_cache()
    adir = _attack_dir(out, variant)

    def one(item):
        i, s = item
        spec = AttackSpec(**{**base.to_dict(), "seed": base.seed + i})
        res = masked_iterative_fgsm(model, s.kspace, spec, mask=s.mask, maps=maps_for(s))
        ksc.write_real(adir / f"{s.id}.delta.bin", res.delta_star)
        pert = ksc.Sample(s.id, res.perturbed_kspace, s.mask, s.ground_truth, s.noise_sigma, dict(s.meta))
        ksc.write_sample(adir / "perturbed", pert, {"attacked": True})
        record = {
            **_stamp(cfg), "sample_id": s.id, "variant": variant, "spec": spec.to_dict(),
            "attack_seed": spec.seed, "epsilon_abs": res.epsilon, "alpha_abs": res.alpha,
            "clip_bounds": [float(b) for b in res.clip_bounds], "best_loss": res.best_loss,
            "baseline_loss": res.baseline_loss, "loss_trace": res.loss_trace, "flags": res.flags,
            "delta_file": f"{s.id}.delta.bin", "delta_linf": float(np.max(np.abs(res.delta_star))),
        }
        _write_json(adir / f"{s.id}.json", record)
        return record

    adir.mkdir(parents=True, exist_ok=True)
    return _pmap(one, list(enumerate(samples)))


def _load_attacks(out: Path, variant: str, samples):
    adir = _attack_dir(out, variant)
    found = {}
    for s in samples:
        rec_path = adir / f"{s.id}.json"
        if not rec_path.exists():
            raise DataError(f"no attack artifacts for {s.id} in {adir}; "
                            f"run `mrihallu attack --variant {variant} --out {out}` first")
        rec = json.loads(rec_path.read_text())
        delta = ksc.read_real(adir / rec["delta_file"], s.kspace.shape)
        pert = ksc.read_sample(adir / "perturbed" / f"{s.id}.json")
        found[s.id] = (rec, delta, pert.kspace)
    return found


def cmd_eval(cfg: dict, out: Path) -> list[MetricReport]:
    variant = cfg["model"]["variant"]
    model = _load_model(out, variant)
    samples = _load_split(out, "test")
    attacks = _load_attacks(out, variant, samples)
    maps_for = _maps_cache()

    def one(s):
        rec, delta, zt = attacks[s.id]
        return report_pair(s.kspace, delta, model, mask=s.mask, maps=maps_for(s), perturbed=zt,
                           objective=rec["best_loss"], sample_id=s.id)

    reports = _pmap(one, samples)
    rows = []
    for r in reports:
        rec = attacks[r.sample_id][0]
        rows.append({**_stamp(cfg), "variant": variant, "dataset": cfg["data"]["name"],
                     "attack": rec["spec"], "epsilon_abs": rec["epsilon_abs"], **r.to_dict()})
    _write_jsonl(out / "reports" / f"eval_{variant}.jsonl", rows)
    return reports


def cmd_detect(cfg: dict, out: Path):
    variant = cfg["model"]["variant"]
    model = _load_model(out, variant)
    samples = _load_split(out, "test")
    attacks = _load_attacks(out, variant, samples)
    det = cfg["detect"]
    tv = {"lam": det["tv_lambda"], "iters": det["tv_iters"], "eps_tv": det["tv_eps"]}
    maps_for = _maps_cache()
    perturbed = {k: v[2] for k, v in attacks.items()}
    per_sample = _pmap(lambda s: run_detection_experiment([s], model, _attack_spec(cfg), tv, maps_for, perturbed),
                       samples)
    records = [r for recs in per_sample for r in recs]
    rdir = out / "reports"
    _write_jsonl(rdir / f"detect_{variant}.jsonl",
                 [{**_stamp(cfg), "variant": variant, "tv": tv, **r.to_dict()} for r in records])
    evals = {}
    for metric in METRICS:
        ev = threshold_detector_eval(records, metric, det["bins"])
        evals[metric] = ev
        _write_json(rdir / f"detector_{variant}_{metric}.json", {**_stamp(cfg), "variant": variant, **ev.to_dict()})
        h = ev.histogram
        rows = [(repr(lo), repr(hi), repr(pc), repr(pk))
                for lo, hi, pc, pk in zip(h["edges"][:-1], h["edges"][1:], h["p_clean"], h["p_cont"])]
        _write_csv(rdir / f"hist_{variant}_{metric}.csv", cfg, ("bin_lo", "bin_hi", "p_clean", "p_cont"), rows)
    return records, evals


def _read_report_rows(path: Path):
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_report(cfg: dict, out: Path) -> Path:
    rdir = out / "reports"
    evals = sorted(rdir.glob("eval_*.jsonl")) if rdir.is_dir() else []
    if not evals:
        raise DataError(f"no eval reports in {rdir}; run `mrihallu eval --out {out}` first")
    table = []
    for path in evals:
        rows = _read_report_rows(path)
        reports = [MetricReport(r["sample_id"], _floats(r["input_pair"]), _floats(r["recon_pair"]),
                                r["objective"]) for r in rows]
        agg = aggregate(reports)
        variant, dataset = rows[0]["variant"], rows[0]["dataset"]
        for pair in ("input_pair", "recon_pair"):
            for metric in METRICS:
                a = agg[pair][metric]
                table.append((variant, dataset, pair, metric,
                              "" if a["mean"] is None else repr(a["mean"]),
                              "" if a["std"] is None else repr(a["std"])))
    _write_csv(rdir / "table1.csv", cfg, ("model", "dataset", "pair", "metric", "mean", "std"), table)
    det_rows = []
    for path in sorted(rdir.glob("detector_*.json")):
        d = json.loads(path.read_text())
        det_rows.append((d["variant"], d["metric"], d["direction"], repr(d["auc"]), repr(d["overlap"]),
                         d["n_clean"], d["n_contaminated"]))
    if det_rows:
        _write_csv(rdir / "detection_summary.csv", cfg,
                   ("model", "metric", "direction", "auc", "overlap", "n_clean", "n_contaminated"), det_rows)
    return rdir / "table1.csv"


def _floats(pair: dict) -> dict:
    return {k: (float("nan") if v is None and k in METRICS else v) for k, v in pair.items()}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _attack_spec(cfg)  # reject inconsistent attack settings before any stage runs
        out = args.out.resolve()
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "phantom-gen":
            cmd_phantom_gen(cfg, out, force=args.force)
        elif args.command == "train":
            cmd_train(cfg, out)
        elif args.command == "attack":
            cmd_attack(cfg, out)
        elif args.command == "eval":
            cmd_eval(cfg, out)
        elif args.command == "detect":
            cmd_detect(cfg, out)
        elif args.command == "report":
            cmd_report(cfg, out)
        _echo_config(out, args.command.replace("-", "_"), cfg)
    except ConfigError as exc:
        print(f"mrihallu: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ksc.KSCError, FileNotFoundError) as exc:
        print(f"mrihallu: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, AttackError, FloatingPointError) as exc:
        print(f"mrihallu: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"mrihallu: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
