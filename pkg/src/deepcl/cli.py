"""deepcl command line: gen-data, train, eval, sweep, gradcheck.

Exit codes: 0 success, 1 usage error, 2 runtime/contract error, 3 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import evaluation as E
from . import network as N
from .losses import LossConfig
from .synthdata import (SceneConfig, generate_dataset, load_image_pairs, read_dataset,
                        write_dataset)
from .training import TrainConfig, predict, split_by_seed, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("deepcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_seed() -> int:
    return int(os.environ.get("DEEPCL_SEED", "0"))


def _seed_list(text: str) -> list[int]:
    seeds = [int(s) for s in text.replace(",", " ").split()]
    if not seeds:
        raise UsageError("empty seed list")
    return seeds


def _float_list(text: str) -> list[float]:
    return [float(s) for s in text.replace(",", " ").split()]


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    return json.loads(Path(path).read_text())


def _write_run_manifest(out: Path, command: str, config: dict, seeds, artifacts, t0: float) -> None:
    doc = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "artifacts": sorted(str(a) for a in artifacts),
        "version": __version__,
        "duration_s": round(time.perf_counter() - t0, 3),
    }
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str))


def _load_samples(path: str):
    d = Path(path)
    if (d / "manifest.json").exists():
        return read_dataset(d)
    if any(d.glob("*_A.png")):
        return load_image_pairs(d)
    raise FileNotFoundError(f"{d}: no manifest.json and no *_A.png triplets")


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    file_cfg = _load_config(args.config).get("scene", {})
    if args.size is not None:
        file_cfg["size"] = args.size
    cfg = SceneConfig.pseudo_only(**file_cfg) if args.pseudo_only else SceneConfig(**file_cfg)
    if cfg.size % 32:
        raise UsageError(f"--size must be divisible by 32, got {cfg.size}")
    seed = args.seed if args.seed is not None else _default_seed()
    out = Path(args.out)
    write_dataset(generate_dataset(args.n, seed, cfg), out, cfg, seed)
    _write_run_manifest(out, "gen-data", {"scene": asdict(cfg), "n": args.n}, [seed],
                        [out / "manifest.json"], t0)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def _train_config(args, file_cfg: dict) -> TrainConfig:
    loss_d = {**file_cfg.pop("loss", {})}
    if getattr(args, "tau", None) is not None:
        loss_d["tau"] = args.tau
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(file_cfg) - known - {"scene"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    base = {k: v for k, v in file_cfg.items() if k in known}
    loss_kind = getattr(args, "loss", None)
    decoder = getattr(args, "decoder", None)
    if loss_kind is not None:
        base["use_hsac"], base["use_con"] = loss_kind == "hsac", loss_kind == "con"
    if decoder is not None:
        base["use_seg"] = decoder != "none"
        base["use_metric_induction"] = decoder == "metric"
    if not (base.get("use_hsac", True) or base.get("use_con", False) or base.get("use_seg", True)):
        raise UsageError("--loss none with --decoder none trains nothing")
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr0")):
        if getattr(args, flag, None) is not None:
            base[key] = getattr(args, flag)
    seed = getattr(args, "seed", None)
    base["seed"] = seed if seed is not None else base.get("seed", _default_seed())
    try:
        return TrainConfig(loss=LossConfig(**loss_d), **base)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _train_config(args, _load_config(args.config))
    data = _load_samples(args.data)
    out = Path(args.out)
    res = train(cfg, data, out_dir=out)
    _write_run_manifest(out, "train", cfg.to_dict(), [cfg.seed],
                        [out / "model.dclm", out / "train_log.csv"], t0)
    last = res.log[-1]
    print(f"trained {cfg.epochs} epochs on {res.n_train} samples ({res.seconds:.1f}s); "
          f"last val F1 seg={last['val_f1_seg']} metric={last['val_f1_metric']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.perf_counter()
    params = N.load_checkpoint(args.ckpt)
    data = _load_samples(args.data)
    out = Path(args.out) if args.out else Path(args.ckpt).parent
    out.mkdir(parents=True, exist_ok=True)
    meta = {"mode": args.mode, "ckpt": str(args.ckpt), "data": str(args.data)}
    if args.mode == "seg":
        if params.config.decoder == "none":
            raise UsageError("checkpoint has no decoder; use --mode metric")
        pred = predict(params, data)
        gts = np.stack([s.mask for s in data])
        report = E.metrics(E.confusion(N.predict_seg(pred.logits), gts))
    else:
        if args.thre == "auto":
            if args.calib:
                calib, scored = _load_samples(args.calib), data
            else:
                calib, scored = split_by_seed(data)
            if not scored:
                raise UsageError("no held-out samples to score")
            cp = predict(params, calib)
            thre, _ = E.threshold_sweep(cp.distance, np.stack([s.mask for s in calib]))
            meta["calibration_samples"] = len(calib)
        else:
            try:
                thre = float(args.thre)
            except ValueError as exc:
                raise UsageError(f"--thre must be a number or 'auto', got {args.thre!r}") from exc
            scored = data
        pred = predict(params, scored)
        gts = np.stack([s.mask for s in scored])
        report = E.metrics(E.confusion((pred.distance > thre).astype(np.uint8), gts))
        meta["threshold"] = thre
        meta["scored_samples"] = len(scored)
    stem = out / f"eval_{args.mode}"
    E.write_table([report.to_dict()], stem, meta)
    _write_run_manifest(out, "eval", meta, [], [stem.with_suffix(".csv"), stem.with_suffix(".json")], t0)
    print(json.dumps({**meta, **report.to_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    seeds = _seed_list(args.seeds)
    file_cfg = _load_config(args.config)
    data = _load_samples(args.data)
    if args.test:
        train_data, test_data = data, _load_samples(args.test)
    else:
        train_data, test_data = split_by_seed(data)
    pseudo = _load_samples(args.pseudo) if args.pseudo else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "temperature":
        ns = argparse.Namespace(loss="hsac", decoder=args.decoder or "none", epochs=args.epochs,
                                batch_size=None, lr=None, seed=seeds[0], tau=None)
        base = _train_config(ns, file_cfg)
        taus = _float_list(args.taus) if args.taus else list(E.DEFAULT_TAUS)
        rows = E.temperature_sweep(base, taus, seeds, train_data, test_data, out_dir=out, jobs=args.jobs)
        E.write_table(rows, out / "temperature", {"seeds": seeds, "taus": taus})
        curve = E.gradient_weight_curve(taus)
        E.write_table(curve, out / "gradient_weight_curve")
    else:
        ns = argparse.Namespace(loss=None, decoder=None, epochs=args.epochs, batch_size=None,
                                lr=None, seed=seeds[0], tau=None)
        base = _train_config(ns, file_cfg)
        rows = E.ablation_grid(base, train_data, test_data, seeds, pseudo, out_dir=out, jobs=args.jobs)
        E.write_table(rows, out / "ablation", {"seeds": seeds})
    _write_run_manifest(out, f"sweep {args.kind}", base.to_dict(), seeds, list(out.glob("*.csv")), t0)
    for r in rows:
        print(json.dumps(r, sort_keys=True, default=str))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    seed = args.seed if args.seed is not None else _default_seed()
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    results, secs = gradcheck.run(args.scope, args.trials, seed)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status} {r.scope:<10} {r.name:<24} max_rel_error={r.max_rel_error:.3e} tol={r.tol:g}")
    print(f"{len(results) - failed}/{len(results)} checks passed in {secs:.1f}s")
    return EXIT_GRADCHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepcl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic bi-temporal dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--pseudo-only", action="store_true")
    g.add_argument("--size", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--loss", choices=["hsac", "con", "none"])
    t.add_argument("--decoder", choices=["metric", "simple", "none"])
    t.add_argument("--tau", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=["seg", "metric"], required=True)
    e.add_argument("--thre", default="auto")
    e.add_argument("--calib", help="dataset for threshold selection (default: seed split of --data)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="temperature or ablation sweep")
    s.add_argument("--kind", choices=["temperature", "ablation"], required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", required=True)
    s.add_argument("--test")
    s.add_argument("--pseudo")
    s.add_argument("--taus")
    s.add_argument("--decoder", choices=["metric", "simple", "none"])
    s.add_argument("--epochs", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--config")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--scope", choices=["losses", "network", "all"], default="all")
    c.add_argument("--trials", type=int, default=5)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"deepcl: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"deepcl: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
