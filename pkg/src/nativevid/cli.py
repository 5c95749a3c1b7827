"""
Command-line entry point.

    nativevid synth     --out DIR [--preset default]
    nativevid train     --manifest FILE --out DIR [--mode full|lp|lora] [--policy dynamic[224,720]] [--T 8]
                        [--recipe desk|pretrained]
    nativevid eval      --checkpoint FILE --manifest FILE --out DIR [--split test]
    nativevid crossval  --manifest FILE --out DIR      (or --matrix FILE [--quality ...])
    nativevid perturb   --checkpoint FILE --manifest FILE --out DIR [--kinds jpeg,resize,crop]
    nativevid gradcheck --out DIR [--seeds 20]

Settings come from built-in defaults, then ``--config FILE`` (JSON, keys
named like the long flags with underscores), then explicit flags. Every
run writes ``config.json`` (the resolved settings) and ``run.log`` into
``--out``; failures exit nonzero and write ``error.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, NativeVidError

log = logging.getLogger("nativevid")

MODE_ALIASES = {"full": "full", "lp": "linear_probe", "linear_probe": "linear_probe", "lora": "lora"}

COMMON = {"seed": 0, "threads": None, "precision": 32}

DEFAULTS = {
    "synth": {"preset": "default"},
    "train": {"manifest": None, "mode": "full", "recipe": "desk", "policy": "dynamic[224,720]", "T": 8, "lr": None,
              "batch_size": None, "epochs": None, "patience": 5, "lora_rank": 16, "lora_alpha": 16.0,
              "lora_targets": "wq,wv", "layers": 4, "dim": 64, "heads": 4, "ffn_dim": 128, "window": 8,
              "init_std": None, "max_tokens": 16384, "hflip": False, "noise_std": 0.0},
    "eval": {"checkpoint": None, "manifest": None, "split": "test", "policy": None, "exclude": ""},
    "perturb": {"checkpoint": None, "manifest": None, "split": "test", "policy": None,
                "kinds": "jpeg,resize,crop"},
    "gradcheck": {"seeds": 20, "layers": 2, "dim": 32, "heads": 4, "ffn_dim": 64, "window": 4,
                  "init_std": 0.1, "step": 1e-4, "max_coords": 8, "tolerance": 1e-4},
}
DEFAULTS["crossval"] = dict(DEFAULTS["train"], matrix=None, quality="", nmds_restarts=8)


def _add_train_flags(p):
    p.add_argument("--manifest")
    p.add_argument("--mode", choices=sorted(MODE_ALIASES))
    p.add_argument("--recipe", choices=["desk", "pretrained"],
                   help="defaults for unset lr/batch/epochs/init: desk (from scratch) or pretrained")
    p.add_argument("--policy", help="fixed-crop-224 | fixed-resize-224 | dynamic[MIN,MAX]")
    p.add_argument("--T", type=int, choices=[2, 4, 8])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lora-rank", type=int)
    p.add_argument("--lora-alpha", type=float)
    p.add_argument("--lora-targets")
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ffn-dim", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--init-std", type=float)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--hflip", action="store_const", const=True)
    p.add_argument("--noise-std", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nativevid", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    cmds = {}
    for name in ("synth", "train", "eval", "crossval", "perturb", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with settings")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="BLAS threads (default: $NVF_THREADS or 1)")
        p.add_argument("--precision", type=int, choices=[32, 64])
        p.add_argument("-v", "--verbose", action="store_true")
        cmds[name] = p
    cmds["synth"].add_argument("--preset")
    _add_train_flags(cmds["train"])
    _add_train_flags(cmds["crossval"])
    cmds["crossval"].add_argument("--matrix", help="analyse an existing matrix (JSON or CSV) instead")
    cmds["crossval"].add_argument("--quality", help="comma-separated quality per generator")
    cmds["crossval"].add_argument("--nmds-restarts", type=int)
    for name in ("eval", "perturb"):
        p = cmds[name]
        p.add_argument("--checkpoint")
        p.add_argument("--manifest")
        p.add_argument("--split", choices=["train", "val", "test", "all"])
        p.add_argument("--policy")
    cmds["eval"].add_argument("--exclude", help="comma-separated generators left out of mACC/mAP")
    cmds["perturb"].add_argument("--kinds")
    g = cmds["gradcheck"]
    for flag, typ in (("--seeds", int), ("--layers", int), ("--dim", int), ("--heads", int),
                      ("--ffn-dim", int), ("--window", int), ("--init-std", float), ("--step", float),
                      ("--max-coords", int), ("--tolerance", float)):
        g.add_argument(flag, type=typ)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(COMMON, **DEFAULTS[args.command])
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg.update(from_file)
    for k, v in vars(args).items():
        if k in ("command", "config", "out", "verbose") or v is None:
            continue
        cfg[k] = v
    if cfg.get("threads") is None:
        cfg["threads"] = int(os.environ.get("NVF_THREADS", "1"))
    cfg["command"] = args.command
    cfg["version"] = __version__
    return cfg


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:                      # optional; BLAS then keeps its own setting
        return nullcontext()
    return threadpool_limits(limits=int(n))


def _dtype(cfg):
    return np.float64 if int(cfg["precision"]) == 64 else np.float32


def _split(manifest, name):
    return manifest if name == "all" else manifest.split(name)


# -- subcommands ---------------------------------------------------------------
def cmd_synth(cfg, out: Path) -> dict:
    from .synth import CorpusConfig, build_corpus

    corpus = cfg.get("corpus")
    cc = CorpusConfig.from_dict(dict(corpus, seed=cfg["seed"]) if corpus else
                                {"preset": cfg["preset"], "seed": cfg["seed"]})
    manifest = build_corpus(cc, out)
    return {"records": len(manifest), "manifest": str(out / "manifest.jsonl")}


def _recipe(cfg):
    """Fallbacks for unset lr / batch size / epochs / init std."""
    from .detector import DESK_INIT_STD, DESK_RECIPE

    name = cfg.get("recipe", "desk")
    if name == "pretrained":
        return {"lr": None, "batch_size": None, "max_epochs": None, "init_std": 0.02}
    if name != "desk":
        raise ConfigError(f"unknown recipe {name!r}; choose desk or pretrained")
    return dict(DESK_RECIPE, init_std=DESK_INIT_STD)


def _pick(cfg, key, recipe_key):
    return cfg[key] if cfg.get(key) is not None else _recipe(cfg)[recipe_key]


def _model_config(cfg):
    from .backbone import ModelConfig

    return ModelConfig(num_layers=cfg["layers"], dim=cfg["dim"], num_heads=cfg["heads"],
                       ffn_dim=cfg["ffn_dim"], window=cfg["window"], init_std=_pick(cfg, "init_std", "init_std"))


def _train_config(cfg):
    from .detector import TrainConfig
    from .preprocess import Preprocess

    if cfg["mode"] not in MODE_ALIASES:
        raise ConfigError(f"unknown tuning mode {cfg['mode']!r}; choose from {sorted(MODE_ALIASES)}")
    return TrainConfig(mode=MODE_ALIASES[cfg["mode"]], lr=_pick(cfg, "lr", "lr"),
                       batch_size=_pick(cfg, "batch_size", "batch_size"),
                       max_epochs=_pick(cfg, "epochs", "max_epochs"), patience=cfg["patience"], seed=cfg["seed"],
                       preprocess=Preprocess.parse(cfg["policy"], T=cfg["T"]),
                       lora_rank=cfg["lora_rank"], lora_alpha=cfg["lora_alpha"],
                       lora_targets=tuple(t for t in str(cfg["lora_targets"]).split(",") if t),
                       max_tokens=cfg["max_tokens"], hflip=bool(cfg["hflip"]), noise_std=cfg["noise_std"])


def _load(path):
    from .media import load_manifest

    if not path:
        raise ConfigError("--manifest is required")
    return load_manifest(path)


def cmd_train(cfg, out: Path) -> dict:
    from .detector import DetectorModel, train

    manifest = _load(cfg["manifest"])
    tc = _train_config(cfg)
    mc = _model_config(cfg)
    tr, va = manifest.split("train"), manifest.split("val")
    if not len(tr) or not len(va):
        raise ConfigError("empty split: training needs train and val records")
    model = DetectorModel.init(mc, seed=cfg["seed"], dtype=_dtype(cfg))
    cfg["resolved_train_config"] = tc.to_dict()
    res = train(tr, va, tc, init=model, out_dir=out)
    return {"best_epoch": res.best_epoch, "epochs_run": len(res.log), "trainable": len(res.trainable),
            "checkpoint": str(out / "checkpoint.nvf")}


def _checkpoint(cfg):
    from .detector import DetectorModel
    from .preprocess import Preprocess

    if not cfg.get("checkpoint"):
        raise ConfigError("--checkpoint is required")
    model, meta = DetectorModel.load(cfg["checkpoint"])
    if cfg.get("policy"):
        pre = Preprocess.parse(cfg["policy"])
    elif meta.get("preprocess"):
        pre = Preprocess.from_dict(meta["preprocess"])
    else:
        pre = Preprocess()
    return model, pre


def cmd_eval(cfg, out: Path) -> dict:
    from .metrics import evaluate

    manifest = _split(_load(cfg["manifest"]), cfg["split"])
    if not len(manifest):
        raise ConfigError(f"empty split: no {cfg['split']} records in {cfg['manifest']}")
    model, pre = _checkpoint(cfg)
    exclude = [g for g in str(cfg["exclude"]).split(",") if g]
    report, scores = evaluate(model, manifest, pre, exclude)
    report.save(out / "report.json", out / "report.csv")
    with open(out / "scores.jsonl", "w") as fh:
        for r, s in zip(manifest.records, scores):
            fh.write(json.dumps({"id": r.id, "label": r.label, "generator": r.generator,
                                 "score": float(s)}, sort_keys=True) + "\n")
    return {"mACC": report.mACC, "mAP": report.mAP, "overall_ACC": report.overall_ACC}


def cmd_crossval(cfg, out: Path) -> dict:
    from . import crossval as cv

    if cfg.get("matrix"):
        matrix = cv.load_matrix(cfg["matrix"])
        quality = [float(q) for q in str(cfg.get("quality") or "").split(",") if q.strip()]
    else:
        manifest = _load(cfg["manifest"])
        matrix, quality = cv.build_matrix(manifest, _train_config(cfg), _model_config(cfg),
                                          reals_seed=cfg["seed"], out_dir=out)
    matrix.require_valid()
    matrix.save(out / "matrix.json")
    d = cv.distance(matrix)
    (out / "distance.json").write_text(json.dumps({"names": matrix.names, "d": d.tolist()}, indent=2) + "\n")
    emb = cv.nmds(d, seed=cfg["seed"], n_init=cfg["nmds_restarts"], names=matrix.names)
    emb.save(out / "embedding.json", out / "embedding.csv")
    summary = {"generators": matrix.names, "stress": emb.stress}
    if quality and all(np.isfinite(quality)):
        if len(quality) != len(matrix.names):
            raise ConfigError(f"{len(quality)} quality scores for {len(matrix.names)} generators")
        corr = cv.correlate(matrix, quality)
        (out / "correlation.json").write_text(json.dumps(corr.to_dict(), indent=2) + "\n")
        summary["rho"] = corr.rho
    return summary


def cmd_perturb(cfg, out: Path) -> dict:
    from .robustness import default_grid, robustness_curve, write_curve

    manifest = _split(_load(cfg["manifest"]), cfg["split"])
    if not len(manifest):
        raise ConfigError(f"empty split: no {cfg['split']} records in {cfg['manifest']}")
    model, pre = _checkpoint(cfg)
    kinds = [k for k in str(cfg["kinds"]).split(",") if k]
    points = robustness_curve(model, manifest, pre, default_grid(kinds))
    write_curve(out / "robustness.csv", points)
    return {"points": len(points)}


def cmd_gradcheck(cfg, out: Path) -> dict:
    from .backbone import ModelConfig
    from .gradcheck import run

    mc = ModelConfig(num_layers=cfg["layers"], dim=cfg["dim"], num_heads=cfg["heads"],
                     ffn_dim=cfg["ffn_dim"], window=cfg["window"], init_std=cfg["init_std"])
    rows = []
    for s in range(int(cfg["seeds"])):
        r = run(cfg["seed"] + s, mc, cfg["step"], cfg["max_coords"])
        rows.append({"seed": r.seed, "max_rel_error": r.max_rel_error, "tokens": r.tokens,
                     "per_param": r.per_param})
    worst = max(r["max_rel_error"] for r in rows)
    report = {"max_rel_error": worst, "tolerance": cfg["tolerance"], "passed": worst <= cfg["tolerance"],
              "seeds": rows}
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if worst > cfg["tolerance"]:
        raise NativeVidError(f"gradient check failed: max relative error {worst:.3e} > {cfg['tolerance']}")
    return {"max_rel_error": worst}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "crossval": cmd_crossval,
            "perturb": cmd_perturb, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    argv_used = sys.argv[1:] if argv is None else list(argv)
    log.info("command line: nativevid %s", " ".join(argv_used))
    try:
        cfg = resolve(args)
        with _thread_limit(cfg["threads"]):
            t0 = time.perf_counter()
            summary = COMMANDS[args.command](cfg, out)
            log.info("finished in %.1f s", time.perf_counter() - t0)
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")
        log.info("summary: %s", json.dumps(summary, sort_keys=True, default=str))
        print(json.dumps(summary, sort_keys=True, default=str))
        return 0
    except (NativeVidError, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        (out / "error.json").write_text(json.dumps(err, indent=2, sort_keys=True) + "\n")
        log.error("%s: %s", err["error"], err["message"])
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1
    finally:
        root.removeHandler(handler)
        handler.close()


if __name__ == "__main__":
    sys.exit(main())
