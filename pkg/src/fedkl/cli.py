"""Command-line experiment driver.

    fedkl train  --config cfg.json [--seed N] [--out DIR]
    fedkl attack --config cfg.json --checkpoint DIR/client_0.ckpt [--sample I] [--scenario S]
    fedkl eval   --config cfg.json --checkpoint DIR/client_0.ckpt [--key-source own|random|other:I]
    fedkl report RESULTS_DIR [--out table.csv]

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 internal invariant breach.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import fl
from .attacks import AttackConfig, Scenario, dlg_attack, victim_update
from .data import Dataset, load_idx, synth_blobs, write_ppm
from .errors import ConfigError, FedKLError, FormatError
from .keylock import DEFAULT_KEY_LEN, load_key, save_key
from .metrics import IDENTICAL
from .models import load_model, save_checkpoint

log = logging.getLogger("fedkl")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INVARIANT = 0, 2, 3, 4

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "mode": "fedkl",
    "seed": 0,
    "out": "runs/default",
    "norm": "keylock",
    "model": {"kind": "tinycnn", "channels": 4, "n_conv": 2, "kernel": 3, "stride": 1, "pad": 1,
              "activation": "sigmoid", "hidden": [32]},
    "key": {"key_len": DEFAULT_KEY_LEN, "lock_bias": True},
    "dataset": {"kind": "blobs", "classes": 4, "shape": [1, 8, 8], "n_per_class": 50, "sigma": 0.05,
                "seed": 0, "test_fraction": 0.25, "images": None, "labels": None},
    "fl": {"clients": 3, "rounds": 30, "epochs": 1, "lr": 0.1, "batch_size": 16},
    "attack": {"scenario": "none", "sample_index": 0, "max_iters": 2000, "optimizer": "lbfgs",
               "label_mode": "inferred", "seed": 0, "fd_step": 1e-5, "tol": 1e-14},
}

MODES = ("centralized", "fedavg", "fedkl")
NORMS = ("none", "plain", "keylock")


# ---------------------------------------------------------------- config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config field {path + k!r}")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(f"config field {path + k!r} must be an object")
        out[k] = _merge(base[k], v, f"{path}{k}.") if isinstance(base[k], dict) and base[k] else v
    return out


def _need(cond: bool, field: str, why: str) -> None:
    if not cond:
        raise ConfigError(f"invalid config field {field!r}: {why}")


def validate(cfg: dict) -> dict:
    _need(cfg["schema_version"] == SCHEMA_VERSION, "schema_version", f"expected {SCHEMA_VERSION}")
    _need(cfg["mode"] in MODES, "mode", f"must be one of {MODES}")
    _need(cfg["norm"] in NORMS, "norm", f"must be one of {NORMS}")
    _need(isinstance(cfg["seed"], int), "seed", "must be an integer")
    m = cfg["model"]
    _need(m["kind"] in ("tinycnn", "mlp"), "model.kind", "must be tinycnn or mlp")
    _need(m["activation"] in ("relu", "sigmoid"), "model.activation", "must be relu or sigmoid")
    _need(int(m["channels"]) >= 1 and int(m["n_conv"]) >= 1, "model.channels", "must be >= 1")
    if cfg["norm"] == "keylock":
        _need(int(cfg["key"]["key_len"]) >= 1, "key.key_len", "keylock needs a key length >= 1")
    d = cfg["dataset"]
    _need(d["kind"] in ("blobs", "idx"), "dataset.kind", "must be blobs or idx")
    if d["kind"] == "idx":
        _need(bool(d["images"]) and bool(d["labels"]), "dataset.images", "idx datasets need image and label paths")
    _need(0.0 < float(d["test_fraction"]) < 1.0, "dataset.test_fraction", "must be in (0, 1)")
    f = cfg["fl"]
    _need(int(f["clients"]) >= 1, "fl.clients", "must be >= 1")
    _need(int(f["rounds"]) >= 1, "fl.rounds", "must be >= 1")
    _need(int(f["epochs"]) >= 0, "fl.epochs", "must be >= 0")
    _need(float(f["lr"]) > 0, "fl.lr", "must be > 0")
    _need(int(f["batch_size"]) >= 1, "fl.batch_size", "must be >= 1")
    _need(not (cfg["mode"] == "fedavg" and cfg["norm"] == "keylock"), "norm",
          "fedavg aggregates every parameter and cannot run a key-lock model")
    a = cfg["attack"]
    try:
        Scenario(a["scenario"])
        AttackConfig(max_iters=int(a["max_iters"]), fd_step=float(a["fd_step"]), tol=float(a["tol"]),
                     seed=int(a["seed"]), label_mode=a["label_mode"], optimizer=a["optimizer"])
    except ValueError as exc:
        raise ConfigError(f"invalid config field 'attack': {exc}") from exc
    _need(not (cfg["norm"] != "keylock" and Scenario(a["scenario"]) != Scenario.NONE), "attack.scenario",
          "key and lock scenarios need a key-lock model; this run never creates keys")
    return cfg


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> dict:
    override = {}
    if path is not None:
        try:
            override = json.loads(Path(path).read_text())
        except ValueError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(override, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = _merge(DEFAULTS, override)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    return validate(cfg)


def model_arch(cfg: dict, image_shape, classes: int) -> dict:
    m, k = cfg["model"], cfg["key"]
    common = {"with_bn": cfg["norm"], "activation": m["activation"], "key_len": int(k["key_len"]),
              "lock_bias": bool(k["lock_bias"])}
    if m["kind"] == "mlp":
        dims = [int(np.prod(image_shape))] + [int(h) for h in m["hidden"]] + [classes]
        return {"kind": "mlp", "dims": dims, **common}
    return {"kind": "tinycnn", "in_shape": [int(v) for v in image_shape], "channels": int(m["channels"]),
            "classes": classes, "kernel": int(m["kernel"]), "stride": int(m["stride"]), "pad": int(m["pad"]),
            "n_conv": int(m["n_conv"]), **common}


def load_dataset(cfg: dict) -> tuple[Dataset, Dataset]:
    """(train, test) split of the configured dataset."""
    d = cfg["dataset"]
    if d["kind"] == "blobs":
        ds = synth_blobs(int(d["seed"]), int(d["classes"]), tuple(d["shape"]), int(d["n_per_class"]),
                         float(d["sigma"]))
    else:
        ds = load_idx(d["images"], d["labels"], int(d["classes"]))
    order = np.random.default_rng(int(d["seed"])).permutation(len(ds))
    n_test = max(1, int(round(len(ds) * float(d["test_fraction"]))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


def write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- train


def run_train(cfg: dict) -> Path:
    out = Path(cfg["out"])
    write_config(cfg, out)
    train, test = load_dataset(cfg)
    arch = model_arch(cfg, train.image_shape, train.n_classes)
    f = cfg["fl"]
    n_clients = 1 if cfg["mode"] == "centralized" else int(f["clients"])
    server, clients = fl.make_federation(arch, train, n_clients, cfg["seed"], float(f["lr"]), int(f["batch_size"]))
    step = fl.fedavg_round if cfg["mode"] == "fedavg" else fl.fedkl_round
    eval_rng = np.random.default_rng(np.random.SeedSequence(cfg["seed"]).spawn(1)[0])
    rows = []
    with open(out / "rounds.jsonl", "w") as jsonl:
        for _ in range(int(f["rounds"])):
            server, record = step(server, clients, int(f["epochs"]), test)
            for c in clients:
                rnd = fl.evaluate(c, test, "random", rng=eval_rng)
                rows.append((record.round, c.client_id, record.accuracy[c.client_id], rnd))
            jsonl.write(record.to_jsonl() + "\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client", "own_acc", "random_acc"])
        for r, cid, own, rnd in rows:
            w.writerow([r, cid, repr(own), repr(rnd)])
    global_model = clients[0].model
    save_checkpoint(global_model, out / "global.ckpt", global_model.shareable_names)
    for c in clients:
        save_checkpoint(c.model, out / f"client_{c.client_id}.ckpt")
        if c.key is not None:
            save_key(c.key, out / f"client_{c.client_id}.key")
    return out


# ---------------------------------------------------------------- attack / eval


def _load_client(cfg: dict, checkpoint: str):
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    train, _ = load_dataset(cfg)
    expected = model_arch(cfg, train.image_shape, train.n_classes)
    model = load_model(ckpt)
    if model.arch != expected:
        raise ConfigError(f"checkpoint architecture {model.arch} does not match the config {expected}")
    key = None
    if model.has_keylock:
        key_path = ckpt.with_suffix(".key")
        if not key_path.is_file():
            raise ConfigError(f"key-lock checkpoint {ckpt} has no key file {key_path.name}; "
                              "the run that produced it never created a key")
        key = load_key(key_path)
    return model, key, train


def run_attack(cfg: dict, checkpoint: str, sample: int | None = None, scenario: str | None = None) -> dict:
    a = dict(cfg["attack"])
    if sample is not None:
        a["sample_index"] = sample
    if scenario is not None:
        a["scenario"] = scenario
    model, key, train = _load_client(cfg, checkpoint)
    scen = Scenario(a["scenario"])
    if scen != Scenario.NONE and not model.has_keylock:
        raise ConfigError(f"scenario {scen.value!r} needs a key-lock model")
    idx = int(a["sample_index"])
    if not 0 <= idx < len(train):
        raise ConfigError(f"attack.sample_index {idx} outside [0, {len(train)})")
    x, label = train.sample(idx)
    target = victim_update(model, x, label, key)
    config = AttackConfig(max_iters=int(a["max_iters"]), fd_step=float(a["fd_step"]), tol=float(a["tol"]),
                          seed=int(a["seed"]), label_mode=a["label_mode"], optimizer=a["optimizer"])
    result = dlg_attack(model, target, config, scen, key, x_true=x)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(x[0], out / "true.ppm")
    write_ppm(result.x_hat[0], out / "reconstructed.ppm")
    payload = result.to_json()
    payload.update({"method": "DLG", "model": model.arch["kind"], "dataset": cfg["dataset"]["kind"],
                    "with_kl": model.has_keylock, "sample_index": idx, "true_label": label,
                    "checkpoint": str(checkpoint)})
    (out / "attack.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


def parse_key_source(text: str):
    if text in ("own", "random"):
        return text
    if text.startswith("other:"):
        try:
            return ("other_client", int(text.split(":", 1)[1]))
        except ValueError:
            pass
    raise ConfigError(f"key source must be own, random or other:<client>, got {text!r}")


def run_eval(cfg: dict, checkpoint: str, key_source: str = "own") -> dict:
    model, key, _ = _load_client(cfg, checkpoint)
    _, test = load_dataset(cfg)
    source = parse_key_source(key_source)
    client = fl.Client(0, model, key, test, 1.0, 1, np.random.default_rng(0))
    others = [client]
    if isinstance(source, tuple):
        other_key = Path(checkpoint).with_name(f"client_{source[1]}.key")
        if not other_key.is_file():
            raise ConfigError(f"no key file for client {source[1]}")
        others.append(fl.Client(source[1], model, load_key(other_key), test, 1.0, 1, np.random.default_rng(0)))
        if source[1] == 0:
            others = others[1:]
    acc = fl.evaluate(client, test, source, clients=others, rng=np.random.default_rng(cfg["seed"]))
    payload = {"checkpoint": str(checkpoint), "key_source": key_source, "accuracy": acc, "n": len(test)}
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return payload


# ---------------------------------------------------------------- report

REPORT_COLUMNS = ["method", "model", "dataset", "scenario", "with_kl", "mse", "psnr_db", "ssim",
                  "mse_ratio", "psnr_ratio", "ssim_ratio", "source"]


def _as_float(v) -> float:
    return math.inf if v == IDENTICAL else float(v)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return IDENTICAL if math.isinf(v) else repr(v)
    return str(v)


def collect_results(results_dir) -> tuple[list[dict], int]:
    """Attack result rows under ``results_dir`` and the count of skipped files."""
    root = Path(results_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"results directory not found: {root}")
    files = sorted(p for p in root.rglob("*.json") if p.name != "config.json")
    if not files:
        raise FileNotFoundError(f"no result files in {root}")
    rows, skipped = [], 0
    for p in files:
        try:
            obj = json.loads(p.read_text())
            m = obj["metrics"]
            rows.append({"method": str(obj["method"]), "model": str(obj["model"]), "dataset": str(obj["dataset"]),
                         "scenario": str(obj["scenario"]), "with_kl": bool(obj["with_kl"]),
                         "mse": float(m["mse"]), "psnr_db": _as_float(m["psnr_db"]), "ssim": float(m["ssim"]),
                         "source": str(p.relative_to(root))})
        except (ValueError, KeyError, TypeError):
            skipped += 1
    return rows, skipped


def add_ratios(rows: list[dict]) -> list[dict]:
    """Per-metric ratio of each key-lock run to the mean of matching runs without it."""
    for r in rows:
        base = [b for b in rows if not b["with_kl"]
                and (b["method"], b["model"], b["dataset"]) == (r["method"], r["model"], r["dataset"])]
        for metric, col in (("mse", "mse_ratio"), ("psnr_db", "psnr_ratio"), ("ssim", "ssim_ratio")):
            r[col] = None
            if r["with_kl"] and base:
                denom = float(np.mean([b[metric] for b in base]))
                if denom != 0 and math.isfinite(denom) and math.isfinite(r[metric]):
                    r[col] = r[metric] / denom
    return rows


def run_report(results_dir, out_path=None) -> tuple[str, int]:
    rows, skipped = collect_results(results_dir)
    add_ratios(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    text = buf.getvalue()
    if skipped:
        log.warning("skipped %d malformed result file(s)", skipped)
    if out_path is not None:
        Path(out_path).write_text(text)
    return text, skipped


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedkl", description="Key-lock FL defense lab")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; omitted fields take their defaults")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", help="output directory (overrides the config)")

    common(sub.add_parser("train", help="train centralized, FedAvg or FedKL"))
    sp = sub.add_parser("attack", help="run DLG on one client sample")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sample", type=int)
    sp.add_argument("--scenario", choices=[s.value for s in Scenario])
    sp = sub.add_parser("eval", help="accuracy with own, random or another client's key")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--key-source", default="own")
    sp = sub.add_parser("report", help="aggregate attack results into a CSV table")
    sp.add_argument("results_dir")
    sp.add_argument("--out", help="CSV path (default: stdout)")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            text, _ = run_report(args.results_dir, args.out)
            if args.out is None:
                sys.stdout.write(text)
            return EXIT_OK
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "train":
            out = run_train(cfg)
            log.info("wrote %s", out)
        elif args.command == "attack":
            res = run_attack(cfg, args.checkpoint, args.sample, args.scenario)
            log.info("attack finished: converged=%s psnr=%s", res["converged"], res["metrics"]["psnr_db"])
        else:
            res = run_eval(cfg, args.checkpoint, args.key_source)
            sys.stdout.write(json.dumps(res, sort_keys=True) + "\n")
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (FedKLError, AssertionError, ValueError) as exc:
        log.error("invariant breach: %s", exc)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
