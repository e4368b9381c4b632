"""``spcot`` command-line interface.

Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error,
3 numerical abort.
"""

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import fields, replace

import numpy as np

from . import data as D
from . import engine as E
from . import verify as V

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NAN = 0, 1, 2, 3

DATA_KEYS = {"n": int, "hw": int, "labeled_ratio": float}
DATA_DEFAULTS = {"n": 200, "hw": 32, "labeled_ratio": 0.05}

ABLATION_CELLS = (
    ("neither", False, False),
    ("consistency_only", False, True),
    ("spc_only", True, False),
    ("full", True, True),
)


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def _parse_bool(s):
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_value(typ, s):
    if typ is bool:
        return _parse_bool(s)
    if typ is int:
        return int(s)
    # float() ignores locale; reject comma decimals explicitly
    if "," in s:
        raise ValueError(f"use '.' as the decimal point: {s!r}")
    return float(s)


def _types():
    types = {}
    for f in fields(E.TrainConfig):
        t = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool}[f.type]
        types[f.name] = t
    types.update(DATA_KEYS)
    return types


def parse_config(text):
    """Parse ``key = value`` lines into (TrainConfig, data-generation dict)."""
    types = _types()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        try:
            values[key] = _parse_value(types[key], val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {e}") from None
    data_cfg = dict(DATA_DEFAULTS)
    for k in DATA_KEYS:
        if k in values:
            data_cfg[k] = values.pop(k)
    cfg = E.TrainConfig(**values)
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg, data_cfg


def load_config(path):
    if path is None:
        return E.TrainConfig(), dict(DATA_DEFAULTS)
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _stamp(args, out_dir):
    if getattr(args, "stamp", False):
        with open(os.path.join(out_dir, "stamp.txt"), "w") as f:
            f.write(time.strftime("%Y-%m-%dT%H:%M:%S") + "\n")


def _dataset(args, data_cfg):
    if args.data:
        return D.load_dataset(args.data)
    return D.generate(0, data_cfg["n"], data_cfg["hw"], data_cfg["labeled_ratio"])


def cmd_gen_data(args):
    try:
        ds = D.generate(args.seed, args.n, args.hw, args.labeled_ratio)
    except ValueError as e:
        raise UsageError(str(e)) from None
    D.save_dataset(ds, args.out)
    print(f"|S|={len(ds.labeled)} |U|={len(ds.unlabeled)} |T|={len(ds.test)}")
    return EXIT_OK


def _fmt(v):
    return repr(float(v))


def cmd_train(args):
    cfg, data_cfg = load_config(args.config)
    ds = _dataset(args, data_cfg)
    os.makedirs(args.out, exist_ok=True)
    _, records = E.train(cfg, ds, checkpoint_dir=os.path.join(args.out, "checkpoint"))
    E.write_record(records, os.path.join(args.out, "record.csv"))
    _stamp(args, args.out)
    if records:
        print(f"final_dsc={_fmt(records[-1]['dsc'])} final_hd={_fmt(records[-1]['hd'])}")
    else:
        print("final_dsc=nan final_hd=nan")
    return EXIT_OK


def parse_seeds(s):
    try:
        seeds = [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {s!r}") from None
    if not seeds:
        raise UsageError("--seeds needs at least one seed")
    return seeds


def ordering_checks(means, min_gap=0.5, min_full_gain=2.0):
    """Named pass/fail checks on per-cell mean DSC (in [0,1]); gaps in DSC points."""
    pts = {k: 100.0 * v for k, v in means.items()}
    return [
        ("full >= consistency_only", pts["full"] - pts["consistency_only"] >= min_gap),
        ("consistency_only >= neither", pts["consistency_only"] - pts["neither"] >= min_gap),
        ("spc_only >= neither", pts["spc_only"] - pts["neither"] >= min_gap),
        ("full - neither >= 2 points", pts["full"] - pts["neither"] >= min_full_gain),
    ]


def run_ablation(cfg, ds, seeds, out_dir=None, log_fn=print):
    """All four cells x seeds. Returns (rows, failures); failed runs are skipped."""
    rows, failures = [], []
    for name, spc, cons in ABLATION_CELLS:
        dscs, hds, ents = [], [], []
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, enable_spc=spc, enable_consistency=cons)
            try:
                _, records = E.train(run_cfg, ds)
            except Exception as e:  # keep going; report at the end
                failures.append((name, seed, repr(e)))
                log_fn(f"cell {name} seed {seed} failed: {e!r}")
                continue
            if out_dir is not None:
                E.write_record(records, os.path.join(out_dir, f"record_{name}_seed{seed}.csv"))
            dscs.append(records[-1]["dsc"])
            hds.append(records[-1]["hd"])
            ents.append(records[-1]["entropy"])
            log_fn(f"cell {name} seed {seed}: dsc={records[-1]['dsc']:.4f}")
        rows.append({
            "cell": name,
            "spc": spc,
            "consistency": cons,
            "n_runs": len(dscs),
            "dsc_mean": float(np.mean(dscs)) if dscs else float("nan"),
            "dsc_std": float(np.std(dscs)) if dscs else float("nan"),
            "hd_mean": float(np.nanmean(hds)) if dscs else float("nan"),
            "entropy_mean": float(np.mean(ents)) if dscs else float("nan"),
            "seeds": ";".join(str(s) for s in seeds),
        })
    return rows, failures


ABLATION_COLUMNS = ("cell", "spc", "consistency", "n_runs", "dsc_mean", "dsc_std", "hd_mean", "entropy_mean", "seeds")


def write_ablation(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\r\n")
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) if isinstance(r[c], float) else str(r[c]).lower() if isinstance(r[c], bool) else r[c]
                        for c in ABLATION_COLUMNS])


def cmd_ablate(args):
    seeds = parse_seeds(args.seeds)
    cfg, data_cfg = load_config(args.config)
    ds = _dataset(args, data_cfg)
    os.makedirs(args.out, exist_ok=True)
    rows, failures = run_ablation(cfg, ds, seeds, args.out)
    write_ablation(rows, os.path.join(args.out, "ablation.csv"))
    _stamp(args, args.out)
    means = {r["cell"]: r["dsc_mean"] for r in rows}
    for name, ok in ordering_checks(means):
        print(f"ordering {name}: {'pass' if ok else 'fail'}")
    for name, seed, err in failures:
        print(f"failed: cell={name} seed={seed} error={err}", file=sys.stderr)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_evaluate(args):
    ds = D.load_dataset(args.data)
    ens = E.load_checkpoint(os.path.join(args.checkpoint, "checkpoint.spct"), ds.n_classes)
    d, h = E.evaluate(ens, ds, use_teachers=not args.students)
    print(f"dsc={_fmt(d)} hd={_fmt(h)}")
    return EXIT_OK


def cmd_verify(args):
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    results = V.run_all(args.seed, args.cases, flip_sign=args.debug_flip_gradient)
    os.makedirs(args.out, exist_ok=True)
    V.write_report(results, os.path.join(args.out, "verify.csv"))
    for r in results:
        print(f"{r.name}: {'pass' if r.passed else 'FAIL'} max_error={r.max_error:.3e} tol={r.tolerance:.0e}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="spcot", description="Self-paced co-training for segmentation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=DATA_DEFAULTS["n"])
    g.add_argument("--hw", type=int, default=DATA_DEFAULTS["hw"])
    g.add_argument("--labeled-ratio", type=float, default=DATA_DEFAULTS["labeled_ratio"])
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one ensemble")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset dir (generated from config keys with seed 0 if omitted)")
    t.add_argument("--out", required=True)
    t.add_argument("--stamp", action="store_true", help="write a wall-clock stamp.txt")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="run the spc x consistency grid")
    a.add_argument("--config")
    a.add_argument("--data")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--stamp", action="store_true")
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True, help="directory holding checkpoint.spct")
    e.add_argument("--data", required=True)
    e.add_argument("--students", action="store_true", help="vote with students instead of teachers")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="run the numerical certification checks")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--cases", type=int, default=1000)
    v.add_argument("--out", default=".")
    v.add_argument("--debug-flip-gradient", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except E.TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_NAN
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
