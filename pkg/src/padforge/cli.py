"""Command-line entry point: gen-data, train, attack, eval, verify.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure,
4 incompatible artifacts.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import data as data_mod
from .attacks import FAMILIES, AttackConfig, ModelCriterion, attack_records, write_jsonl
from .attacks.search import ORTHOGONAL_FAMILIES
from .evaluation import ResultsMatrix, calibrate_tau, clean_metrics, robust_accuracy
from .models import ContractError, Detector, load_checkpoint, save_checkpoint
from .numerics import DEFAULT_EIGEN_CAP, NumericError, make_rng
from .theory import (convergence_trace, criterion_gradients, estimate_constants, hessian_spectrum,
                     quadratic_bound_check, report_json, sample_pairs, segment_pairs)
from .training import TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs",
    "data": {"path": None, "synthetic": "drebin-mini", "n_per_class": 2000,
             "p_signal": 0.8, "p_cross": 0.05, "p_noise": 0.1, "space": None},
    "split": {"ratios": [0.6, 0.2, 0.2], "seed": 0},
    "model": {"mlp_widths": [200, 200], "icnn_widths": [200, 200]},
    "train": {"defense": "pad_sma", "epochs": 50, "batch": 128, "lr": 0.001, "optimizer": "adam",
              "beta1": 0.1, "beta2": 1.0, "beta": None, "lam": 1.0, "steps": 50,
              "alphas": {"1": 1.0, "2": 0.5, "inf": 0.02}, "epsilon": 0.02,
              "noise": True, "cotrain_icnn": False, "checkpoint_every": 0},
    "attacks": [{"family": f, "mode": m} for m in ("oblivious", "adaptive")
                for f in ("grosse", "bca", "bga", "rfgsm", "maxma", "imaxma", "sma")]
               + [{"family": "pgd", "p": p, "mode": m} for m in ("oblivious", "adaptive")
                  for p in ("1", "2", "inf")],
    "eval": {"k": 5.0},
}


class ConfigError(ValueError):
    pass


class ArtifactError(RuntimeError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out and k != "attacks":
            raise ConfigError(f"unknown config key {k!r}")
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            for kk in v:
                if kk not in out[k] and k not in ("train",):
                    raise ConfigError(f"unknown config key {k}.{kk}")
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    try:
        with open(path, encoding="utf-8") as fh:
            user = yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    if not isinstance(user, dict):
        raise ConfigError("config root must be a mapping")
    return _merge(DEFAULT_CONFIG, user)


def resolve_threads(flag) -> int:
    env = os.environ.get("PAD_FORGE_THREADS")
    val = env if env is not None else flag
    if val is None:
        return os.cpu_count() or 1
    try:
        n = int(val)
    except ValueError:
        raise ConfigError(f"thread count must be an integer, got {val!r}") from None
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


# ---------------------------------------------------------------- data plumbing

def _dataset_and_space(cfg: dict, data_path=None, space_path=None):
    dc = cfg["data"]
    path = data_path or dc.get("path")
    if path:
        if not Path(path).exists():
            raise ConfigError(f"dataset {path} does not exist")
        ds = data_mod.load_dataset(path)
    else:
        if dc.get("synthetic") != "drebin-mini":
            raise ConfigError(f"unknown synthetic benchmark {dc.get('synthetic')!r}")
        ds = data_mod.generate_synthetic(_mini_spec(cfg, cfg["seed"]))
    sp_path = space_path or dc.get("space")
    if sp_path:
        if not Path(sp_path).exists():
            raise ConfigError(f"manipulation space {sp_path} does not exist")
        space = data_mod.load_manipulation_space(sp_path, ds.d)
    elif ds.d == data_mod.MINI_D:
        space = data_mod.drebin_mini_space()
    else:
        raise ConfigError("a manipulation space file is required for this dataset (--space)")
    return ds, space


def _mini_spec(cfg: dict, seed: int):
    dc = cfg["data"]
    try:
        return data_mod.drebin_mini_spec(seed, int(dc["n_per_class"]), float(dc["p_signal"]),
                                         float(dc["p_cross"]), float(dc["p_noise"]))
    except ValueError as e:
        raise ConfigError(str(e)) from None


def _splits(cfg: dict, ds):
    sc = cfg["split"]
    try:
        spec = data_mod.SplitSpec(tuple(sc["ratios"]), int(sc["seed"]))
    except (ValueError, TypeError) as e:
        raise ConfigError(f"split: {e}") from None
    return data_mod.split(ds, spec)


def _train_config(cfg: dict, defense=None, epochs=None, seed=None) -> TrainConfig:
    tc = dict(cfg["train"])
    tc.pop("checkpoint_every", None)
    if defense is not None:
        tc["defense"] = defense
    if epochs is not None:
        tc["epochs"] = epochs
    try:
        return TrainConfig(**tc, mlp_widths=tuple(cfg["model"]["mlp_widths"]),
                           icnn_widths=tuple(cfg["model"]["icnn_widths"]),
                           seed=cfg["seed"] if seed is None else seed)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"train: {e}") from None


def _attack_config(entry: dict, seed: int) -> AttackConfig:
    e = dict(entry)
    try:
        return AttackConfig(**{"seed": seed, **e})
    except (ValueError, TypeError) as err:
        raise ConfigError(f"attack {entry}: {err}") from None


def _load_detector(path, d: int):
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        mlp, icnn, meta = load_checkpoint(path)
    except (ContractError, KeyError, ValueError) as e:
        raise ArtifactError(f"checkpoint {path}: {e}") from None
    if mlp.d != d:
        raise ArtifactError(f"checkpoint {path} expects d={mlp.d} but the dataset has d={d}")
    tau = meta.get("tau")
    return Detector(mlp, icnn, float("inf") if tau is None else float(tau)), meta


def _print_metrics(title: str, m) -> None:
    print(f"{title}: FNR {m.FNR:.2f}  FPR {m.FPR:.2f}  Acc {m.Acc:.2f}  bAcc {m.bAcc:.2f}  "
          f"F1 {m.F1:.2f}  (abstained {m.abstained})")


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, cfg) -> int:
    seed = cfg["seed"] if args.seed is None else args.seed
    for name in ("p_signal", "p_cross", "p_noise", "n_per_class"):
        v = getattr(args, name)
        if v is not None:
            cfg["data"][name] = v
    spec = _mini_spec(cfg, seed)
    ds = data_mod.generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(ds, out)
    if args.space_out:
        data_mod.save_manipulation_space(data_mod.drebin_mini_space(), args.space_out)
    print(f"wrote {len(ds)} examples (d={ds.d}) to {out}")
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    if args.epochs is not None and args.epochs < 0:
        raise ConfigError("--epochs must be >= 0")
    ds, space = _dataset_and_space(cfg, args.data, args.space)
    tr, va, te = _splits(cfg, ds)
    if args.optimizer:
        cfg["train"]["optimizer"] = args.optimizer
    if args.track_grad_norm:
        cfg["train"]["track_grad_norm"] = True
    tcfg = _train_config(cfg, args.defense and args.defense.replace("-", "_"), args.epochs,
                         args.seed)
    out = Path(args.out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    ck_every = int(cfg["train"].get("checkpoint_every") or 0)
    st = train(tr.X, tr.y, tcfg, space, log_path=out / "train_log.csv",
               checkpoint_dir=out if ck_every else None, checkpoint_every=ck_every)
    det = Detector(st.mlp, st.icnn)
    tau = None
    if st.icnn is not None:
        tau = calibrate_tau(det.psi(va.X), float(cfg["eval"]["k"]))
        det.tau = tau
    save_checkpoint(out / "model.ckpt", st.mlp, st.icnn, tau,
                    extra={"defense": tcfg.defense, "epochs": st.epoch, "seed": tcfg.seed,
                           "k": float(cfg["eval"]["k"]), "skipped_batches": st.skipped})
    train_acc = 100.0 * float(np.mean(det.f(tr.X) == tr.y))
    print(f"defense {tcfg.defense}: {st.epoch} epochs, train accuracy {train_acc:.2f}")
    _print_metrics("test", clean_metrics(det, te.X, te.y))
    print(f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def _attack_entry_from_args(args) -> dict:
    e = {"family": args.attack, "mode": args.mode}
    if args.p is not None:
        e["p"] = args.p
    for k in ("steps", "n_ben", "lam", "repeats", "epsilon"):
        v = getattr(args, k)
        if v is not None:
            e[k] = v
    if args.addition_only:
        e["addition_only"] = True
    return e


def cmd_attack(args, cfg) -> int:
    if args.attack not in FAMILIES:
        raise ConfigError(f"unknown attack family {args.attack!r}; choose from {', '.join(FAMILIES)}")
    ds, space = _dataset_and_space(cfg, args.data, args.space)
    tr, _, te = _splits(cfg, ds)
    det, _ = _load_detector(args.checkpoint, ds.d)
    acfg = _attack_config(_attack_entry_from_args(args), cfg["seed"] if args.seed is None else args.seed)
    if acfg.family in ORTHOGONAL_FAMILIES and not (det.has_guard and acfg.mode == "adaptive"):
        raise ConfigError("orthogonal attacks need --mode adaptive and a checkpoint with an adversary detector")
    mal = np.flatnonzero(te.y == 1)
    if args.limit:
        mal = mal[:args.limit]
    X = te.X[mal]
    pool = tr.X[tr.y == 0]
    acc, res = robust_accuracy(det, acfg, X, space, pool, example_ids=mal, return_result=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    recs = attack_records(res, X, acfg, mal)
    recs.append({"summary": True, "family": acfg.label, "mode": acfg.mode,
                 "n": int(len(mal)), "robust_accuracy": acc})
    write_jsonl(recs, out)
    print(f"{acfg.label} ({acfg.mode}): robust accuracy {acc:.2f}% over {len(mal)} malware examples")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    ds, space = _dataset_and_space(cfg, args.data, args.space)
    tr, va, te = _splits(cfg, ds)
    k = float(cfg["eval"]["k"] if args.k is None else args.k)
    if not (0 <= k < 100):
        raise ConfigError("k must lie in [0, 100)")
    dets = {}
    for item in args.checkpoint:
        name, _, path = item.rpartition("=")
        det, meta = _load_detector(path, ds.d)
        name = name or meta.get("extra", {}).get("defense", Path(path).stem)
        if det.has_guard:
            det.tau = calibrate_tau(det.psi(va.X), k)
        dets[name] = det
    out = Path(args.out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    clean = {}
    for name, det in dets.items():
        m = clean_metrics(det, te.X, te.y)
        clean[name] = {**m.as_dict(), "tau": det.tau if det.has_guard else None}
        _print_metrics(f"{name} clean", m)
    with open(out / "clean_metrics.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(clean, indent=1, sort_keys=True, default=str))
    attacks = [_attack_config(e, cfg["seed"]) for e in cfg["attacks"]]
    mal = np.flatnonzero(te.y == 1)
    if args.limit:
        mal = mal[:args.limit]
    pool = tr.X[tr.y == 0]
    mat = ResultsMatrix([], [])
    for name, det in dets.items():
        for a in attacks:
            if a.family in ORTHOGONAL_FAMILIES and not det.has_guard:
                continue
            mat.set(f"{a.label}/{a.mode}", name,
                    robust_accuracy(det, a, te.X[mal], space, pool, example_ids=mal))
    with open(out / "robust_accuracy.json", "w", encoding="utf-8") as fh:
        fh.write(mat.to_json())
    mat.write_csv(out / "robust_accuracy.csv")
    print(mat.format_table())
    return EXIT_OK


def cmd_verify(args, cfg) -> int:
    ds, space = _dataset_and_space(cfg, args.data, args.space)
    if ds.d > DEFAULT_EIGEN_CAP:
        raise ConfigError(f"d={ds.d} exceeds the eigen cap {DEFAULT_EIGEN_CAP}; reduce the feature count")
    tr, _, te = _splits(cfg, ds)
    det, meta = _load_detector(args.checkpoint, ds.d)
    out = Path(args.out_dir or cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    checks = ["hessian", "constants", "sandwich", "convergence"] if args.check == "all" else [args.check]
    crit = ModelCriterion(det.mlp, det.icnn, args.lam)
    rng = make_rng(cfg["seed"], 30)
    X = te.X[te.y == 1][:args.points]
    est = None
    for check in checks:
        if check == "hessian":
            reps = [hessian_spectrum(crit, x, args.lam) for x in X]
            with open(out / "hessian.json", "w", encoding="utf-8") as fh:
                fh.write(report_json({"lambda": args.lam, "points": [report_json(r) for r in reps]}))
            n_conc = sum(r.verdict == "concave" for r in reps)
            print(f"hessian: lambda={args.lam}, {n_conc}/{len(reps)} points concave, "
                  f"min eig {min(r.min_eigenvalue for r in reps):.4g}, "
                  f"max eig {max(r.max_eigenvalue for r in reps):.4g}")
        if check in ("constants", "sandwich") and est is None:
            A, B = sample_pairs(rng, ds.d, args.pairs)
            gf, gg = criterion_gradients(crit)
            est = estimate_constants(gf, gg, *segment_pairs(A, B))
            with open(out / "constants.json", "w", encoding="utf-8") as fh:
                fh.write(report_json(est))
            print(f"constants: L_f={est.L_f:.4g} L_g={est.L_g:.4g} M_g={est.M_g:.4g} "
                  f"({est.n_pairs} pairs)")
        if check == "sandwich":
            rep = quadratic_bound_check(crit, A, B, args.lam, est)
            with open(out / "sandwich.json", "w", encoding="utf-8") as fh:
                fh.write(report_json(rep))
            status = "applicable" if rep.applicable else "premise fails (lambda*M_g <= L_f)"
            print(f"sandwich: {status}; violations {rep.violations} of {rep.n_pairs}")
        if check == "convergence":
            if args.log is None:
                raise ConfigError("--log with a training log carrying grad_norm is required")
            norms = _read_grad_norms(args.log)
            rep = convergence_trace(norms)
            with open(out / "convergence.json", "w", encoding="utf-8") as fh:
                fh.write(report_json(rep))
            print(f"convergence: c1={rep.c1:.4g} floor c2={rep.c2:.4g} "
                  f"eventually non-increasing: {rep.eventually_nonincreasing}")
    return EXIT_OK


def _read_grad_norms(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    vals = [float(r["grad_norm"]) for r in rows]
    if not vals or not np.all(np.isfinite(vals)):
        raise ConfigError(f"{path} has no finite grad_norm column (train with grad-norm tracking)")
    return vals


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="padforge", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML experiment config (defaults are built in)")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS threads (PAD_FORGE_THREADS overrides; default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--data", help="dataset file (default: generated drebin-mini)")
        sp.add_argument("--space", help="manipulation-space file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out-dir", default=None)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--space-out", default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--n-per-class", type=int, default=None)
    g.add_argument("--p-signal", type=float, default=None)
    g.add_argument("--p-cross", type=float, default=None)
    g.add_argument("--p-noise", type=float, default=None)

    t = sub.add_parser("train", help="train a defense")
    common(t)
    t.add_argument("--defense", default=None, help="dnn, at-rfgsm, at-maxma or pad-sma")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    t.add_argument("--track-grad-norm", action="store_true",
                   help="log the full-batch gradient norm every epoch")

    a = sub.add_parser("attack", help="attack test-split malware")
    common(a)
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--attack", required=True)
    a.add_argument("--p", default=None)
    a.add_argument("--mode", default="oblivious", choices=("oblivious", "adaptive"))
    a.add_argument("--steps", type=int, default=None)
    a.add_argument("--n-ben", type=int, default=None)
    a.add_argument("--lam", type=float, default=None, help="fixed penalty (default: search)")
    a.add_argument("--repeats", type=int, default=None)
    a.add_argument("--epsilon", type=float, default=None)
    a.add_argument("--addition-only", action="store_true")
    a.add_argument("--limit", type=int, default=0, help="attack at most this many examples")
    a.add_argument("--out", default="attack.jsonl")

    e = sub.add_parser("eval", help="clean metrics and the robustness matrix")
    common(e)
    e.add_argument("--checkpoint", action="append", required=True, help="[name=]path, repeatable")
    e.add_argument("--k", type=float, default=None)
    e.add_argument("--limit", type=int, default=0)

    v = sub.add_parser("verify", help="curvature and bound checks")
    common(v)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--check", default="all",
                   choices=("all", "hessian", "constants", "sandwich", "convergence"))
    v.add_argument("--lambda", dest="lam", type=float, default=1.0)
    v.add_argument("--points", type=int, default=5)
    v.add_argument("--pairs", type=int, default=1000)
    v.add_argument("--log", default=None)
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack,
            "eval": cmd_eval, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg["seed"] = args.seed
        threads = resolve_threads(args.threads)
        with threadpool_limits(limits=threads):
            return COMMANDS[args.command](args, cfg)
    except (ConfigError, data_mod.DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArtifactError, ContractError) as e:
        print(f"incompatible artifact: {e}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
