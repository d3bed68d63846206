"""Command line entry point: dataset generation, training, inference,
evaluation, and a self-test suite.

Configuration is a key=value text file; command line flags override file
values (last wins). Exit codes: 0 success, 1 self-test failure, 2 config
error, 3 I/O error, 4 non-finite training loss, 5 unmatched scene."""

from __future__ import annotations

import argparse
import os
import sys
import time
import warnings

import numpy as np


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    # dataset generation
    "n_scenes": 40, "n_points": 512, "noise_sigma": 0.0, "dropout_p": 0.0,
    "split_train": 0.7, "split_val": 0.15, "split_test": 0.15, "library_seed": 0,
    # network
    "d": 64, "fine_dim": 32, "n_superpoints": 32,
    # matching / hypotheses
    "kappa": 128, "s": 64, "eta": 20, "ransac_iters": 500, "inlier_radius": 0.01,
    # loss
    "lam_b": 0.3, "lam_c": 0.5, "tau_r": 0.1, "delta_e": 0.1, "delta_f": 1.4,
    "gamma": 24.0,
    # optimizer
    "learning_rate": 2e-3, "decay": 0.99, "batch_size": 4, "steps": 200,
    "checkpoint_every": 50,
    # toggles and paths
    "use_rgb": True, "use_icp": True, "paper_scale": False,
    "dataset_dir": "", "params_file": "", "split": "test", "scene": "",
    "seed": 0, "threads": 1,
}


def parse_config_file(path: str) -> dict:
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    return values


def _coerce(key: str, val):
    if key not in _DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    ref = _DEFAULTS[key]
    if isinstance(val, str):
        try:
            if isinstance(ref, bool):
                low = val.lower()
                if low not in ("true", "false", "1", "0"):
                    raise ValueError
                return low in ("true", "1")
            if isinstance(ref, int):
                return int(val)
            if isinstance(ref, float):
                return float(val)
            return val
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return val


def resolve_config(args) -> dict:
    cfg = dict(_DEFAULTS)
    if args.config:
        for k, v in parse_config_file(args.config).items():
            cfg[k] = _coerce(k, v)
    overrides = {"seed": args.seed, "threads": args.threads, "eta": args.eta,
                 "kappa": args.kappa, "s": args.s}
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _coerce(k, v)
    if args.no_rgb:
        cfg["use_rgb"] = False
    if args.no_icp:
        cfg["use_icp"] = False
    if args.paper_scale:
        cfg["paper_scale"] = True
    return cfg


def build_pipeline_config(cfg: dict):
    from .losses import LossWeights
    from .matchpose import HypothesisConfig
    from .networks import NetConfig
    from .pipeline import OptimizerConfig, PipelineConfig
    try:
        if cfg["paper_scale"]:
            net = NetConfig.paper_scale()
        else:
            net = NetConfig(d=cfg["d"], fine_dim=cfg["fine_dim"],
                            n_superpoints=cfg["n_superpoints"])
        return PipelineConfig(
            net=net,
            loss=LossWeights(lam_b=cfg["lam_b"], lam_c=cfg["lam_c"], tau_r=cfg["tau_r"],
                             delta_e=cfg["delta_e"], delta_f=cfg["delta_f"],
                             gamma=cfg["gamma"]),
            hyp=HypothesisConfig(kappa=cfg["kappa"], s=cfg["s"], eta=cfg["eta"],
                                 ransac_iters=cfg["ransac_iters"],
                                 inlier_radius=cfg["inlier_radius"]),
            opt=OptimizerConfig(learning_rate=cfg["learning_rate"], decay=cfg["decay"],
                                batch_size=cfg["batch_size"],
                                checkpoint_every=cfg["checkpoint_every"]),
            use_rgb=cfg["use_rgb"], use_icp=cfg["use_icp"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _require_out(out: str) -> str:
    if not out:
        raise ConfigError("--out is required for this command")
    if not os.path.isdir(out):
        raise OSError(f"output directory does not exist: {out}")
    return out


def _write_resolved(cfg: dict, out: str) -> None:
    with open(os.path.join(out, "resolved.cfg"), "w", encoding="utf-8") as f:
        for k in sorted(cfg):
            f.write(f"{k}={cfg[k]}\n")


def _load_split(cfg: dict, split: str):
    from .synthdata import load_dataset, load_scene
    root = cfg["dataset_dir"]
    if not root:
        raise ConfigError("dataset_dir must be set")
    if not os.path.isdir(root):
        raise OSError(f"dataset directory does not exist: {root}")
    index = load_dataset(root)
    entries = index.scenes(split)
    if not entries:
        raise ConfigError(f"dataset has no scenes in split {split!r}")
    return [load_scene(os.path.join(root, name)) for name, *_ in entries]


def _load_params(cfg: dict, net_cfg):
    from .networks import parameter_manifest
    from .tensor import ParameterStore
    path = cfg["params_file"]
    if not path:
        raise ConfigError("params_file must be set")
    if not os.path.isfile(path):
        raise OSError(f"parameter file does not exist: {path}")
    params = ParameterStore.load(path)
    try:
        params.validate(parameter_manifest(net_cfg))
    except ValueError as exc:
        raise ConfigError(f"parameter file does not match the config: {exc}") from exc
    return params


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: dict, out: str) -> int:
    from .synthdata import generate_dataset, shape_library
    _require_out(out)
    specs = shape_library(cfg["library_seed"])
    index = generate_dataset(specs, cfg["n_scenes"], out,
                             split_ratios=(cfg["split_train"], cfg["split_val"],
                                           cfg["split_test"]),
                             seed=cfg["seed"], n_points=cfg["n_points"],
                             noise_sigma=cfg["noise_sigma"],
                             dropout_p=cfg["dropout_p"])
    _write_resolved(cfg, out)
    counts = {s: len(index.scenes(s)) for s in ("train", "val", "test")}
    print(f"index {os.path.join(out, 'index.txt')}")
    print(f"scenes {len(index.entries)} train {counts['train']} "
          f"val {counts['val']} test {counts['test']}")
    return 0


def cmd_train(cfg: dict, out: str) -> int:
    from .pipeline import NaNLossError, train_toy
    _require_out(out)
    pcfg = build_pipeline_config(cfg)
    scenes = _load_split(cfg, "train")
    lines = []
    try:
        _, curve = train_toy(scenes, pcfg, steps=cfg["steps"], seed=cfg["seed"],
                             out_dir=out, log=lines.append)
    except NaNLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 4
    with open(os.path.join(out, "train_log.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    _write_resolved(cfg, out)
    print(f"checkpoint {os.path.join(out, 'params.ckpt')}")
    print(f"steps {len(curve)} first {curve[0][1]:.4f} last {curve[-1][1]:.4f}")
    return 0


def cmd_infer(cfg: dict, out: str) -> int:
    from .matchpose import pose_result_line
    from .pipeline import infer
    _require_out(out)
    pcfg = build_pipeline_config(cfg)
    params = _load_params(cfg, pcfg.net)
    scenes = _load_split(cfg, cfg["split"])
    if cfg["scene"]:
        scenes = [s for s in scenes if s.shape_id == cfg["scene"]]
        if not scenes:
            raise ConfigError(f"scene {cfg['scene']!r} not found in split {cfg['split']!r}")
    scene = scenes[0]
    ranked, res = infer(scene, params, pcfg, seed=cfg["seed"])
    _write_resolved(cfg, out)
    if not res.ok:
        print(f"unmatched scene {res.scene_id}", file=sys.stderr)
        return 5
    with open(os.path.join(out, "poses.txt"), "w", encoding="utf-8") as f:
        f.write(pose_result_line(res.scene_id, res.pose, res.combined, res.add) + "\n")
    print(f"scene {res.scene_id} add {res.add:.6f} combined {res.combined:.4f}")
    return 0


def cmd_eval(cfg: dict, out: str) -> int:
    from .matchpose import pose_result_line
    from .pipeline import evaluate
    _require_out(out)
    pcfg = build_pipeline_config(cfg)
    params = _load_params(cfg, pcfg.net)
    scenes = _load_split(cfg, cfg["split"])
    report = evaluate(scenes, params, pcfg, seed=cfg["seed"])
    _write_resolved(cfg, out)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(report.lines()) + "\n")
    with open(os.path.join(out, "poses.txt"), "w", encoding="utf-8") as f:
        for r in report.results:
            if r.ok:
                f.write(pose_result_line(r.scene_id, r.pose, r.combined, r.add) + "\n")
            else:
                f.write(f"{r.scene_id} failed\n")
    for line in report.lines():
        print(line)
    return 0


def cmd_selftest(cfg: dict) -> int:
    checks = [
        ("ppf_invariance", _check_ppf),
        ("gradients", _check_gradients),
        ("sinkhorn", _check_sinkhorn),
        ("kabsch_ransac", _check_solvers),
        ("oracle_end_to_end", _check_oracle),
    ]
    for name, fn in checks:
        t0 = time.time()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fn()
        except Exception as exc:
            print(f"FAIL {name}: {exc}")
            return 1
        print(f"ok {name} {time.time() - t0:.2f}s")
    return 0


def _check_ppf():
    from .geometry import SE3, ppf
    rng = np.random.default_rng(0)
    p1, p2 = rng.normal(size=3), rng.normal(size=3)
    n1 = rng.normal(size=3); n1 /= np.linalg.norm(n1)
    n2 = rng.normal(size=3); n2 /= np.linalg.norm(n2)
    base = ppf(p1, n1, p2, n2)
    for _ in range(100):
        t = SE3.random(rng)
        moved = ppf(t.apply(p1[None])[0], t.rotation @ n1,
                    t.apply(p2[None])[0], t.rotation @ n2)
        if np.abs(moved - base).max() >= 1e-9:
            raise AssertionError(f"PPF deviated by {np.abs(moved - base).max():.2e}")


def _check_gradients():
    from .losses import LossWeights, PairSets, circle_loss, feature_distances
    from .tensor import Tensor, grad_check, matmul, mean, relu
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(4, 5)))
    b = Tensor(rng.normal(size=(5, 3)))
    err = grad_check(lambda x, y: mean(relu(matmul(x, y))), [a, b])
    if err >= 1e-4:
        raise AssertionError(f"matmul/relu gradient error {err:.2e}")
    fa, fb = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(4, 6)))
    v = rng.uniform(0, 1, (3, 4))
    pairs = PairSets((v > 0.4).astype(float), (v < 0.2).astype(float), v)
    err = grad_check(lambda x, y: circle_loss(feature_distances(x, y), pairs,
                                              LossWeights()), [fa, fb])
    if err >= 1e-4:
        raise AssertionError(f"circle loss gradient error {err:.2e}")


def _check_sinkhorn():
    from .losses import sinkhorn
    from .tensor import Tensor
    rng = np.random.default_rng(2)
    plan, conv = sinkhorn(Tensor(rng.normal(size=(9, 7))))
    p = plan.data
    err = max(np.abs(p[:-1].sum(axis=1) - 1).max(), np.abs(p[:, :-1].sum(axis=0) - 1).max())
    if not conv or err >= 1e-6:
        raise AssertionError(f"sinkhorn marginal error {err:.2e}, converged={conv}")


def _check_solvers():
    from .geometry import SE3, rotation_geodesic
    from .matchpose import CorrespondenceSet, HypothesisConfig, kabsch, ransac_pose
    rng = np.random.default_rng(3)
    t = SE3.random(rng)
    src = rng.normal(size=(10, 3))
    est = kabsch(src, t.apply(src))
    if rotation_geodesic(est.rotation, t.rotation) >= 1e-9:
        raise AssertionError("kabsch failed on noise-free pairs")
    for trial in range(20):
        r = np.random.default_rng(trial)
        t = SE3.random(r)
        src = r.uniform(-0.1, 0.1, (64, 3))
        dst = t.apply(src)
        out = r.random(64) < 0.5
        dst[out] = r.uniform(-0.2, 0.2, (int(out.sum()), 3))
        corr = CorrespondenceSet(np.stack([np.arange(64)] * 2, axis=1),
                                 np.ones(64), src, dst)
        h = ransac_pose(corr, HypothesisConfig(), seed=trial)
        add = np.linalg.norm(h.pose.apply(src) - t.apply(src), axis=1).mean()
        if add >= 0.01 * 0.2 * np.sqrt(3):
            raise AssertionError(f"RANSAC trial {trial} ADD {add:.4f}")


def _check_oracle():
    from .networks import init_params
    from .pipeline import PipelineConfig, evaluate
    from .synthdata import generate_scene, shape_library
    cfg = PipelineConfig.desk_scale()
    specs = shape_library(0)
    scenes = [generate_scene(specs[i % 8], seed=900 + i) for i in range(5)]
    report = evaluate(scenes, init_params(cfg.net, 0), cfg, seed=0, oracle=True)
    if report.recall < 1.0:
        raise AssertionError(f"oracle recall {report.recall:.2f} < 1.0")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdmpose",
                                     description="fuse-describe-match pose estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "train", "infer", "eval", "selftest"):
        p = sub.add_parser(name)
        p.add_argument("--config", default="")
        p.add_argument("--out", default="")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--eta", type=int, default=None)
        p.add_argument("--kappa", type=int, default=None)
        p.add_argument("--s", type=int, default=None)
        p.add_argument("--no-rgb", action="store_true")
        p.add_argument("--no-icp", action="store_true")
        p.add_argument("--paper-scale", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "infer":
            return cmd_infer(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.out)
        return cmd_selftest(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
