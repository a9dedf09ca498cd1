"""Command-line entry point: dataset generation, two-phase training,
evaluation, and visualization.

Exit codes: 0 ok, 2 configuration error, 3 missing/unreadable files,
4 numeric abort (training diverged; the last good checkpoint survives).
Seeds resolve flag > config file > CYCLEFLOW_SEED > default; every run
directory receives a manifest sufficient to reproduce it.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import time

import numpy as np

from . import __version__
from . import autodiff as ad
from . import evalkit as ek
from . import quartetgen as qg
from . import trainer as tr
from .autodiff import Tensor
from .corrnet import NetConfig, ParamSet, forward_pair
from .warpcomp import FlowField, GroundTruthEdge


class ConfigError(ValueError):
    pass


def _load_json(path, what: str) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{what} is not valid JSON: {e}") from e


def _resolve_seed(args, cfg_seed):
    if getattr(args, "seed", None) is not None:
        return args.seed
    if cfg_seed is not None:
        return cfg_seed
    env = os.environ.get("CYCLEFLOW_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"CYCLEFLOW_SEED must be an integer, got {env!r}") from e
    return 0


def _write_manifest(out_dir, command, args, config_blob, seed, started):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": [a for a in sys.argv[1:]],
        "config": config_blob,
        "config_hash": hashlib.sha256(
            json.dumps(config_blob, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "out_dir": os.path.abspath(out_dir),
        "started_at": started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "version": __version__,
    }
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    raw = {}
    if args.config:
        raw = _load_json(args.config, "generator config")
    try:
        seed = _resolve_seed(args, raw.get("seed"))
        raw["seed"] = seed
        if args.num_quartets is not None:
            raw["num_quartets"] = args.num_quartets
        try:
            cfg = qg.GenConfig.from_dict(raw)
        except TypeError as e:
            raise ConfigError(f"unknown generator config key: {e}") from e
        except ValueError as e:
            raise ConfigError(str(e)) from e
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    try:
        manifest = qg.generate_dataset(cfg, args.out, jobs=args.jobs)
    except (ConfigError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    cats = {}
    for q in manifest["quartets"]:
        cats[q["category"]] = cats.get(q["category"], 0) + 1
    print(f"wrote {len(manifest['quartets'])} quartets to {args.out}")
    for cat in sorted(cats):
        print(f"  {cat}: {cats[cat]}")
    print(f"val images: {len(manifest['val_images'])}, "
          f"shape-db views: {len(manifest['shape_db'])}")
    _write_manifest(args.out, "gen-data", args, cfg.to_dict(), seed, started)
    return 0


# ---------------------------------------------------------------------------
# train


def _train_configs(args):
    raw = {}
    if args.config:
        raw = _load_json(args.config, "train config")
    net_raw = raw.get("net", {})
    try:
        net_cfg = NetConfig(**net_raw) if net_raw else NetConfig()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"net config: {e}") from e
    seed = _resolve_seed(args, raw.get("seed"))

    def phase_cfg(phase):
        kwargs = dict(raw.get(phase, {}))
        kwargs["seed"] = seed
        for flag, key in (("lr", "lr"), ("batch_init", "batch_init"),
                          ("batch_ft", "batch_ft"), ("step_size", "step_size"),
                          ("match_weight", "match_weight"),
                          ("truncation", "truncation"),
                          ("checkpoint_every", "checkpoint_every")):
            v = getattr(args, flag, None)
            if v is not None:
                kwargs[key] = v
        if phase == "init" and args.init_iters is not None:
            kwargs["max_iters"] = args.init_iters
        if phase == "finetune" and args.iters is not None:
            kwargs["max_iters"] = args.iters
        try:
            return tr.TrainConfig.for_phase(phase, **kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{phase} config: {e}") from e

    return net_cfg, phase_cfg("init"), phase_cfg("finetune"), seed, raw


def _make_eval_hook(dataset, net_cfg, out_dir, snap_path):
    records = dataset.val_records()
    pairs = ek.build_eval_pairs(records)
    if not pairs:
        return None

    def hook(step, ps):
        res = ek.pck(pairs, ps, net_cfg, alpha=0.1)
        with open(snap_path, "a") as fh:
            fh.write(json.dumps({"step": step, "pck": res.overall,
                                 "per_category": res.per_category},
                                sort_keys=True) + "\n")

    return hook


def cmd_train(args) -> int:
    try:
        net_cfg, init_cfg, ft_cfg, seed, raw = _train_configs(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    if not os.path.exists(os.path.join(args.data, "manifest.json")):
        print(f"i/o error: dataset not found at {args.data}", file=sys.stderr)
        return 3
    dataset = qg.QuartetDataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    if args.resume:
        if not os.path.exists(args.resume):
            print(f"i/o error: resume checkpoint missing: {args.resume}",
                  file=sys.stderr)
            return 3
        ps, rng = tr.load_training_state(args.resume)
        expected = {name: None for name in
                    ParamSet.initialize(net_cfg, seed=0).params}
        if set(ps.params) != set(expected):
            print("config error: resume checkpoint is incompatible with the "
                  "net config", file=sys.stderr)
            return 2
    else:
        ps = ParamSet.initialize(net_cfg, seed=seed)
        rng = None

    with open(os.path.join(args.out, "net_config.json"), "w") as fh:
        fh.write(net_cfg.to_json())

    oracle = tr.OracleFlowSource(
        mode=args.oracle, sigma=args.oracle_sigma, seed=seed,
        flow_dir=args.oracle_flows)
    snap = os.path.join(args.out, "eval_snapshots.jsonl")
    hook = _make_eval_hook(dataset, net_cfg, args.out, snap)

    try:
        if args.phase in ("init", "both"):
            print(f"[init] {tr.config_echo(init_cfg)}")
            ps = tr.init_phase(ps, net_cfg, dataset, oracle, init_cfg,
                               out_dir=args.out,
                               log_path=os.path.join(args.out, "init_log.jsonl"),
                               rng=rng)
            ps.save(os.path.join(args.out, "final_init.cycf"))
            ps.t = 0  # fine-tune restarts its own schedule
            rng = None
        if args.phase in ("finetune", "both"):
            print(f"[finetune] {tr.config_echo(ft_cfg)}")
            ps = tr.finetune_phase(ps, net_cfg, dataset, ft_cfg,
                                   out_dir=args.out,
                                   log_path=os.path.join(args.out,
                                                         "finetune_log.jsonl"),
                                   eval_hook=hook, rng=rng)
            ps.save(os.path.join(args.out, "final_finetune.cycf"))
    except tr.DivergenceError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 4
    except tr.TrainingAborted as e:
        print(f"numeric abort at step {e.last_step}: {e}; last good checkpoint: "
              f"{e.last_checkpoint}", file=sys.stderr)
        return 4
    _write_manifest(args.out, "train", args,
                    {"net": json.loads(net_cfg.to_json()),
                     "init": tr.config_echo(init_cfg),
                     "finetune": tr.config_echo(ft_cfg), "raw": raw},
                    seed, started)
    print(f"done; checkpoints in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _load_net(checkpoint):
    ckpt_dir = os.path.dirname(os.path.abspath(checkpoint))
    cfg_path = os.path.join(ckpt_dir, "net_config.json")
    if os.path.exists(cfg_path):
        with open(cfg_path) as fh:
            net_cfg = NetConfig.from_json(fh.read())
    else:
        net_cfg = NetConfig()
    return ParamSet.load(checkpoint), net_cfg


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - {"pck", "match", "seg"}
    if unknown:
        print(f"config error: unknown metrics {sorted(unknown)}", file=sys.stderr)
        return 2
    for path, what in ((args.checkpoint, "checkpoint"),
                       (os.path.join(args.data, "manifest.json"), "dataset")):
        if not os.path.exists(path):
            print(f"i/o error: {what} missing: {path}", file=sys.stderr)
            return 3
    ps, net_cfg = _load_net(args.checkpoint)
    dataset = qg.QuartetDataset(args.data)
    records = dataset.val_records()
    pairs = ek.build_eval_pairs(records)
    report = {"checkpoint": os.path.abspath(args.checkpoint),
              "n_eval_pairs": len(pairs)}
    if "pck" in metrics:
        res = ek.pck(pairs, ps, net_cfg, alpha=args.alpha)
        report["pck"] = json.loads(res.to_json())
    if "match" in metrics:
        if any(r[3] is None for r in records):
            print("i/o error: dataset lacks part label maps required for the "
                  "match metric", file=sys.stderr)
            return 3
        res = ek.matchability_accuracy(pairs, ps, net_cfg,
                                       threshold=args.match_threshold)
        report["matchability"] = json.loads(res.to_json())
    if "seg" in metrics:
        db = dataset.shape_db_records()
        if not db:
            print("i/o error: dataset lacks a shape database", file=sys.stderr)
            return 3
        ious = {}
        for cat, img, kps, labels, meta in records:
            cat_db = [r for r in db if r[0] == cat]
            mask, best, _ = ek.segmentation_transfer(img, cat_db, ps, net_cfg)
            iou = ek.mask_iou(mask, (labels > 0).astype(float))
            ious.setdefault(cat, []).append(iou)
        report["segmentation"] = {
            "per_category": {c: float(np.mean(v)) for c, v in sorted(ious.items())},
            "mean": float(np.mean([x for v in ious.values() for x in v]))}
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    if args.csv and "pck" in report:
        with open(args.csv, "w") as fh:
            fh.write("category,pck\n")
            for c, v in report["pck"]["per_category"].items():
                fh.write(f"{c},{v}\n")
            fh.write(f"mean,{report['pck']['mean']}\n")
    print(text)
    return 0


# ---------------------------------------------------------------------------
# viz


def cmd_viz(args) -> int:
    if not os.path.exists(args.checkpoint):
        print(f"i/o error: checkpoint missing: {args.checkpoint}", file=sys.stderr)
        return 3
    ps, net_cfg = _load_net(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    if args.pair:
        pa, pb = args.pair
        for p in (pa, pb):
            if not os.path.exists(p):
                print(f"i/o error: image missing: {p}", file=sys.stderr)
                return 3
        img_a = qg.load_image_png(pa)
        img_b = qg.load_image_png(pb)
        with ad.no_grad():
            flow, match = forward_pair(ps, net_cfg, img_a, img_b)
        ek.visualize_flow(flow, os.path.join(args.out, "flow.png"))
        qg.save_image_png(os.path.join(args.out, "match.png"),
                          np.repeat(match.values[..., None], 3, axis=2))
        from .warpcomp import warp_image
        with ad.no_grad():
            warped = warp_image(Tensor(img_b), flow).data
        qg.save_image_png(os.path.join(args.out, "warped_target.png"), warped)
        print(f"wrote flow.png, match.png, warped_target.png to {args.out}")
        return 0
    # quartet mode
    data_dir, idx = args.quartet
    idx = int(idx)
    if not os.path.exists(os.path.join(data_dir, "manifest.json")):
        print(f"i/o error: dataset missing: {data_dir}", file=sys.stderr)
        return 3
    dataset = qg.QuartetDataset(data_dir)
    if idx >= dataset.num_quartets:
        print(f"i/o error: quartet {idx} out of range", file=sys.stderr)
        return 3
    s1, r1, r2, s2 = dataset.load_quartet_images(idx)
    gt = dataset.load_gt_edge(idx)
    with ad.no_grad():
        f1, _ = forward_pair(ps, net_cfg, s1, r1)
        f2, m2 = forward_pair(ps, net_cfg, r1, r2)
        f3, _ = forward_pair(ps, net_cfg, r2, s2)
    for tag, img in (("s1", s1), ("r1", r1), ("r2", r2), ("s2", s2)):
        qg.save_image_png(os.path.join(args.out, f"panel_{tag}.png"), img)
    ek.cycle_trajectory_overlay((s1, r1, r2, s2), (f1, f2, f3), gt,
                                os.path.join(args.out, "trajectories.png"),
                                seed=args.seed or 0)
    ek.visualize_flow(f2, os.path.join(args.out, "flow_r1r2.png"))
    print(f"wrote 4 panels, trajectories.png, flow_r1r2.png to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cycleflow",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a quartet dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="generator config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-quartets", type=int, dest="num_quartets")
    g.add_argument("--jobs", type=int, default=os.cpu_count())
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run init/finetune training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--phase", choices=("init", "finetune", "both"), default="both")
    t.add_argument("--config", help="train config JSON with net/init/finetune")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--iters", type=int, help="fine-tune iterations")
    t.add_argument("--init-iters", type=int, dest="init_iters")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-init", type=int, dest="batch_init")
    t.add_argument("--batch-ft", type=int, dest="batch_ft")
    t.add_argument("--step-size", type=int, dest="step_size")
    t.add_argument("--match-weight", type=float, dest="match_weight")
    t.add_argument("--truncation", type=float)
    t.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    t.add_argument("--oracle", choices=("gt-noisy", "external-file"),
                   default="gt-noisy")
    t.add_argument("--oracle-sigma", type=float, default=3.0, dest="oracle_sigma")
    t.add_argument("--oracle-flows", dest="oracle_flows",
                   help="directory of .flo files for the external-file oracle")
    t.add_argument("--jobs", type=int, default=os.cpu_count())
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--metrics", default="pck,match")
    e.add_argument("--alpha", type=float, default=0.1)
    e.add_argument("--match-threshold", type=float, default=0.5,
                   dest="match_threshold")
    e.add_argument("--out", help="write the JSON report here")
    e.add_argument("--csv", help="write a per-category CSV here")
    e.add_argument("--jobs", type=int, default=os.cpu_count())
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("viz", help="flow / trajectory visualization")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--seed", type=int)
    mode = v.add_mutually_exclusive_group(required=True)
    mode.add_argument("--pair", nargs=2, metavar=("SRC", "TGT"))
    mode.add_argument("--quartet", nargs=2, metavar=("DATA_DIR", "INDEX"))
    v.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
