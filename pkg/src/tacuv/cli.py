"""Command-line surface for the full pipeline.

Subcommands: synth, fit-shape, retarget, project, train, eval, heatmap,
embed, patchmatch. Exit codes: 0 success, 1 usage error, 2 data error.
The UTH_THREADS environment variable caps worker counts where a stage can
fan out; every path is explicit (no implicit working-directory state).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import data as ds
from . import evaluation as ev
from . import hand as hm
from . import projection as pj
from .errors import TacuvError
from .layouts import default_glove_layout, default_match_table
from .model import AlignmentModel, LossWeights, ModelConfig
from .optim import load_checkpoint, save_checkpoint
from .robot import RobotState, default_hand, robot_keypoints
from .training import CSV_HEADER, TrainConfig, build_model, train, validate
from .data import AugmentConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _workers():
    try:
        return max(1, int(os.environ.get("UTH_THREADS", "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tacuv", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    sp = sub.add_parser("synth", help="generate a synthetic paired dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--objects", type=int, default=10)
    sp.add_argument("--trajectories", type=int, default=60)
    sp.add_argument("--frames", type=int, default=24)
    sp.add_argument("--uv-size", type=int, default=64)
    sp.add_argument("--no-stratified", action="store_true")

    sp = sub.add_parser("fit-shape", help="fit shape coefficients to the robot hand")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iters", type=int, default=10000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--stop-cd", type=float, default=None)

    sp = sub.add_parser("retarget", help="retarget one trajectory's robot poses")
    sp.add_argument("--data", required=True)
    sp.add_argument("--traj", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fit-iters", type=int, default=800)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("project", help="attach UV features to a raw dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fit-iters", type=int, default=800)
    sp.add_argument("--retarget-iters", type=int, default=120)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("train", help="train the alignment model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--decoder", choices=["dual", "human", "robot", "raw"], default=None)
    sp.add_argument("--no-aug", action="store_true", help="disable all augmentation")
    sp.add_argument("--no-linear-aug", action="store_true",
                    help="disable only paired interpolation")
    sp.add_argument("--paper-scale", action="store_true",
                    help="batch 1024 / 200 epochs defaults")

    sp = sub.add_parser("eval", help="metrics for a checkpoint on one split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("heatmap", help="latent similarity matrix for a trajectory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--traj", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("embed", help="export embeddings and their 2-D PCA")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("patchmatch", help="run the partition-mean baseline")
    sp.add_argument("--data", required=True)
    sp.add_argument("--traj", type=int, default=0)
    sp.add_argument("--out", required=True)
    return p


_DECODER_MODES = {"dual": "dual", "human": "human_only", "robot": "robot_only",
                  "raw": "raw_tactile"}


def _load_model(args) -> tuple:
    cfg_path = os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), "model.json")
    if not os.path.exists(cfg_path):
        raise TacuvError(f"missing architecture config next to checkpoint: {cfg_path}")
    with open(cfg_path, encoding="utf-8") as fh:
        doc = json.load(fh)
    arrays, _, _ = load_checkpoint(args.ckpt)
    return ev.rebuild_model(doc, arrays)


def _cmd_synth(args):
    cfg = ds.SynthConfig(n_objects=args.objects, n_trajectories=args.trajectories,
                         frames_per_traj=args.frames, seed=args.seed,
                         uv_size=args.uv_size, stratified=not args.no_stratified)
    ds.synth_paired_dataset(args.out, cfg)
    print(f"wrote {args.trajectories} trajectories to {args.out}")
    return 0


def _cmd_fit_shape(args):
    os.makedirs(args.out, exist_ok=True)
    template = hm.generate_standin_template(0)
    robot = default_hand()
    res = pj.fit_shape_to_robot(robot, template, iters=args.iters, seed=args.seed,
                                stop_cd=args.stop_cd)
    with open(os.path.join(args.out, "fit.json"), "w", encoding="utf-8") as fh:
        json.dump({"beta": [float(b) for b in res.beta], "loss_cd": res.loss_cd,
                   "loss_key": res.loss_key, "iterations": res.iterations,
                   "converged": res.converged}, fh, indent=1)
    with open(os.path.join(args.out, "fit_trace.csv"), "w", encoding="utf-8") as fh:
        fh.write("iter,loss_cd,loss_key,w\n")
        for i, (cd, key, w) in enumerate(res.trace):
            fh.write(f"{i},{cd:.8e},{key:.8e},{w:.6f}\n")
    print(f"fit: cd={res.loss_cd:.3e} after {res.iterations} iterations")
    return 0


def _cmd_retarget(args):
    os.makedirs(args.out, exist_ok=True)
    dataset = ds.PairedDataset(args.data)
    traj = dataset.trajectories[args.traj]
    template = hm.generate_standin_template(dataset.manifest.template_seed)
    robot = default_hand()
    if dataset.manifest.fit:
        beta = np.asarray(dataset.manifest.fit["beta"], dtype=np.float32)
    else:
        beta = pj.fit_shape_to_robot(robot, template, iters=args.fit_iters,
                                     seed=args.seed, stop_cd=1e-7).beta
    theta = np.zeros(48, dtype=np.float32)
    with open(os.path.join(args.out, "retarget.csv"), "w", encoding="utf-8") as fh:
        fh.write("frame,loss,iterations,converged\n")
        for k in range(len(traj)):
            state = RobotState(traj.p_r[k].astype(np.float64))
            res = pj.retarget_pose(robot_keypoints(robot, state), template, beta, theta)
            theta = res.theta
            fh.write(f"{k},{res.loss:.8e},{res.iterations},{int(res.converged)}\n")
    print(f"retargeted {len(traj)} frames of trajectory {args.traj}")
    return 0


def _cmd_project(args):
    ds.project_dataset(args.data, fit_iters=args.fit_iters,
                       retarget_iters=args.retarget_iters, seed=args.seed,
                       log=lambda m: print(m, file=sys.stderr))
    print(f"projected dataset at {args.data}")
    return 0


def _cmd_train(args):
    cfg_doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg_doc = json.load(fh)
    cfg = TrainConfig.paper_scale() if args.paper_scale else TrainConfig()
    for key, val in cfg_doc.items():
        if key == "weights":
            cfg.weights = LossWeights(**val)
        elif key == "augment":
            cfg.augment = AugmentConfig(**val)
        elif hasattr(cfg, key):
            setattr(cfg, key, val)
        else:
            raise TacuvError(f"unknown training config key {key!r}")
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    if args.lr is not None:
        cfg.lr = args.lr
    if args.seed is not None:
        cfg.seed = args.seed
    if args.decoder is not None:
        cfg.decoder_mode = _DECODER_MODES[args.decoder]
    if args.no_aug:
        cfg.augment = AugmentConfig.none()
    elif args.no_linear_aug:
        cfg.augment.enable_linear_interp = False
        cfg.augment.finger_subset_mode = False

    dataset = ds.PairedDataset(args.data)
    model = build_model(dataset, cfg)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "model.json"), "w", encoding="utf-8") as fh:
        json.dump(model.config.to_json(), fh, indent=1, sort_keys=True)
    train(model, dataset, cfg, args.out, log=lambda m: print(m, file=sys.stderr))
    print(f"training complete; artifacts in {args.out}")
    return 0


def _cmd_eval(args):
    dataset = ds.PairedDataset(args.data)
    model = _load_model(args)
    frames = dataset.frames(args.split)
    m = validate(model, frames, LossWeights())
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"eval_{args.split}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        fh.write(",".join([
            "0", "0.000000", "0.000000", "0.000000", "0.000000",
            f"{m['l_con']:.6f}", f"{m['l_rec']:.6f}", f"{m['l_adv']:.6f}",
            f"{m['l_total']:.6f}", f"{m['domain_acc']:.6f}",
            f"{m['retrieval_top1']:.6f}", "0.000",
        ]) + "\n")
    print(f"val l_total={m['l_total']:.4f} top1={m['retrieval_top1']:.3f} "
          f"-> {path}")
    return 0


def _cmd_heatmap(args):
    dataset = ds.PairedDataset(args.data)
    model = _load_model(args)
    traj = dataset.trajectories[args.traj]
    os.makedirs(args.out, exist_ok=True)
    rep = ev.heatmap(model, traj,
                     image_path=os.path.join(args.out, f"heatmap_{args.traj}.pgm"))
    with open(os.path.join(args.out, f"heatmap_{args.traj}.json"), "w",
              encoding="utf-8") as fh:
        json.dump({"diag_mean": rep.diag_mean, "offdiag_mean": rep.offdiag_mean,
                   "margin": rep.margin}, fh, indent=1)
    print(f"heatmap margin {rep.margin:.4f}")
    return 0


def _cmd_embed(args):
    dataset = ds.PairedDataset(args.data)
    model = _load_model(args)
    os.makedirs(args.out, exist_ok=True)
    ev.export_embeddings(model, dataset, args.split,
                         os.path.join(args.out, f"embeddings_{args.split}.csv"),
                         os.path.join(args.out, f"pca_{args.split}.csv"))
    print(f"embeddings exported to {args.out}")
    return 0


def _cmd_patchmatch(args):
    dataset = ds.PairedDataset(args.data)
    glove = default_glove_layout()
    robot = default_hand()
    table = default_match_table(glove, robot)
    traj = dataset.trajectories[args.traj]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"patchmatch_{args.traj}.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame,mse_h2r,mse_r2h\n")
        for k in range(len(traj)):
            pred_r = ds.patch_match_h2r(traj.t_h[k], table)
            pred_h = ds.patch_match_r2h(traj.t_r[k], table)
            fh.write(f"{k},{((pred_r - traj.t_r[k]) ** 2).mean():.8f},"
                     f"{((pred_h - traj.t_h[k]) ** 2).mean():.8f}\n")
    print(f"patchmatch baseline written to {path}")
    return 0


_HANDLERS = {
    "synth": _cmd_synth, "fit-shape": _cmd_fit_shape, "retarget": _cmd_retarget,
    "project": _cmd_project, "train": _cmd_train, "eval": _cmd_eval,
    "heatmap": _cmd_heatmap, "embed": _cmd_embed, "patchmatch": _cmd_patchmatch,
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _HANDLERS[args.cmd](args)
    except TacuvError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main():
    raise SystemExit(cli())
