"""``dilo`` command line: data generation, both training stages, evaluation, explanations."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from .amortized import train_stage2
from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint, optimizer_arrays, params_digest,
                         restore_states, save_checkpoint)
from .config import RunConfig
from .evalkit import (d_score, eval_baselines, eval_transfer, read_pairs, sample_pairs, transfer,
                      write_pairs)
from .explain import SurrogateExplainer, export_importance, export_importance_csv
from .geometry import Mesh, PointCloud, load_obj, save_obj
from .latentopt import train_stage1
from .nets import DiLONetwork, is_trainable
from .synthdata import generate_dataset, load_external

logger = logging.getLogger("dilo")

# stage-2 targets first go through these splits when scoring disentanglement
DEFAULT_TEST_SPLITS = ("test-unseen-deform",)


class UsageError(Exception):
    """A flag combination argparse cannot catch on its own."""


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override its values")
    p.add_argument("--seed", type=int, help="seed for every stochastic component")
    p.add_argument("--out", help="output path (file or directory, per subcommand)")
    p.add_argument("--threads", type=int, help="cap on BLAS worker threads (env DILO_THREADS)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dilo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write the synthetic quadruped dataset")
    _common(p)
    p.add_argument("--groups", type=int, default=8)
    p.add_argument("--deforms", type=int, default=32, help="training instances per group")
    p.add_argument("--points", type=int, default=128, help="target vertex count")
    p.add_argument("--test-groups", type=int, default=4)
    p.add_argument("--test-deforms", type=int, default=8)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("train-stage1", help="optimise latent codes, generator and modulator")
    _common(p)
    p.add_argument("--data", help="dataset directory holding manifest.json")
    p.add_argument("--manifest", help="manifest path if not DATA/manifest.json")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="stage-1 checkpoint to continue from")

    p = sub.add_parser("train-stage2", help="train the encoders against stage-1 codes")
    _common(p)
    p.add_argument("--stage1", required=True, help="stage-1 checkpoint directory")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("transfer", help="pose one mesh like another")
    _common(p)
    p.add_argument("--shape", required=True, help="OBJ supplying the identity")
    p.add_argument("--deform", required=True, help="OBJ supplying the pose")
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("eval-transfer", help="PMD/CD of transfers against ground truth")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--pairs", help="JSON list of {shape_source, deform_source, ground_truth?}")
    p.add_argument("--n-pairs", type=int, default=100, help="pairs to sample when --pairs is absent")
    p.add_argument("--split", nargs="+", default=["test-unseen-deform"], help="splits to sample pairs from")
    p.add_argument("--align", action="store_true", help="rigidly align each output before scoring")
    p.add_argument("--allow-reflection", action="store_true", help="let the alignment include a reflection")

    p = sub.add_parser("eval-dscore", help="linear-probe predictivity of each code for the pose class")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--train-split", nargs="+", default=["train"])
    p.add_argument("--test-split", nargs="+", default=list(DEFAULT_TEST_SPLITS))

    p = sub.add_parser("explain", help="per-vertex importance for one encoder")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mesh", required=True, help="OBJ to explain")
    p.add_argument("--encoder", choices=("shape", "deform"), default="deform")
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--samples", type=int, help="number of perturbations")
    p.add_argument("--mode", help="latent_similarity or component:<i>")
    p.add_argument("--flip-colors", action="store_true", help="red for positive importance instead of blue")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy models")
    _common(p)
    return parser


def _run_config(args, base: dict | None = None) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
    elif base is not None:
        cfg = RunConfig.from_dict(base)
    else:
        cfg = RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    d = cfg.to_dict()
    for key in ("data", "manifest"):
        val = getattr(args, key, None)
        if val is not None:
            d["data_dir" if key == "data" else key] = val
    if getattr(args, "epochs", None) is not None:
        stage = "stage1" if args.command == "train-stage1" else "stage2"
        d[stage]["epochs"] = args.epochs
    return RunConfig.from_dict(d)


def _dataset(cfg: RunConfig):
    if not cfg.data_dir:
        raise UsageError("no dataset: pass --data or set data_dir in the config")
    return load_external(cfg.data_dir, cfg.manifest)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_curve(rows: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _load_net(ckpt_dir) -> tuple[DiLONetwork, RunConfig, Checkpoint]:
    ckpt = load_checkpoint(ckpt_dir)
    cfg = RunConfig.from_dict(ckpt.config)
    net = DiLONetwork(cfg.net, seed=cfg.seed)
    net.load_arrays(ckpt.params)
    return net, cfg, ckpt


def cmd_synth(args) -> int:
    if not args.out:
        raise UsageError("synth needs --out")
    seed = 7 if args.seed is None else args.seed
    manifest = generate_dataset(args.groups, args.deforms, seed, args.out, force=args.force,
                                V_target=args.points, n_test_groups=args.test_groups,
                                n_test_deforms=args.test_deforms)
    counts = {}
    for e in manifest["entries"]:
        counts[e["split"]] = counts.get(e["split"], 0) + 1
    print(f"wrote {len(manifest['entries'])} meshes (V={manifest['V']}, F={manifest['F']}) to {args.out}")
    for split, n in counts.items():
        print(f"  {split:24s} {n}")
    return 0


def cmd_train_stage1(args) -> int:
    out = _out_dir(args)
    latents = states = None
    if args.resume:
        prev = load_checkpoint(args.resume)
        cfg = _run_config(args, prev.config)
    else:
        cfg = _run_config(args)
    cfg.net.validate()
    data = _dataset(cfg).subset("train")
    net = DiLONetwork(cfg.net, seed=cfg.seed)
    if args.resume:
        net.load_arrays(prev.params)
        latents = prev.latents
        states = restore_states(net.named_parameters(["generator", "modulator"]), prev.optimizer, "stage1")
    log = (lambda r: print(f"epoch {r['epoch']:4d}  L1 {r['mean_L1']:.6g}")) if args.verbose else None
    net, latents, curve, states = train_stage1(data, net, cfg.stage1, latents, states, callback=log)
    gen = net.named_parameters(["generator", "modulator"])
    save_checkpoint(Checkpoint(1, cfg.to_dict(), net.state_arrays(), optimizer_arrays(gen, states, "stage1"),
                               latents, extra={"final_mean_L1": curve[-1]["mean_L1"]}), out)
    _write_curve(curve, out / "loss_stage1.csv")
    cfg.save(out / "config.json")
    first, last = curve[0]["mean_L1"], curve[-1]["mean_L1"]
    print(f"stage 1: {len(curve)} epochs, mean L1 {first:.6g} -> {last:.6g} (ratio {last / first:.4f})")
    print(f"checkpoint {out}")
    return 0


def cmd_train_stage2(args) -> int:
    out = _out_dir(args)
    parent = load_checkpoint(args.stage1)
    if parent.stage != 1 or parent.latents is None:
        raise CheckpointError(f"{args.stage1} is not a stage-1 checkpoint")
    cfg = _run_config(args, parent.config)
    net = DiLONetwork(cfg.net, seed=cfg.seed)
    net.load_arrays(parent.params)
    data = _dataset(cfg).subset("train")
    log = (lambda r: print(f"epoch {r['epoch']:4d}  L2 {r['mean_L2']:.6g}")) if args.verbose else None
    net, curve, states = train_stage2(data, net, parent.latents, cfg.stage2, callback=log)
    enc = [(n, t) for n, t in net.named_parameters(["enc_s", "enc_z"]) if is_trainable(n)]
    opt = {**optimizer_arrays(net.named_parameters(["generator", "modulator"]), states["gen"], "stage2.gen"),
           **optimizer_arrays(enc, states["enc"], "stage2.enc")}
    save_checkpoint(Checkpoint(2, cfg.to_dict(), net.state_arrays(), opt, parent.latents,
                               parent=params_digest(args.stage1),
                               extra={"final_mean_L2": curve[-1]["mean_L2"]}), out)
    _write_curve(curve, out / "loss_stage2.csv")
    cfg.save(out / "config.json")
    print(f"stage 2: {len(curve)} epochs, mean L2 {curve[0]['mean_L2']:.6g} -> {curve[-1]['mean_L2']:.6g}")
    print(f"checkpoint {out} (parent {params_digest(args.stage1)[:12]})")
    return 0


def cmd_transfer(args) -> int:
    if not args.out:
        raise UsageError("transfer needs --out <file.obj>")
    net, _, _ = _load_net(args.ckpt)
    shape, deform = load_obj(args.shape), load_obj(args.deform)
    y = transfer(net, shape.points, deform.points)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_obj(Mesh(PointCloud(y), shape.faces), args.out)
    print(f"wrote {args.out} ({len(y)} vertices)")
    return 0


def cmd_eval_transfer(args) -> int:
    out = _out_dir(args)
    net, cfg, _ = _load_net(args.ckpt)
    cfg = _run_config(args, cfg.to_dict()) if (args.data or args.manifest or args.config) else cfg
    data = _dataset(cfg)
    if args.pairs:
        pairs = read_pairs(args.pairs)
    else:
        pool = data.subset(*args.split)
        if len(pool) == 0:
            raise UsageError(f"no instances in split(s) {args.split}")
        pairs = sample_pairs(pool, args.n_pairs, cfg.seed if args.seed is None else args.seed)
    align = args.align or cfg.eval.align
    refl = args.allow_reflection or cfg.eval.allow_reflection
    report = eval_transfer(pairs, net, data, align, refl)
    base = eval_baselines(pairs, data, align, refl)
    ids = [f"{p.shape_source}<-{p.deform_source}" for p in pairs]
    report.to_csv(out / "transfer.csv", ids)
    write_pairs(pairs, out / "pairs.json")
    ratio = np.minimum(base["copy_shape"].pmd, base["copy_deform"].pmd) / np.maximum(report.pmd, 1e-300)
    summary = {"n_pairs": len(pairs), "aligned": align, "allow_reflection": refl,
               "pmd": report.mean_pmd, "cd": report.mean_cd,
               "copy_shape_pmd": base["copy_shape"].mean_pmd, "copy_deform_pmd": base["copy_deform"].mean_pmd,
               "median_improvement": float(np.median(ratio))}
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"{'method':12s} {'PMD x1e3':>10s} {'CD x1e3':>10s}")
    for name, rep in (("transfer", report), ("copy shape", base["copy_shape"]), ("copy deform", base["copy_deform"])):
        print(f"{name:12s} {rep.mean_pmd * 1e3:10.3f} {rep.mean_cd * 1e3:10.3f}")
    print(f"median per-pair improvement over the better copy: {summary['median_improvement']:.2f}x")
    return 0


def cmd_eval_dscore(args) -> int:
    out = _out_dir(args)
    net, cfg, _ = _load_net(args.ckpt)
    cfg = _run_config(args, cfg.to_dict()) if (args.data or args.manifest or args.config) else cfg
    data = _dataset(cfg)
    tr, te = data.subset(*args.train_split), data.subset(*args.test_split)
    if len(tr) == 0 or len(te) == 0:
        raise UsageError("empty train or test split")
    ev = cfg.eval
    rep = d_score(net.encode_z(tr.clouds).data, net.encode_s(tr.clouds).data, tr.deform_classes,
                  net.encode_z(te.clouds).data, net.encode_s(te.clouds).data, te.deform_classes,
                  reg=ev.probe_reg, n_steps=ev.probe_steps, lr=ev.probe_lr)
    _, counts = np.unique(te.deform_classes, return_counts=True)
    result = {**rep.to_dict(), "chance": float(counts.max() / counts.sum()),
              "train_split": args.train_split, "test_split": args.test_split}
    (out / "dscore.json").write_text(json.dumps(result, indent=1))
    with open(out / "dscore.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "E_given_z", "E_given_s", "d_score"])
        w.writerow(["deformation", repr(rep.E_factor_given_z), repr(rep.E_factor_given_s), repr(rep.d_score)])
    print(rep.format() + f"  (chance {result['chance']:.3f})")
    return 0


def cmd_explain(args) -> int:
    out = _out_dir(args)
    net, cfg, _ = _load_net(args.ckpt)
    ev = cfg.eval
    mesh = load_obj(args.mesh)
    enc = net.encode_z if args.encoder == "deform" else net.encode_s
    explainer = SurrogateExplainer(lambda x: enc(x).data[0], k=args.k or ev.explain_k,
                                   n_samples=args.samples or ev.explain_samples,
                                   mode=args.mode or ev.explain_mode,
                                   seed=cfg.seed if args.seed is None else args.seed)
    explainer.fit(mesh.points)
    export_importance(mesh.points, explainer.importance_, out / "importance.ply", args.flip_colors)
    export_importance_csv(explainer.importance_, out / "importance.csv")
    order = np.argsort(-np.abs(explainer.coef_))
    print(f"{args.encoder} encoder, k={explainer.k}, {explainer.n_samples} perturbations")
    for c in order[:5]:
        print(f"  cluster {c:3d}  size {explainer.segmentation_.sizes()[c]:4d}  importance {explainer.coef_[c]:+.4g}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gc.run_all(0 if args.seed is None else args.seed)
    for r in results:
        print(f"{r.name:28s} {r.max_rel_error:.3e}  {'ok' if r.ok else 'FAIL'}")
    worst = max(r.max_rel_error for r in results)
    print(f"worst {worst:.3e} (tolerance {gc.TOLERANCE:g})")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({r.name: r.max_rel_error for r in results}, indent=1))
    return 0 if all(r.ok for r in results) else 1


COMMANDS = {
    "synth": cmd_synth, "train-stage1": cmd_train_stage1, "train-stage2": cmd_train_stage2,
    "transfer": cmd_transfer, "eval-transfer": cmd_eval_transfer, "eval-dscore": cmd_eval_dscore,
    "explain": cmd_explain, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = args.threads if args.threads is not None else os.environ.get("DILO_THREADS")
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            return COMMANDS[args.command](args)
    except UsageError as err:
        parser.error(str(err))
    except (OSError, ValueError, KeyError, RuntimeError, np.linalg.LinAlgError) as err:
        print(f"dilo {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
