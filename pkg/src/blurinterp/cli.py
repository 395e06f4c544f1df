"""Command-line entry point binding synthesis, training, inference,
evaluation, similarity analysis, and benchmarking into reproducible runs.

Sub-commands: synth, train, infer, eval, cka, bench, repro.  Config
resolution is layered: built-in defaults, then the named profile, then a
JSON config file, then individual flags.  Every run writes a run.json with
the fully resolved config and a build identifier.  Exit codes: 0 success,
2 configuration error, 3 numerical abort.
"""

import argparse
import copy
import json
import os
import sys

import numpy as np

import blurinterp
from blurinterp import accept
from blurinterp import analysis as AN
from blurinterp import data as D
from blurinterp import tensor as T
from blurinterp import training as TR
from blurinterp.checkpoint import load as ckpt_load
from blurinterp.checkpoint import save as ckpt_save
from blurinterp.errors import ConfigError, DivergenceError, DomainError
from blurinterp.kernels import backend_name
from blurinterp.network import BiT, ModelConfig

DEFAULTS = {
    "seed": 0,
    "model": {"channels": 174, "heads": 6, "window": 8, "n_blocks": 3,
              "m_blocks": 3, "scales": 3, "rescale": 2, "upscale": 4,
              "mlp_ratio": 2.0, "global_residual": False},
    "optim": {"lr_start": 1e-4, "lr_end": 1e-6, "beta1": 0.9,
              "beta2": 0.999, "weight_decay": 1e-2, "eps": 1e-8,
              "grad_clip": 0.0},
    "loss": {"dual_end_weight": 0.5},
    "train": {"steps": TR.DEFAULT_BASE_EPOCHS * 100,
              "tse_steps": TR.DEFAULT_TSE_EPOCHS * 100, "batch_size": 8},
    "data": {"capture": "adobe240", "sequences": 4, "n_blur": 4,
             "size": 256, "speed": 1.0, "mode": "discrete",
             "supersample_k": 64, "gamma": None, "bit16": False,
             "split": "train"},
    "accept": {"dts_steps": 2000, "dts_seeds": [0, 1, 2]},
}

PROFILE_OVERRIDES = {
    # "full" keeps the built-in defaults (full-scale; not desk-feasible)
    "full": {},
    "tiny": {
        "model": {"channels": 24, "heads": 3, "window": 4, "n_blocks": 1,
                  "m_blocks": 1},
        "optim": {"lr_start": 1e-3, "lr_end": 1e-5},
        "train": {"steps": 2000, "tse_steps": 1000, "batch_size": 2},
        "data": {"capture": "adobe240", "sequences": 1, "n_blur": 4,
                 "size": 64, "speed": 2.0},
    },
}


def _deep_update(dst, src):
    for key, val in src.items():
        if isinstance(val, dict) and isinstance(dst.get(key), dict):
            _deep_update(dst[key], val)
        else:
            dst[key] = val
    return dst


def resolve_config(args, flag_map=()):
    """defaults < profile < --config file < individual flags."""
    cfg = copy.deepcopy(DEFAULTS)
    prof = getattr(args, "profile", "tiny")
    if prof not in PROFILE_OVERRIDES:
        raise ConfigError(f"unknown profile {prof!r}")
    _deep_update(cfg, copy.deepcopy(PROFILE_OVERRIDES[prof]))
    path = getattr(args, "config", None)
    if path:
        with open(path) as fh:
            _deep_update(cfg, json.load(fh))
    for flag, dotted in flag_map:
        val = getattr(args, flag, None)
        if val is not None:
            node = cfg
            *heads, leaf = dotted.split(".")
            for key in heads:
                node = node[key]
            node[leaf] = val
    return cfg


def build_info():
    try:
        import numba
        numba_ver = numba.__version__
    except Exception:
        numba_ver = "unavailable"
    return {"package": blurinterp.__version__, "numpy": np.__version__,
            "numba": numba_ver, "backend": backend_name}


def write_run_json(out_dir, command, cfg, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    record = {"command": command, "config": cfg, "build": build_info()}
    if extra:
        record.update(extra)
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def model_from_cfg(cfg):
    return BiT(ModelConfig(**cfg["model"]), seed=cfg["seed"])


def _model_state(arrays):
    return {k: v for k, v in arrays.items()
            if not k.startswith(("opt.", "train."))}


def load_model(ckpt_path, cfg):
    model = model_from_cfg(cfg)
    model.load_state(_model_state(ckpt_load(ckpt_path)), strict=False)
    return model


def gather_triplets(root, split="train"):
    """Triplets from a sequence dir, a split dir, or a dataset root."""
    root = root.rstrip(os.sep)
    if os.path.exists(os.path.join(root, "meta.json")):
        # a single sequence directory: .../split/seq_id
        split_dir, seq_id = os.path.split(root)
        seq_root, seq_split = os.path.split(split_dir)
        tris, _ = D.load_sequence(seq_root or ".", seq_split, seq_id)
        return tris
    if os.path.isdir(os.path.join(root, split)):
        seq_root, seq_split = root, split
    else:
        # allow pointing straight at a split directory
        seq_root, seq_split = os.path.split(root)
        seq_root = seq_root or "."
    names = D.list_sequences(seq_root, seq_split)
    if not names:
        raise ConfigError(f"no sequences under {root!r} (split {split!r})")
    out = []
    for name in names:
        tris, _ = D.load_sequence(seq_root, seq_split, name)
        out.extend(tris)
    return out


# -- synth -----------------------------------------------------------------------

def cmd_synth(args):
    cfg = resolve_config(args, [("seed", "seed"), ("capture", "data.capture"),
                                ("sequences", "data.sequences"),
                                ("n_blur", "data.n_blur"),
                                ("size", "data.size"),
                                ("speed", "data.speed"),
                                ("mode", "data.mode"),
                                ("split", "data.split"),
                                ("gamma", "data.gamma"),
                                ("bit16", "data.bit16")])
    d = cfg["data"]
    cap = D.profile(d["capture"])
    if d["mode"] not in ("discrete", "continuous"):
        raise ConfigError(f"unknown synthesis mode {d['mode']!r}")
    for s in range(d["sequences"]):
        kind = D.SCENE_KINDS[s % len(D.SCENE_KINDS)]
        scene = D.make_scene(kind, d["size"], seed=cfg["seed"] * 1000 + s,
                             speed=d["speed"])
        if d["mode"] == "discrete":
            seq = D.sequence_from_scene(scene, cap,
                                        D.frames_needed(cap, d["n_blur"]))
            tris = D.build_triplets(seq, cap, gamma=d["gamma"])
        else:
            tris = D.build_triplets_continuous(scene, cap, d["n_blur"],
                                               d["supersample_k"])
        D.save_sequence(args.out, d["split"], f"seq{s:03d}", tris, cap,
                        bit16=d["bit16"])
        print(f"synth: wrote {d['split']}/seq{s:03d} "
              f"({len(tris)} triplets, {kind})")
    write_run_json(args.out, "synth", cfg)
    return 0


# -- train -----------------------------------------------------------------------

def cmd_train(args):
    cfg = resolve_config(args, [("seed", "seed"), ("steps", "train.steps"),
                                ("batch", "train.batch_size"),
                                ("split", "data.split")])
    triplets = gather_triplets(args.data, cfg["data"]["split"])
    model = model_from_cfg(cfg)
    optim_cfg = TR.OptimConfig(**cfg["optim"])
    loss_cfg = TR.LossConfig(**cfg["loss"])
    optim = TR.AdamW(model.named_params(), optim_cfg)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.csv")
    steps = cfg["train"]["steps"]
    tse = False
    start = 0
    if args.tse_from:
        base_state = _model_state(ckpt_load(args.tse_from))
        model.load_state(base_state, strict=False)
        # an explicit --steps flag wins over the profile's tse budget
        steps = args.steps if args.steps is not None \
            else cfg["train"]["tse_steps"]
        tse = True
    if args.resume:
        start = TR.load_train_state(args.resume, model, optim)
        print(f"train: resumed at step {start}")
    history, optim = TR.fit(
        model, triplets, steps=steps, optim_cfg=optim_cfg,
        loss_cfg=loss_cfg, batch_size=cfg["train"]["batch_size"],
        seed=cfg["seed"], tse=tse, log_path=log_path, optim=optim,
        start_step=start)
    ckpt = os.path.join(args.out, "model.bitk")
    TR.save_train_state(ckpt, model, optim, step=steps)
    ckpt_save(os.path.join(args.out, "model_infer.bitk"),
              model.export_inference_state())
    write_run_json(args.out, "train", cfg,
                   extra={"tse": tse, "final_loss":
                          history[-1]["loss"] if history else None})
    if history:
        print(f"train: {len(history)} steps, final loss "
              f"{history[-1]['loss']:.6f} -> {ckpt}")
    return 0


# -- infer -----------------------------------------------------------------------

def cmd_infer(args):
    cfg = resolve_config(args, [("seed", "seed")])
    if (args.t is None) == (args.t_count is None):
        raise ConfigError("pass exactly one of --t or --t-count")
    if args.t is not None:
        ts = [float(v) for v in args.t.split(",") if v]
    else:
        if args.t_count < 2:
            raise ConfigError("--t-count must be at least 2")
        ts = list(np.linspace(0.0, 1.0, args.t_count))
    for t in ts:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"time query {t} outside [0, 1]")
    triplets = gather_triplets(args.data, args.split)
    index = args.index if args.index is not None else len(triplets) // 2
    if not 0 <= index < len(triplets):
        raise ConfigError(f"triplet index {index} out of range "
                          f"0..{len(triplets) - 1}")
    if index == 0 or index == len(triplets) - 1:
        print("infer: warning: boundary triplet, missing neighbor "
              "replicated from the center frame")
    tri = triplets[index]
    model = load_model(args.ckpt, cfg)
    model.train_mode(False)
    os.makedirs(args.out, exist_ok=True)
    p, c, n = (T.Tensor(a[None]) for a in (tri.prev, tri.cur, tri.nxt))
    calls0 = model.fn_calls
    with T.no_grad():
        if args.tse:
            fwd = model.extract_shared(p, c, n)
            bwd = model.extract_shared(n, c, p)
        else:
            shared = model.extract_shared(p, c, n)
        for i, t in enumerate(ts):
            if args.tse:
                fa = model.render_features(fwd, t)
                fb = model.render_features(bwd, 1.0 - t)
                pred = model._decode(T.concat([fa, fb], axis=1),
                                     model.head_tse_w, model.head_tse_b)
            else:
                pred = model.render_motion(shared, t)
            if model.config.global_residual:
                pred = pred + c
            name = f"{i:06d}_t{t:.4f}.png"
            D.write_png(os.path.join(args.out, name), pred.data[0],
                         bit16=False)
    per_branch = model.fn_calls - calls0
    print(f"infer: {len(ts)} queries from {per_branch} shared-feature "
          f"pass(es)")
    write_run_json(args.out, "infer", cfg,
                   extra={"t_values": ts, "triplet_index": index,
                          "fn_calls": per_branch})
    return 0


# -- eval ------------------------------------------------------------------------

def cmd_eval(args):
    cfg = resolve_config(args, [("seed", "seed")])
    triplets = gather_triplets(args.data, args.split)
    model = load_model(args.ckpt, cfg)
    report = AN.evaluate(model, triplets, tse=args.tse)
    out_dir = os.path.dirname(args.report) or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(args.report, "w") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    curve_path = os.path.splitext(args.report)[0] + "_curve.csv"
    AN.write_csv(curve_path, report.per_t, ("t", "psnr", "ssim"))
    write_run_json(out_dir, "eval", cfg)
    print(f"eval: mean PSNR {report.mean_psnr:.2f} dB, mean SSIM "
          f"{report.mean_ssim:.4f} over {len(report.per_frame)} frames")
    return 0


# -- cka -------------------------------------------------------------------------

def cmd_cka(args):
    cfg = resolve_config(args, [("seed", "seed")])
    triplets = gather_triplets(args.data, args.split)
    model = load_model(args.ckpt, cfg)
    feats = AN.collect_shared_features(model, triplets)
    out = AN.cka_map(feats, max_samples=args.max_samples, seed=cfg["seed"],
                     reorder=args.reorder)
    out_dir = os.path.dirname(args.out) or "."
    os.makedirs(out_dir, exist_ok=True)
    AN.write_cka_csv(args.out, out)
    write_run_json(out_dir, "cka", cfg)
    print(f"cka: {out.matrix.shape[0]} channels -> {args.out}")
    return 0


# -- bench -----------------------------------------------------------------------

def cmd_bench(args):
    cfg = resolve_config(args, [("seed", "seed")])
    model = load_model(args.ckpt, cfg) if args.ckpt else model_from_cfg(cfg)
    k_list = [int(v) for v in args.k.split(",") if v]
    rows = AN.bench_amortization(model, k_list, size=args.size,
                                 seed=cfg["seed"], cost=args.cost)
    out_dir = os.path.dirname(args.out) or "."
    os.makedirs(out_dir, exist_ok=True)
    AN.write_csv(args.out, rows,
                 ("k", "total", "fn_stage", "per_query", "fn_calls"))
    a, b = AN.fit_affine([r["k"] for r in rows],
                         [r["total"] for r in rows])
    extra = {"fit_intercept": a, "fit_slope": b, "cost": args.cost}
    if args.sweep:
        splits = [tuple(int(x) for x in pair.split(","))
                  for pair in args.sweep.split(";")]
        sweep_rows = AN.sweep_block_split(
            ModelConfig(**cfg["model"]), splits, k_max=max(k_list),
            size=args.size, seed=cfg["seed"], cost="macs")
        sweep_path = os.path.splitext(args.out)[0] + "_sweep.csv"
        AN.write_csv(sweep_path, sweep_rows,
                     ("n_blocks", "m_blocks", "intercept", "slope"))
        extra["sweep"] = sweep_rows
    write_run_json(out_dir, "bench", cfg, extra=extra)
    print(f"bench: fit total = {a:.4g} + {b:.4g}*k ({args.cost})")
    return 0


# -- repro -----------------------------------------------------------------------

def _stage(name, fn):
    print(f"repro: stage {name}")
    try:
        return fn()
    except Exception:
        print(f"repro: stage {name} FAILED", file=sys.stderr)
        raise


def cmd_repro(args):
    cfg = resolve_config(args, [("seed", "seed")])
    out = args.out
    seed = cfg["seed"]
    ds = os.path.join(out, "dataset")
    base_dir = os.path.join(out, "base")
    tse_dir = os.path.join(out, "tse")
    base_ckpt = os.path.join(base_dir, "model.bitk")
    tse_ckpt = os.path.join(tse_dir, "model.bitk")

    def have(path):
        return args.resume and os.path.exists(path)

    def synth_stage():
        d = cfg["data"]
        cap = D.profile(d["capture"])
        scene = D.make_scene("blobs", d["size"], seed=seed,
                             speed=d["speed"])
        seq = D.sequence_from_scene(scene, cap,
                                    D.frames_needed(cap, d["n_blur"]))
        tris = D.build_triplets(seq, cap)
        if not have(os.path.join(ds, "train", "seq000", "meta.json")):
            D.save_sequence(ds, "train", "seq000", tris, cap)
        return tris

    triplets = _stage("synth", synth_stage)

    optim_cfg = TR.OptimConfig(**cfg["optim"])
    loss_cfg = TR.LossConfig(**cfg["loss"])

    def train_stage():
        model = model_from_cfg(cfg)
        if have(base_ckpt):
            TR.load_train_state(base_ckpt, model)
            return model
        TR.fit(model, triplets, steps=cfg["train"]["steps"],
               optim_cfg=optim_cfg, loss_cfg=loss_cfg,
               batch_size=cfg["train"]["batch_size"], seed=seed,
               log_path=os.path.join(base_dir, "train_log.csv"))
        TR.save_train_state(base_ckpt, model, step=cfg["train"]["steps"])
        return model

    base_model = _stage("train", train_stage)

    def tse_stage():
        model = model_from_cfg(cfg)
        if have(tse_ckpt):
            TR.load_train_state(tse_ckpt, model)
            return model
        TR.tse_finetune(model, base_model.state_dict(), triplets,
                        steps=cfg["train"]["tse_steps"],
                        optim_cfg=optim_cfg, loss_cfg=loss_cfg,
                        batch_size=cfg["train"]["batch_size"], seed=seed,
                        log_path=os.path.join(tse_dir, "train_log.csv"))
        TR.save_train_state(tse_ckpt, model, step=cfg["train"]["tse_steps"])
        return model

    tse_model = _stage("tse", tse_stage)

    def infer_stage():
        infer_dir = os.path.join(out, "frames")
        os.makedirs(infer_dir, exist_ok=True)
        tri = triplets[len(triplets) // 2]
        p, c, n = (T.Tensor(a[None]) for a in (tri.prev, tri.cur, tri.nxt))
        with T.no_grad():
            base_model.train_mode(False)
            shared = base_model.extract_shared(p, c, n)
            for i, t in enumerate(np.linspace(0.0, 1.0, 5)):
                pred = base_model.render_motion(shared, float(t))
                D.write_png(os.path.join(infer_dir,
                                          f"{i:06d}_t{t:.4f}.png"),
                             pred.data[0], bit16=False)

    _stage("infer", infer_stage)

    def eval_stage():
        report = AN.evaluate(base_model, triplets)
        eval_dir = os.path.join(out, "eval")
        os.makedirs(eval_dir, exist_ok=True)
        with open(os.path.join(eval_dir, "report.json"), "w") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        AN.write_csv(os.path.join(eval_dir, "curve.csv"), report.per_t,
                     ("t", "psnr", "ssim"))

    _stage("eval", eval_stage)

    def cka_stage():
        feats = AN.collect_shared_features(base_model, triplets)
        cka_dir = os.path.join(out, "cka")
        os.makedirs(cka_dir, exist_ok=True)
        AN.write_cka_csv(os.path.join(cka_dir, "map.csv"),
                         AN.cka_map(feats, seed=seed))

    _stage("cka", cka_stage)

    def bench_stage():
        rows = AN.bench_amortization(base_model, [1, 4, 16, 60],
                                     size=cfg["data"]["size"], seed=seed,
                                     cost="macs")
        bench_dir = os.path.join(out, "bench")
        os.makedirs(bench_dir, exist_ok=True)
        AN.write_csv(os.path.join(bench_dir, "timings.csv"), rows,
                     ("k", "total", "fn_stage", "per_query", "fn_calls"))

    _stage("bench", bench_stage)

    def report_stage():
        results = accept.run_all(
            base_model, triplets, dts_steps=cfg["accept"]["dts_steps"],
            dts_seeds=tuple(cfg["accept"]["dts_seeds"]),
            dts_size=cfg["data"]["size"], seed=seed)
        text = accept.format_report(results, args.profile, seed)
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(text)
        print(text, end="")
        return results

    _stage("report", report_stage)
    write_run_json(out, "repro", cfg)
    return 0


# -- parser ----------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="blurinterp",
        description="joint deblurring and arbitrary-time frame "
                    "interpolation from blurred triplets")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--profile", default="tiny",
                       choices=sorted(PROFILE_OVERRIDES))
        p.add_argument("--config", default=None,
                       help="JSON config overrides")

    p = sub.add_parser("synth", help="write a synthetic blur dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--capture", default=None,
                   choices=D.PROFILE_NAMES)
    p.add_argument("--sequences", type=int, default=None)
    p.add_argument("--n-blur", dest="n_blur", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--speed", type=float, default=None,
                   help="scene motion multiplier")
    p.add_argument("--mode", default=None,
                   choices=("discrete", "continuous"))
    p.add_argument("--split", default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--bit16", action="store_const", const=True,
                   default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train (or fine-tune) a model")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--resume", default=None,
                   help="training checkpoint to continue from")
    p.add_argument("--tse-from", dest="tse_from", default=None,
                   help="base checkpoint to fine-tune through the "
                        "ensembling head")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="render sharp frames at chosen times")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--index", type=int, default=None)
    p.add_argument("--t", default=None, help="comma-separated times")
    p.add_argument("--t-count", dest="t_count", type=int, default=None,
                   help="uniform grid size including both ends")
    p.add_argument("--tse", action="store_true")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report over a split")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--tse", action="store_true")
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cka", help="channel-similarity map of shared "
                                   "features")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--reorder", default=None, choices=("spectral",))
    p.add_argument("--max-samples", dest="max_samples", type=int,
                   default=2048)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("bench", help="amortized-inference benchmark")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--k", default="1,4,16,60")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cost", default="time", choices=("time", "macs"))
    p.add_argument("--sweep", default=None,
                   help="semicolon-separated n,m splits, e.g. 1,3;2,2;3,1")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("repro", help="one-command pipeline with the "
                                     "acceptance report")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="reuse existing stage outputs where present")
    p.set_defaults(func=cmd_repro)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
