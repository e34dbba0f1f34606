"""Command-line entry point: scene/data generation, training, evaluation, ablations, exports."""

from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("MINDCRAFT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, evalsuite, querygen
from . import numcore as nc
from .config import (PRESET_HELP, PRESETS, ConfigError, RunConfig, apply_preset,
                     describe_defaults, load_run_config)
from .gridworld import SceneGraph, generate_scene
from .model import forward_batch, query_experience
from .training import Trainer, load_params, load_state, save_params, save_state


class DataError(Exception):
    """Bad or missing input files; reported on one line, exit status 1."""


# ---------------------------------------------------------------------------
# file helpers

def _scene_path(d, seed):
    return Path(d) / f"scene_{seed:06d}.json"


def write_scenes(scenes, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        _scene_path(out, s.seed).write_text(s.to_json() + "\n")


def read_scenes(d) -> dict:
    d = Path(d)
    if not d.is_dir():
        raise DataError("scenes: not found")
    scenes = {}
    for p in sorted(d.glob("scene_*.json")):
        try:
            s = SceneGraph.from_dict(json.loads(p.read_text()))
        except (ValueError, KeyError, TypeError) as e:
            raise DataError(f"scenes: bad file {p.name}: {e}") from None
        scenes[s.seed] = s
    if not scenes:
        raise DataError("scenes: empty")
    return scenes


def read_episodes(path, what="data"):
    if not Path(path).is_file():
        raise DataError(f"{what}: not found")
    try:
        return querygen.read_jsonl(path)
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{what}: malformed ({e})") from None


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_jsonl(path, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    if args.seed is not None:
        cfg.train.seed = args.seed
    else:
        args.seed = cfg.train.seed
    return cfg


# ---------------------------------------------------------------------------
# commands

def cmd_gen_scenes(args):
    cfg = _run_config(args)
    seeds = args.seeds if args.seeds is not None else range(args.seed, args.seed + args.n)
    scenes = [generate_scene(s, cfg.scene) for s in seeds]
    write_scenes(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_gen_data(args):
    _run_config(args)
    scenes = read_scenes(args.scenes)
    order = [scenes[k] for k in sorted(scenes)]
    eps = querygen.generate_dataset(order, args.episodes, args.budget, args.seed, prefix=args.prefix)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    querygen.write_jsonl(eps, args.out)
    print(f"wrote {len(eps)} episodes ({sum(len(e.queries) for e in eps)} queries) to {args.out}")
    return 0


def _train(data, tcfg, args, resume=None):
    state = None
    if resume:
        state, saved = load_state(resume)
        if saved.to_dict() != tcfg.to_dict():
            raise DataError("resume: config differs from the checkpoint's")
    tr = Trainer(data, tcfg, state)
    log = []
    params, _ = tr.run(stop_at=args.steps, callback=log.append)
    return tr, params, log


def cmd_train(args):
    cfg = _run_config(args)
    tcfg = cfg.effective_train()
    data = read_episodes(args.data)
    if len(data) < tcfg.batch_size:
        raise DataError(f"data: {len(data)} episodes, fewer than batch_size {tcfg.batch_size}")
    tr, params, log = _train(data, tcfg, args, args.resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_params(out / "params.ckpt", params, tcfg)
    save_state(out / "state.ckpt", tr.state, tcfg)
    _write_json(out / "config.json", cfg.to_dict())
    mode = "a" if args.resume else "w"
    with open(args.log or out / "train_log.jsonl", mode) as f:
        for r in log:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"trained to step {tr.state.step}; checkpoint in {out}")
    return 0


def _evaluate(params, model_cfg, episodes, scenes, eval_cfg):
    missing = sorted({e.scene_seed for e in episodes} - set(scenes))
    if missing:
        raise DataError(f"scenes: missing scene {missing[0]}")
    policy = evalsuite.ModelPolicy(params, model_cfg)
    res = evalsuite.rollout(policy, episodes, scenes, eval_cfg.success_radius, eval_cfg.max_steps)
    return res, evalsuite.report(res, eval_cfg.success_radius)


def cmd_eval(args):
    params, tcfg, _ = _load_ckpt(args.ckpt)
    eval_cfg = _run_config(args).eval
    episodes = read_episodes(args.data)
    scenes = read_scenes(args.scenes)
    if not episodes:
        raise DataError("data: no episodes")
    res, rep = _evaluate(params, tcfg.model, episodes, scenes, eval_cfg)
    _write_json(args.out, rep)
    if args.log_out:
        _write_jsonl(args.log_out, evalsuite.log_to_dicts(res))
    print(json.dumps({k: rep[k] for k in ("qa_acc", "cmc", "sr", "spl")}, sort_keys=True))
    return 0


def cmd_ablate(args):
    cfg = _run_config(args)
    tcfg = apply_preset(cfg.train, args.preset)
    train = read_episodes(args.train, "train")
    test = read_episodes(args.test, "test")
    scenes = read_scenes(args.scenes)
    if len(train) < tcfg.batch_size:
        raise DataError(f"train: {len(train)} episodes, fewer than batch_size {tcfg.batch_size}")
    if not test:
        raise DataError("test: no episodes")
    _, params, log = _train(train, tcfg, args)
    res, rep = _evaluate(params, tcfg.model, test, scenes, cfg.eval)
    out = Path(args.out)
    rep = dict(rep, preset=args.preset, seed=args.seed)
    _write_json(out / f"{args.preset}_seed{args.seed}.report.json", rep)
    _write_jsonl(out / f"{args.preset}_seed{args.seed}.train_log.jsonl", log)
    _write_jsonl(out / f"{args.preset}_seed{args.seed}.predictions.jsonl", evalsuite.log_to_dicts(res))
    _write_json(out / f"{args.preset}_seed{args.seed}.config.json", cfg.to_dict())
    print(json.dumps({"preset": args.preset, "qa_acc": rep["qa_acc"], "cmc": rep["cmc"]}, sort_keys=True))
    return 0


def top2_projection(X, seed=0, iters=200):
    """Projection onto the top-2 principal directions via power iteration with deflation.

    Returns (coords (n, 2), eigenvalues (2,)). Deterministic for a given seed.
    """
    X = np.asarray(X, np.float64)
    n, d = X.shape
    if n == 0:
        return np.zeros((0, 2)), np.zeros(2)
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / max(n - 1, 1)
    rng = np.random.default_rng(seed)
    vecs, vals = [], []
    for _ in range(min(2, d)):
        v = rng.standard_normal(d)
        for u in vecs:
            v -= (v @ u) * u
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = C @ v
            for u in vecs:
                w -= (w @ u) * u
            nrm = np.linalg.norm(w)
            if nrm == 0:
                break
            v = w / nrm
        vecs.append(v)
        vals.append(float(v @ C @ v))
    while len(vecs) < 2:
        vecs.append(np.zeros(d))
        vals.append(0.0)
    P = np.stack(vecs, axis=1)
    return Xc @ P, np.array(vals)


EMBED_META = ["episode_id", "t", "query_id", "region_id", "room_type", "qtype"]


def export_embeddings(params, model_cfg, episodes, scenes=None, project=True, seed=0, batch=64):
    """Rows of metadata plus the activated map vector for every query timestep."""
    if not model_cfg.use_map:
        raise DataError("ckpt: model has no map slot to export")
    meta, exps = [], []
    for ep in episodes:
        for q in ep.queries:
            rid = ep.observations[q.asked_at].region_id
            room = scenes[ep.scene_seed].room_type_of(rid) if scenes and ep.scene_seed in scenes else ""
            meta.append([ep.episode_id, q.asked_at, q.query_id, rid, room, q.qtype])
            exps.append(query_experience(ep, q, model_cfg))
    vecs = []
    with nc.no_grad():
        for lo in range(0, len(exps), batch):
            vecs.append(forward_batch(params, model_cfg, exps[lo:lo + batch]).m_prime.data)
    V = np.concatenate(vecs).astype(np.float64) if vecs else np.zeros((0, model_cfg.d_model))
    header = EMBED_META + [f"m{i}" for i in range(model_cfg.d_model)]
    coords = None
    if project:
        header += ["pc1", "pc2"]
        coords, _ = top2_projection(V, seed)
    rows = []
    for i, m in enumerate(meta):
        row = m + [repr(float(x)) for x in V[i]]
        if coords is not None:
            row += [repr(float(x)) for x in coords[i]]
        rows.append(row)
    return header, rows


def cmd_export_embeddings(args):
    _run_config(args)
    params, tcfg, _ = _load_ckpt(args.ckpt)
    episodes = read_episodes(args.data)
    scenes = read_scenes(args.scenes) if args.scenes else None
    header, rows = export_embeddings(params, tcfg.model, episodes, scenes, not args.no_project, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _load_ckpt(path):
    if not Path(path).is_file():
        raise DataError("ckpt: not found")
    try:
        return load_params(path)
    except (ValueError, KeyError) as e:
        raise DataError(f"ckpt: unreadable ({e})") from None


# ---------------------------------------------------------------------------
# parser

def _seed_range(text):
    try:
        a, b = (int(x) for x in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected A..B, got {text!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return range(a, b + 1)


def version_string():
    return (f"mindcraft {__version__} (python {platform.python_version()}, "
            f"numpy {np.__version__})")


def build_parser():
    p = argparse.ArgumentParser(
        prog="mindcraft",
        description="Gridworld navigation with concurrent queries: data, training, evaluation.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Config defaults (override with --config FILE.json):\n" + describe_defaults(),
    )
    p.add_argument("--version", action="version", version=version_string())
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="random seed (default: the config's, else 0)")
    common.add_argument("--config", help="run config JSON; unknown keys are rejected")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scenes", parents=[common], help="generate scene graphs")
    s.add_argument("--seeds", type=_seed_range, help="inclusive scene seed range A..B")
    s.add_argument("--n", type=int, default=100,
                   help="number of scenes starting at --seed when --seeds is absent (default 100)")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(fn=cmd_gen_scenes)

    s = sub.add_parser("gen-data", parents=[common], help="generate episodes with queries (JSONL)")
    s.add_argument("--scenes", required=True, help="scene directory")
    s.add_argument("--episodes", type=int, required=True)
    s.add_argument("--query-budget", "--budget", dest="budget", type=int, default=6,
                   help="queries per episode (default 6)")
    s.add_argument("--prefix", default="ep", help="episode id prefix (default ep)")
    s.add_argument("--out", required=True, help="output JSONL")
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="teacher-forced training",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="Defaults:\n" + describe_defaults())
    s.add_argument("--data", required=True, help="training JSONL")
    s.add_argument("--out", required=True, help="output directory for checkpoints and log")
    s.add_argument("--preset", choices=PRESETS, help="ablation preset applied on top of the config")
    s.add_argument("--steps", type=int, help="stop after this many optimizer steps")
    s.add_argument("--resume", help="training state checkpoint to resume from")
    s.add_argument("--log", help="training log JSONL (default OUT/train_log.jsonl)")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="closed-loop evaluation")
    s.add_argument("--ckpt", required=True, help="params checkpoint")
    s.add_argument("--data", required=True, help="evaluation JSONL")
    s.add_argument("--scenes", required=True, help="scene directory")
    s.add_argument("--out", required=True, help="metric report JSON")
    s.add_argument("--log-out", help="per-episode prediction log JSONL")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate", parents=[common], help="train and evaluate one ablation preset",
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="Presets:\n" + "\n".join(f"  {k}: {v}" for k, v in PRESET_HELP.items()))
    s.add_argument("--preset", required=True, choices=PRESETS)
    s.add_argument("--train", required=True, help="training JSONL")
    s.add_argument("--test", required=True, help="test JSONL")
    s.add_argument("--scenes", required=True, help="scene directory")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--steps", type=int, help="stop training after this many steps")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("export-embeddings", parents=[common],
                       help="dump activated map vectors at query timesteps (CSV)")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--scenes", help="scene directory, for room types")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--no-project", action="store_true", help="skip the 2-component projection")
    s.set_defaults(fn=cmd_export_embeddings)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: io: {e.strerror}: {e.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
