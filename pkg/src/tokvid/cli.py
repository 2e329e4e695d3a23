"""Command-line front end: gen | train | rollout | bench | schedules | eval.

Each subcommand resolves its settings as flags > ``--config`` JSON > defaults,
validates them before doing any work, and writes the resolved config to
``<out>/config.json``. Exit codes: 0 ok, 2 invalid config, 3 runtime failure;
failures print a one-line JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import plotting
from .corruption import MaskSchedule
from .nfe import (DMLAB, DMLAB_AR, FFS, FFS_AR, METHODS, PUBLISHED_CELLS, NfeReport,
                  plan_nfe, reports_to_csv, reports_to_json)
from .predictors import (MODEL_KINDS, CountingPredictor, OraclePredictor, UniformPredictor,
                         load_checkpoint)
from .rollout import plan_chunks, rollout_video
from .samplers import (SamplerConfig, SamplerMode, pyramid_schedule_matrix, rolling_ramp,
                       sample_chunk)
from .synthetic import (CapacityError, Dynamics, SyntheticProcess, evaluate_rollout, gen_video,
                        sampler_tv_distance)
from .training import DivergenceError, MaskingMode, TrainConfig, train
from .types import TokenVideo, Vocabulary

logger = logging.getLogger("tokvid")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

DEFAULT_LR = {"tabular": 0.5, "mlp": 0.2}


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail(EXIT_CONFIG, "usage", message)


def _fail(code: int, kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    raise SystemExit(code)


# ---------------------------------------------------------------- defaults

PROCESS_DEFAULTS = {"num_data": 3, "tokens": 2, "dynamics": "cyclic_shift", "noise": 0.0,
                    "perm_seed": 0}
SAMPLER_DEFAULTS = {"sampler": "mgm", "steps": None, "guidance": 0.0, "partial_ratio": 0.5,
                    "timestep_independent": False, "argmax": False}

DEFAULTS = {
    "gen": {**PROCESS_DEFAULTS, "count": 8, "L": 32, "seed": 0, "jobs": 1, "format": "bin"},
    "train": {"data": None, "model": "tabular", "steps": 2000, "lr": None, "batch_size": 16,
              "k": 8, "mode": "frame", "schedule": "linear", "sharpness": 6.0, "radius": 3,
              "hidden": 32, "seed": 0},
    "rollout": {**PROCESS_DEFAULTS, **SAMPLER_DEFAULTS, "checkpoint": None, "oracle": False,
                "L": "10k", "k": 4, "m": 1, "stride": None, "videos": 1, "seed": 0, "jobs": 1},
    "bench": {"methods": ",".join(METHODS), "preset": "published", "geometry": [], "tokens": 32,
              "steps": None, "guidance": 0.0, "seed": 0},
    "schedules": {"k": 16, "steps": 250, "m": 2},
    "eval": {**PROCESS_DEFAULTS, **SAMPLER_DEFAULTS, "checkpoint": None, "oracle": False,
             "noise": 0.1, "tokens": 1, "k": 2, "m": 1, "samples": 10000, "L": "10k",
             "stride": None, "videos": 4, "seed": 0, "jobs": 1},
}


def _add_process(p):
    p.add_argument("--num-data", type=int, help="data ids per token (vocabulary adds a mask id)")
    p.add_argument("--tokens", type=int, help="tokens per frame N")
    p.add_argument("--dynamics", choices=[d.value for d in Dynamics])
    p.add_argument("--noise", type=float, help="resampling probability per step")
    p.add_argument("--perm-seed", type=int)


def _add_sampler(p):
    p.add_argument("--sampler", choices=[m.value for m in SamplerMode])
    p.add_argument("--steps", type=int, help="sampling steps T")
    p.add_argument("--guidance", type=float, help="partial-context guidance scale")
    p.add_argument("--partial-ratio", type=float)
    p.add_argument("--timestep-independent", action="store_true", default=None)
    p.add_argument("--argmax", action="store_true", default=None)
    p.add_argument("--checkpoint")
    p.add_argument("--oracle", action="store_true", default=None)


def _add_geometry(p):
    p.add_argument("--L", dest="L", help="video length; '10k' means 10 windows")
    p.add_argument("--k", type=int, help="window length")
    p.add_argument("--m", type=int, help="context frames")
    p.add_argument("--stride", type=int, help="new frames per chunk (1 = autoregressive)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokvid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True, jobs=False):
        p.add_argument("--config", help="JSON file with settings for this subcommand")
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int)
        if jobs:
            p.add_argument("--jobs", type=int, help="parallel workers across videos")

    p = sub.add_parser("gen", help="write synthetic token videos")
    common(p, jobs=True)
    _add_process(p)
    p.add_argument("--count", type=int)
    p.add_argument("--L", dest="L", type=int)
    p.add_argument("--format", choices=["bin", "json"])

    p = sub.add_parser("train", help="train a predictor on a generated dataset")
    common(p)
    p.add_argument("--data", help="directory written by `gen`")
    p.add_argument("--model", choices=sorted(MODEL_KINDS))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--mode", choices=[m.value for m in MaskingMode])
    p.add_argument("--schedule", choices=["linear", "sigmoid"])
    p.add_argument("--sharpness", type=float)

    p = sub.add_parser("rollout", help="generate long videos chunk by chunk")
    common(p, jobs=True)
    _add_process(p)
    _add_sampler(p)
    _add_geometry(p)
    p.add_argument("--videos", type=int)

    p = sub.add_parser("bench", help="predicted vs measured forward passes")
    common(p)
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(METHODS))
    p.add_argument("--preset", choices=["published", "none"])
    p.add_argument("--geometry", action="append", metavar="L,k,m,s")
    p.add_argument("--tokens", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)

    p = sub.add_parser("schedules", help="dump the pyramid matrix and rolling ramp")
    common(p, seed=False)
    p.add_argument("--k", type=int)
    p.add_argument("--steps", type=int, help="denoising steps T")
    p.add_argument("--m", type=int, help="context frames for the rolling ramp")

    p = sub.add_parser("eval", help="sampler fidelity and rollout accuracy")
    common(p, jobs=True)
    _add_process(p)
    _add_sampler(p)
    _add_geometry(p)
    p.add_argument("--samples", type=int)
    p.add_argument("--videos", type=int)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


# ---------------------------------------------------------------- helpers

def parse_length(value, k: int) -> int:
    """``"10k"`` -> 10 * k; plain integers pass through."""
    text = str(value).strip()
    try:
        return int(text[:-1]) * k if text.endswith("k") else int(text)
    except ValueError:
        raise ConfigError(f"bad length {value!r}") from None


def make_process(cfg) -> SyntheticProcess:
    return SyntheticProcess(num_data=cfg["num_data"], tokens_per_frame=cfg["tokens"],
                            dynamics=Dynamics(cfg["dynamics"]), noise=cfg["noise"],
                            perm_seed=cfg["perm_seed"])


def make_sampler(cfg) -> SamplerConfig:
    return SamplerConfig(mode=cfg["sampler"], steps=cfg["steps"],
                         timestep_independent=bool(cfg["timestep_independent"]),
                         guidance_scale=cfg["guidance"], partial_ratio=cfg["partial_ratio"],
                         argmax=bool(cfg["argmax"]))


def make_model(cfg, process: SyntheticProcess):
    if cfg["oracle"] and cfg["checkpoint"]:
        raise ConfigError("pass either --oracle or --checkpoint, not both")
    if cfg["oracle"]:
        return OraclePredictor(process)
    if not cfg["checkpoint"]:
        raise ConfigError("need --checkpoint or --oracle")
    model = load_checkpoint(cfg["checkpoint"])
    if model.vocab != process.vocab:
        raise ConfigError(f"checkpoint vocabulary {model.vocab} does not match the process "
                          f"{process.vocab}")
    return model


def child_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def parallel_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _rollout_geometry(cfg):
    k, m = cfg["k"], cfg["m"]
    L = parse_length(cfg["L"], k)
    s = cfg["stride"] if cfg["stride"] is not None else k - m
    if s == 1 and cfg["stride"] is not None:
        # stride 1 means autoregressive generation: everything but one frame is context
        m = k - 1
    plan = plan_chunks(L, k, m, s)
    return L, k, m, s, plan


# ---------------------------------------------------------------- commands
# each prepare_* validates and returns a zero-argument runner

def prepare_gen(cfg, out: Path):
    process = make_process(cfg)
    if cfg["count"] < 0 or cfg["L"] < 1:
        raise ConfigError("count must be >= 0 and L >= 1")
    if cfg["format"] == "bin" and process.vocab.mask_id != process.vocab.size - 1:
        raise ConfigError("binary format needs the mask id last")
    suffix = ".json" if cfg["format"] == "json" else ".bin"

    def run():
        rngs = child_rngs(cfg["seed"], cfg["count"])

        def one(i):
            video = gen_video(process, cfg["L"], rngs[i])
            path = out / f"video_{i:05d}{suffix}"
            video.save(path)
            return {"file": path.name, "frames": video.length,
                    "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}

        files = parallel_map(one, list(range(cfg["count"])), cfg["jobs"])
        _write_json(out / "manifest.json", {"count": len(files), "process": process.to_dict(),
                                            "vocab": {"K": process.vocab.size,
                                                      "mask_id": process.vocab.mask_id},
                                            "videos": files})
    return run


def load_dataset(data_dir) -> list[TokenVideo]:
    if not data_dir:
        raise ConfigError("train needs --data")
    manifest = Path(data_dir) / "manifest.json"
    if not manifest.exists():
        raise ConfigError(f"no dataset manifest at {manifest}")
    entries = json.loads(manifest.read_text())["videos"]
    if not entries:
        raise ConfigError("dataset is empty")
    return [TokenVideo.load(Path(data_dir) / e["file"]) for e in entries]


def prepare_train(cfg, out: Path):
    videos = load_dataset(cfg["data"])
    vocab = videos[0].vocab
    if any(v.vocab != vocab for v in videos):
        raise ConfigError("dataset mixes vocabularies")
    schedule = (MaskSchedule.sigmoid(cfg["sharpness"]) if cfg["schedule"] == "sigmoid"
                else MaskSchedule.linear())
    lr = cfg["lr"] if cfg["lr"] is not None else DEFAULT_LR[cfg["model"]]
    tcfg = TrainConfig(learning_rate=lr, steps=cfg["steps"], batch_size=cfg["batch_size"],
                       k=cfg["k"], mode=cfg["mode"], schedule=schedule, seed=cfg["seed"])
    if min(v.length for v in videos) < tcfg.k:
        raise ConfigError(f"videos shorter than the window k={tcfg.k}")
    if cfg["model"] == "mlp":
        model = MODEL_KINDS["mlp"](vocab, radius=cfg["radius"], hidden=cfg["hidden"],
                                   seed=cfg["seed"])
    else:
        model = MODEL_KINDS["tabular"](vocab, max_dist=max(tcfg.k, 1))

    def run():
        log = train(model, videos, tcfg)
        model.save(out / "checkpoint.tvck",
                   extra={"mode": tcfg.mode.value, "train": tcfg.to_dict(),
                          "final_loss": log.losses[-1] if log.losses else None})
        _write_csv(out / "losses.csv", ["step", "loss", "accuracy"],
                   [[i + 1, repr(float(l)), repr(float(a))]
                    for i, (l, a) in enumerate(zip(log.losses, log.accuracies))])
        if log.losses:
            plotting.plot_training(log.losses, log.accuracies, out / "training.png")
    return run


def _run_rollouts(model, scfg, process, cfg, geometry, seed):
    """Roll out ``videos`` ground-truth continuations; returns per-video results."""
    L, k, m, s, plan = geometry
    vocab = process.vocab
    rngs = child_rngs(seed, 2 * cfg["videos"])

    def one(i):
        truth = gen_video(process, L, rngs[2 * i])
        counter = CountingPredictor(model)
        t0 = time.perf_counter()
        result = rollout_video(counter, scfg, truth.frames[:m], L, k, s, vocab, rngs[2 * i + 1])
        seconds = time.perf_counter() - t0
        if not np.array_equal(result.video.frames[:m], truth.frames[:m]):
            raise RuntimeError("context frames were modified during rollout")
        predicted = plan_nfe(scfg.mode.value, plan, scfg.steps, process.tokens_per_frame,
                             scfg.guided)
        report = NfeReport(scfg.mode.value, L, k, m, s, scfg.steps, predicted, counter.count,
                           round(seconds, 6)).check()
        spans = None if scfg.mode is SamplerMode.ROLLING else plan.spans
        ev = evaluate_rollout(result.video, truth, spans=spans, context_frames=m)
        return result.video, report, ev

    return parallel_map(one, list(range(cfg["videos"])), cfg["jobs"])


def prepare_rollout(cfg, out: Path):
    process = make_process(cfg)
    scfg = make_sampler(cfg)
    geometry = _rollout_geometry(cfg)
    if cfg["videos"] < 1:
        raise ConfigError("videos must be >= 1")
    model = make_model(cfg, process)

    def run():
        results = _run_rollouts(model, scfg, process, cfg, geometry, cfg["seed"])
        for i, (video, _, _) in enumerate(results):
            video.save(out / f"rollout_{i:05d}.bin")
        reports = [r for _, r, _ in results]
        (out / "nfe.csv").write_text(reports_to_csv(reports))
        (out / "nfe.json").write_text(reports_to_json(reports) + "\n")
        evals = [e for _, _, e in results]
        _write_json(out / "eval.json", [json.loads(e.to_json()) for e in evals])
        curve = np.mean([e.chunk_accuracy for e in evals], axis=0)
        plotting.plot_chunk_accuracy(curve, out / "chunk_accuracy.png")
    return run


def bench_geometries(cfg) -> list[tuple[str, int, int, int, int]]:
    """(method, L, k, m, s) rows: published layouts at 1/2/5/10x plus custom ones."""
    methods = [m.strip() for m in str(cfg["methods"]).split(",") if m.strip()]
    bad = set(methods) - set(METHODS)
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}")
    rows = []
    if cfg["preset"] == "published":
        for geo, ar in ((FFS, FFS_AR), (DMLAB, DMLAB_AR)):
            for factor in (1, 2, 5, 10):
                L = factor * geo["k"]
                for method in methods:
                    rows.append((method, L, geo["k"], geo["m"], geo["s"]))
                    if method == "mgm":
                        rows.append((method, L, ar["k"], ar["m"], ar["s"]))
    for text in cfg["geometry"] or []:
        try:
            L, k, m, s = (int(v) for v in str(text).split(","))
        except ValueError:
            raise ConfigError(f"geometry {text!r} is not L,k,m,s") from None
        rows += [(method, L, k, m, s) for method in methods]
    for _, L, k, m, s in rows:
        plan_chunks(L, k, m, s)
    return rows


def prepare_bench(cfg, out: Path):
    rows = bench_geometries(cfg)
    if cfg["tokens"] < 1:
        raise ConfigError("tokens must be >= 1")
    vocab = Vocabulary(4)
    base = {"steps": cfg["steps"], "guidance": cfg["guidance"], "partial_ratio": 0.5,
            "timestep_independent": False, "argmax": False}
    configs = {m: make_sampler({**base, "sampler": m}) for m in {r[0] for r in rows}}

    def run():
        rng = np.random.default_rng(cfg["seed"])
        reports = []
        for method, L, k, m, s in rows:
            scfg = configs[method]
            plan = plan_chunks(L, k, m, s)
            counter = CountingPredictor(UniformPredictor(vocab))
            context = rng.integers(0, vocab.num_data, size=(m, cfg["tokens"]))
            t0 = time.perf_counter()
            rollout_video(counter, scfg, context, L, k, s, vocab, rng)
            seconds = time.perf_counter() - t0
            predicted = plan_nfe(method, plan, scfg.steps, cfg["tokens"], scfg.guided)
            reports.append(NfeReport(method, L, k, m, s, scfg.steps, predicted, counter.count,
                                     round(seconds, 6)).check())
        (out / "nfe.csv").write_text(reports_to_csv(reports))
        (out / "nfe.json").write_text(reports_to_json(reports) + "\n")
        _write_csv(out / "published_nfe.csv",
                   ["table", "dataset", "method", "factor", "L", "k", "m", "s", "reported",
                    "formula", "match", "note"],
                   [[c.table, c.dataset, c.method, c.factor, c.L, c.k, c.m, c.s, c.reported,
                     c.formula(), c.formula() == c.reported, c.note] for c in PUBLISHED_CELLS])
        plotting.plot_nfe(reports, out / "nfe.png")
    return run


def prepare_schedules(cfg, out: Path):
    k, T, m = cfg["k"], cfg["steps"], cfg["m"]
    matrix = pyramid_schedule_matrix(k, T)
    ramp = rolling_ramp(k, m) if 1 <= m < k else None

    def run():
        _write_csv(out / "pyramid.csv", None, matrix.tolist())
        if ramp is not None:
            _write_csv(out / "rolling_ramp.csv", ["position", "mask_ratio"],
                       [[j, repr(float(r))] for j, r in enumerate(ramp)])
        plotting.plot_schedule(matrix, out / "pyramid.png", title=f"k={k}, T={T}")
    return run


def prepare_eval(cfg, out: Path):
    process = make_process(cfg)
    scfg = make_sampler(cfg)
    model = make_model(cfg, process)
    k_tv, m_tv = cfg["k"], cfg["m"]
    if not 1 <= m_tv < k_tv:
        raise ConfigError("eval needs 1 <= m < k")
    if cfg["samples"] < 0 or cfg["videos"] < 0:
        raise ConfigError("samples and videos must be >= 0")
    geometry = _rollout_geometry(cfg) if cfg["videos"] else None

    def run():
        rng_tv, rng_ctx = child_rngs(cfg["seed"], 2)
        tv = None
        if cfg["samples"] and scfg.mode is not SamplerMode.ROLLING:
            context = gen_video(process, m_tv, rng_ctx).frames
            observed = np.full((k_tv, process.tokens_per_frame), process.vocab.mask_id,
                               dtype=context.dtype)
            observed[:m_tv] = context
            batch = np.broadcast_to(context, (cfg["samples"],) + context.shape)
            try:
                samples = sample_chunk(model, batch, k_tv, scfg, process.vocab, rng_tv)
                tv = sampler_tv_distance(samples, observed, process)
            except CapacityError as exc:
                logger.warning("skipping TV distance: %s", exc)
        results = (_run_rollouts(model, scfg, process, cfg, geometry, cfg["seed"] + 1)
                   if geometry else [])
        curves = [e.chunk_accuracy for _, _, e in results]
        curve = np.mean(curves, axis=0).tolist() if curves else []
        acc = float(np.mean([e.token_accuracy for _, _, e in results])) if results else None
        summary = {"tv_distance": tv, "token_accuracy": acc, "chunk_accuracy": curve,
                   "samples": cfg["samples"], "videos": cfg["videos"]}
        _write_json(out / "eval.json", summary)
        rows = [["tv_distance", "", tv], ["token_accuracy", "", acc]]
        rows += [["chunk_accuracy", i, a] for i, a in enumerate(curve)]
        _write_csv(out / "eval.csv", ["metric", "index", "value"], rows)
        if curve:
            plotting.plot_chunk_accuracy(curve, out / "chunk_accuracy.png")
    return run


COMMANDS = {"gen": prepare_gen, "train": prepare_train, "rollout": prepare_rollout,
            "bench": prepare_bench, "schedules": prepare_schedules, "eval": prepare_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args)
        runner = COMMANDS[args.command](cfg, out)
    except (ValueError, KeyError, TypeError, OSError) as exc:
        _fail(EXIT_CONFIG, type(exc).__name__, str(exc))
    try:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "config.json", {"command": args.command, **cfg})
        runner()
    except (DivergenceError, AssertionError, RuntimeError, OSError, ValueError,
            FloatingPointError) as exc:
        _fail(EXIT_RUNTIME, type(exc).__name__, str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
