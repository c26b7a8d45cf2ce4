"""Command-line entry point: synth, train, sample, eval, bench, kernels."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .denoiser import ALL_SCALES, FUSIONS, DenoiserConfig, DenoiserModel, forward_macs, parameter_count
from .diffusion import SamplerConfig, cosine_schedule, sample
from .evaluation import evaluate, load_predictions, load_records, save_predictions, save_records, synth_dataset
from .kernels import graph_kernel, hyperedge_degrees, hypergraph_kernel, vertex_degrees
from .skeleton import Skeleton, adjacency, incidence, resolve_skeleton, skeleton_from_dict, skeleton_to_dict
from .training import TrainConfig, predict, resolve_pose_scale, train


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int | None = None
    skeleton: str = "default"
    dm: int = 128
    blocks: int = 3
    fusion: str = "weighted"
    scales: list[str] = field(default_factory=lambda: list(ALL_SCALES))
    timesteps: int = 1000
    hypotheses: int = 1
    iterations: int = 1
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    lr_schedule: str = "constant"
    draws_per_record: int = 1
    pose_scale: float | None = None
    data: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None
    out: str | None = None

    def denoiser(self) -> DenoiserConfig:
        return DenoiserConfig(d_m=self.dm, blocks=self.blocks, fusion=self.fusion,
                              scales=tuple(self.scales), t_max=self.timesteps)

    def trainer(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           beta1=self.beta1, beta2=self.beta2, seed=self.seed,
                           lr_schedule=self.lr_schedule, draws_per_record=self.draws_per_record,
                           pose_scale=self.pose_scale)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(hypotheses=self.hypotheses, iterations=self.iterations, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the ``--config`` file, then explicit flags."""
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from None
        unknown = set(doc) - CONFIG_FIELDS
        if unknown:
            raise CliError(f"{path}: unknown config keys {sorted(unknown)}")
        values.update(doc)
    for name in CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = RunConfig(**values)
    if cfg.seed is None and getattr(args, "_needs_seed", True):
        raise CliError("a seed is required (--seed or 'seed' in the config file)")
    for name in ("data", "checkpoint", "predictions"):
        p = getattr(cfg, name)
        if p is not None and getattr(args, f"_needs_{name}", False) and not Path(p).exists():
            raise CliError(f"--{name} path {p} does not exist")
    if cfg.skeleton != "default" and not Path(cfg.skeleton).exists():
        raise CliError(f"skeleton file {cfg.skeleton} does not exist")
    return cfg


def _require(cfg: RunConfig, *names: str):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise CliError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _echo_config(cfg: RunConfig, path: Path):
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ----------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, args) -> int:
    _require(cfg, "out")
    skeleton = resolve_skeleton(cfg.skeleton)
    records = synth_dataset(args.n, skeleton, cfg.seed, noise_2d=args.noise_2d)
    save_records(records, cfg.out)
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    _require(cfg, "data", "out")
    skeleton = resolve_skeleton(cfg.skeleton)
    records = load_records(cfg.data, skeleton.num_joints)
    tcfg = cfg.trainer()
    tcfg.pose_scale = resolve_pose_scale(records, tcfg)
    model = DenoiserModel(cfg.denoiser(), skeleton, seed=cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out / "config.json")
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log_fh:
        def on_epoch(epoch, loss):
            log_fh.write(json.dumps({"epoch": epoch, "loss": loss}) + "\n")

        train(model, records, cosine_schedule(cfg.timesteps), tcfg, on_epoch)
    save_model(model, out / "model.ckpt", pose_scale=tcfg.pose_scale, timesteps=cfg.timesteps)
    return 0


def cmd_sample(cfg: RunConfig, args) -> int:
    _require(cfg, "checkpoint", "data", "out")
    model, meta = load_model(cfg.checkpoint)
    records = load_records(cfg.data, model.skeleton.num_joints)
    hyps = predict(model, records, cfg.sampler(), cosine_schedule(meta["timesteps"]), meta["pose_scale"])
    save_predictions(records, hyps, cfg.out)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    _require(cfg, "predictions", "data")
    skeleton = resolve_skeleton(cfg.skeleton)
    records = load_records(cfg.data, skeleton.num_joints)
    preds = load_predictions(cfg.predictions, skeleton.num_joints)
    ids = [r.id for r in records]
    missing = [i for i in ids if i not in preds]
    extra = sorted(set(preds) - set(ids))
    if missing or extra:
        raise CliError(f"prediction/record id mismatch: missing predictions for {missing}, unknown ids {extra}")
    no_gt = [r.id for r in records if r.y is None]
    if no_gt:
        raise CliError(f"records without ground truth cannot be evaluated: {no_gt}")
    counts = {len(preds[i]) for i in ids}
    if len(counts) != 1:
        raise CliError(f"records carry different hypothesis counts: {sorted(counts)}")
    # deterministic reduction order
    order = sorted(range(len(records)), key=lambda k: records[k].id)
    hyps = np.stack([preds[records[k].id] for k in order])
    gts = np.stack([records[k].y for k in order])
    report = evaluate(hyps, gts)
    sys.stdout.write(report.to_text())
    if cfg.out:
        Path(cfg.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def bench_report(cfg: RunConfig, skeleton: Skeleton, seconds: float) -> dict:
    dcfg = cfg.denoiser()
    j = skeleton.num_joints
    ep, eb = len(skeleton.part_hyperedges), len(skeleton.body_hyperedges)
    per_forward = forward_macs(dcfg, j, ep, eb, batch=1)
    model = DenoiserModel(dcfg, skeleton, seed=cfg.seed)
    report = {
        "param_count": parameter_count(dcfg, j, ep, eb),
        "param_count_enumerated": model.num_parameters(),
        "flops_per_forward": per_forward,
        "hypotheses": cfg.hypotheses,
        "iterations": cfg.iterations,
        "flops_per_sample": per_forward * cfg.hypotheses * cfg.iterations,
        "poses_per_second": None,
    }
    if seconds > 0:
        report["poses_per_second"] = measure_throughput(model, cfg, seconds)
    return report


def measure_throughput(model: DenoiserModel, cfg: RunConfig, seconds: float) -> float:
    """Final poses per second for H-hypothesis, K-iteration sampling of single inputs."""
    rng = nx.make_rng(cfg.seed, 7)
    j = model.skeleton.num_joints
    sampler = cfg.sampler()
    schedule = cosine_schedule(cfg.timesteps)
    done = 0
    start = time.perf_counter()
    while True:
        x = rng.standard_normal((1, j, 2))
        sample(lambda y, xx, t: model.forward(y, xx, t, mode="eval").data, x, sampler, schedule)
        done += 1
        elapsed = time.perf_counter() - start
        if elapsed >= seconds:
            return done / elapsed


def cmd_bench(cfg: RunConfig, args) -> int:
    skeleton = resolve_skeleton(cfg.skeleton)
    report = bench_report(cfg, skeleton, args.bench_seconds)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
    return 0


def kernel_dump(skeleton: Skeleton) -> dict:
    def mat(a):
        return [[float(v) for v in row] for row in a]

    adj = adjacency(skeleton)
    doc = {
        "joints": list(skeleton.joints),
        "joint": {"degrees": [float(v) for v in adj.sum(axis=1) + 1.0], "kernel": mat(graph_kernel(adj))},
    }
    for scale in ("part", "body"):
        h = incidence(skeleton, scale)
        doc[scale] = {
            "vertex_degrees": [float(v) for v in vertex_degrees(h)],
            "hyperedge_degrees": [float(v) for v in hyperedge_degrees(h)],
            "kernel": mat(hypergraph_kernel(h, joint_names=skeleton.joints)),
        }
    return doc


def cmd_kernels(cfg: RunConfig, args) -> int:
    text = json.dumps(kernel_dump(resolve_skeleton(cfg.skeleton)), indent=1) + "\n"
    if cfg.out:
        Path(cfg.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ----------------------------------------------------------------------
# checkpoints


def save_model(model: DenoiserModel, path, pose_scale: float, timesteps: int) -> None:
    meta = {
        "denoiser": model.config.to_dict(),
        "skeleton": skeleton_to_dict(model.skeleton),
        "pose_scale": pose_scale,
        "timesteps": timesteps,
    }
    nx.save_checkpoint(path, model.state_dict(), meta)


def load_model(path) -> tuple[DenoiserModel, dict]:
    state, meta = nx.load_checkpoint(path)
    skeleton = skeleton_from_dict(meta["skeleton"], str(path))
    model = DenoiserModel(DenoiserConfig.from_dict(meta["denoiser"]), skeleton, seed=0)
    model.load_state_dict(state)
    return model, meta


# ----------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("UsageError", message)
        sys.exit(2)


def _emit_error(kind: str, message: str):
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def _scales(text: str) -> list[str]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    bad = [p for p in parts if p not in ALL_SCALES]
    if bad or not parts:
        raise argparse.ArgumentTypeError(f"scales must be a comma list drawn from {ALL_SCALES}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON run configuration; flags override it")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--skeleton", help="skeleton JSON file or 'default'")
    shared.add_argument("--dm", type=int)
    shared.add_argument("--blocks", type=int)
    shared.add_argument("--fusion", choices=FUSIONS)
    shared.add_argument("--scales", type=_scales, help="comma list, e.g. joint,part,body")
    shared.add_argument("--timesteps", type=int)
    shared.add_argument("--hypotheses", type=int)
    shared.add_argument("--iterations", type=int)
    shared.add_argument("--out")

    parser = _Parser(prog="hyperdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[shared], help="write a synthetic pose-record file")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--noise-2d", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[shared], help="train a denoiser")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"))
    p.add_argument("--draws-per-record", type=int)
    p.add_argument("--pose-scale", type=float)
    p.set_defaults(func=cmd_train, _needs_data=True)

    p = sub.add_parser("sample", parents=[shared], help="sample pose hypotheses")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.set_defaults(func=cmd_sample, _needs_data=True, _needs_checkpoint=True)

    p = sub.add_parser("eval", parents=[shared], help="score predictions against ground truth")
    p.add_argument("--predictions")
    p.add_argument("--data")
    p.set_defaults(func=cmd_eval, _needs_data=True, _needs_predictions=True, _needs_seed=False)

    p = sub.add_parser("bench", parents=[shared], help="parameter, FLOP and throughput report")
    p.add_argument("--bench-seconds", type=float, default=3.0,
                   help="wall-clock budget for the throughput probe; 0 skips it")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("kernels", parents=[shared], help="dump the convolution kernels")
    p.set_defaults(func=cmd_kernels, _needs_seed=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(cfg, args)
    except Exception as exc:  # every failure leaves a machine-readable record
        _emit_error(type(exc).__name__, str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
