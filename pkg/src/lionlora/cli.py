"""Command-line entry point: ``lionlora <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 training failure,
5 evaluation domain error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zlib
from contextlib import nullcontext
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .adapter import load_adapter_file, save_adapters
from .diagnostics import (
    layerwise_cosine,
    line_chart_svg,
    linearity_csv,
    mean_trajectory,
    norm_csv,
    norm_profile,
    similarity_csv,
    trajectory_csv,
)
from .errors import (
    AttachmentError,
    ConfigError,
    DomainError,
    FusionError,
    LionError,
    RangeError,
    TrainingFailureError,
    WeightFileError,
)
from .fusion import FusionPlan, fuse, norm_scales
from .model import ModelConfig, ToyDiT, ddim_sample_batch
from .multifuse import FusedContext, fused_sample_batch
from .scaling import ClipSampler, sample_frame_indices
from .synthbench import (
    BaseTrainConfig,
    TrainConfig,
    build_clips,
    eval_linearity,
    pretrain_base,
    read_dataset,
    train_lora,
    write_dataset,
)
from .weightfile import Section, write_weight_file

log = logging.getLogger("lionlora")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAINING, EXIT_DOMAIN = 0, 2, 3, 4, 5

DEFAULTS = {
    "schema_version": 1,
    "seed": 0,
    "model": {},
    "train": {"steps": 2000, "lr": 5e-4, "batch_size": 8, "rank": 8, "num_frequencies": 8,
              "arm": "scaling_token", "base_steps": 3000, "base_lr": 1e-3, "base_scenes": 100},
    "data": {"primitive": "offset_h", "scenes": 100, "clip_length": 120, "num_points": 4},
    "fusion": {"mode": "norm_consistent", "scales": None, "average_after": "block"},
    "eval": {"s_grid": [0.2, 0.4, 0.6, 0.8, 1.0], "ddim_steps": 50, "probes": 8, "timestep": None},
}


class EvalDomainError(Exception):
    """An evaluation request outside the admissible scaling range."""


# ---------------------------------------------------------------------------
# configuration


def schema() -> dict:
    text = resources.files("lionlora").joinpath("schemas/runconfig.schema.json").read_text()
    return json.loads(text)


def load_run_config(path: str | None) -> dict:
    """Defaults overlaid with a validated RunConfig document."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path is None:
        return cfg
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from exc
    for key, value in doc.items():
        if isinstance(value, dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def component_seed(seed: int, component: str) -> int:
    """Deterministic per-component seed split from one command-level seed."""
    ss = np.random.SeedSequence([seed, zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def thread_limit():
    raw = os.environ.get("LION_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"LION_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"LION_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def parse_grid(text: str) -> list[float]:
    """``lo:hi:count`` (inclusive, evenly spaced) or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, count = text.split(":")
            count = int(count)
            if count < 1:
                raise ValueError
            return [float(v) for v in np.linspace(float(lo), float(hi), count)]
        return [float(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse scaling grid {text!r}; use lo:hi:count or a,b,c") from exc


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _override(section: dict, **flags) -> None:
    for key, value in flags.items():
        if value is not None:
            section[key] = value


# ---------------------------------------------------------------------------
# shared helpers


def _probe_conditions(args, cfg: dict, config: ModelConfig) -> np.ndarray:
    count = cfg["eval"]["probes"]
    if getattr(args, "probe", None):
        _, clips = read_dataset(args.probe)
        return clips[:count, 0]
    return build_clips("offset_h", count, 2, config.frame_size,
                       seed=component_seed(cfg["seed"], "probe"))[:, 0]


def _probe_clips(data_dir: str, config: ModelConfig, count: int) -> np.ndarray:
    manifest, clips = read_dataset(data_dir)
    n = clips.shape[1]
    if n < config.frames:
        raise ConfigError(f"probe clips have {n} frames; the model needs {config.frames}")
    idx = sample_frame_indices(ClipSampler(n, config.frames), 1.0)
    return clips[:count, idx]


def _load_base(path: str) -> ToyDiT:
    return ToyDiT.load(path)


def _load_adapters(paths, model: ToyDiT):
    return [load_adapter_file(p, model.config) for p in paths]


def _frames_file(path: Path, frames: np.ndarray, meta: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    write_weight_file(path, [Section("frames", {"frames": frames.astype(np.float32)}, meta)])


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: dict) -> int:
    data = cfg["data"]
    _override(data, primitive=args.primitive, scenes=args.scenes, clip_length=args.clip_len)
    config = ModelConfig(**cfg["model"])
    manifest = write_dataset(args.out, data["primitive"], data["scenes"], data["clip_length"],
                             config.frame_size, component_seed(cfg["seed"], "data"),
                             data["num_points"])
    log.info("wrote %d clips to %s", len(manifest["clips"]), args.out)
    return EXIT_OK


def cmd_pretrain(args, cfg: dict) -> int:
    tr = cfg["train"]
    _override(tr, base_steps=args.steps)
    config = ModelConfig(**cfg["model"])
    seed = component_seed(cfg["seed"], "base")
    model, losses = pretrain_base(config, BaseTrainConfig(tr["base_steps"], tr["base_lr"],
                                                          tr["batch_size"], tr["base_scenes"], seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    _write_text(out.with_name("base_loss_curve.csv"), _loss_csv(losses))
    return EXIT_OK


def _loss_csv(losses) -> str:
    return "step,loss\n" + "".join(f"{i},{l:.9g}\n" for i, l in enumerate(losses))


def cmd_train(args, cfg: dict) -> int:
    tr = cfg["train"]
    _override(tr, arm=args.arm, steps=args.steps)
    manifest, clips = read_dataset(args.data)
    model = _load_base(args.base)
    if clips.shape[-1] != model.config.frame_size:
        raise ConfigError(f"dataset frames are {clips.shape[-1]} px; the base model expects "
                          f"{model.config.frame_size}")
    primitive = args.primitive or manifest["primitive"]
    config = TrainConfig(tr["steps"], tr["lr"], tr["batch_size"], tr["rank"],
                         component_seed(cfg["seed"], "train"), tr["arm"], tr["num_frequencies"])
    adapters, embedder, losses = train_lora(model, clips, config, primitive)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_adapters(adapters, out / "adapter.lw", embedder)
    _write_text(out / "loss_curve.csv", _loss_csv(losses))
    return EXIT_OK


def _generate(model: ToyDiT, loaded, scales, mode, average_after, conditions, steps, seed):
    """Frames for one or more adapters; token adapters fuse through partitioned attention."""
    adapters = [a for a, _ in loaded]
    embedders = [e for _, e in loaded]
    with_token = [e is not None for e in embedders]
    if all(with_token):
        for e, s in zip(embedders, scales):
            e.check(s)
        plan = FusionPlan(adapters, [1.0] * len(adapters), mode)
        context = FusedContext.from_embedders(plan, embedders, scales, average_after=average_after)
        return fused_sample_batch(model, conditions, context, steps, seed), plan
    if any(with_token):
        raise FusionError("cannot fuse scaling-token adapters with adapter-scale adapters")
    plan = FusionPlan(adapters, list(scales), mode)
    fused, _ = fuse(plan)
    return ddim_sample_batch(model, conditions, steps, fused, None, seed), plan


def _norm_report_csv(plan: FusionPlan) -> str:
    _, report = norm_scales(plan)
    if plan.mode == "vanilla":
        for lid in report.scale:
            report.scale[lid] = [1.0] * plan.k
            report.norms_after[lid] = list(report.norms_before[lid])
    return report.to_csv()


def cmd_fuse(args, cfg: dict) -> int:
    fu = cfg["fusion"]
    _override(fu, mode=args.mode, scales=args.scales)
    model = _load_base(args.base)
    loaded = _load_adapters(args.adapters, model)
    scales = fu["scales"] if fu["scales"] is not None else [1.0] * len(loaded)
    if len(scales) != len(loaded):
        raise ConfigError(f"{len(scales)} scales given for {len(loaded)} adapters")
    ev = cfg["eval"]
    _override(ev, ddim_steps=args.ddim_steps)
    conditions = _probe_conditions(args, cfg, model.config)
    frames, plan = _generate(model, loaded, scales, fu["mode"], fu["average_after"], conditions,
                             ev["ddim_steps"], component_seed(cfg["seed"], "sample"))
    out = Path(args.out)
    _frames_file(out / "frames.lw", frames, {"adapters": [a.name for a, _ in loaded],
                                             "scales": scales, "mode": fu["mode"]})
    _write_text(out / "norm_report.csv", _norm_report_csv(plan))
    _write_text(out / "trajectory.csv", trajectory_csv(mean_trajectory(frames)))
    return EXIT_OK


def cmd_diagnose(args, cfg: dict) -> int:
    model = _load_base(args.base)
    loaded = _load_adapters(args.adapters, model)
    adapters = [a for a, _ in loaded]
    probes = _probe_clips(args.probe, model.config, cfg["eval"]["probes"])
    t = cfg["eval"]["timestep"] if args.timestep is None else args.timestep
    if t is None:
        t = model.config.diffusion_steps // 2
    seed = component_seed(cfg["seed"], "diagnose")
    try:
        profiles = [layerwise_cosine(model, adapters[i], adapters[j], probes, t, seed=seed)
                    for i in range(len(adapters)) for j in range(i + 1, len(adapters))]
        norms = norm_profile(model, adapters, probes, t, seed=seed)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    _write_text(out / "similarity.csv", similarity_csv(profiles))
    _write_text(out / "norms.csv", norm_csv(norms))
    if args.svg and profiles:
        series = {f"{p.names[0]}|{p.names[1]}": list(p.mean) for p in profiles}
        _write_text(out / "similarity.svg", line_chart_svg(series, "cosine similarity per block"))
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    ev = cfg["eval"]
    if args.s_grid is not None:
        ev["s_grid"] = parse_grid(args.s_grid)
    _override(ev, ddim_steps=args.ddim_steps)
    model = _load_base(args.base)
    loaded = _load_adapters(args.adapter, model)
    for _, emb in loaded:
        if emb is not None:
            try:
                for s in ev["s_grid"]:
                    emb.check(s)
            except RangeError as exc:
                raise EvalDomainError(str(exc)) from exc
    conditions = _probe_conditions(args, cfg, model.config)
    seed = component_seed(cfg["seed"], "sample")
    out = Path(args.out)
    reports = []
    for adapters, emb in loaded:
        frames = {}
        try:
            rep = eval_linearity(model, adapters, emb, ev["s_grid"], conditions, ev["ddim_steps"],
                                 seed, frames_out=frames)
        except DomainError as exc:
            raise EvalDomainError(str(exc)) from exc
        reports.append(rep)
        for s, batch in frames.items():
            _write_text(out / f"trajectory_{adapters.name}_{rep.arm}_S{s:.4f}.csv",
                        trajectory_csv(mean_trajectory(batch)))
    _write_text(out / "linearity.csv", linearity_csv(reports))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lionlora",
        description="Scaling-token LoRA adapters on a toy video diffusion transformer.",
        epilog="exit codes: 0 ok, 2 config, 3 I/O, 4 training failure, 5 evaluation domain")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--seed", type=int, help="command-level seed (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic motion dataset")
    g.add_argument("--primitive")
    g.add_argument("--scenes", type=int)
    g.add_argument("--clip-len", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("pretrain", help="train a base model on static scenes")
    b.add_argument("--steps", type=int)
    b.add_argument("--out", required=True, help="base model weight file")
    b.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train one LoRA adapter on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--base", required=True)
    t.add_argument("--primitive", help="adapter name (defaults to the dataset primitive)")
    t.add_argument("--arm", choices=["scaling_token", "adapter_scale"])
    t.add_argument("--steps", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("fuse", help="generate with one or more adapters fused")
    f.add_argument("--base", required=True)
    f.add_argument("--adapters", nargs="+", required=True)
    f.add_argument("--mode", choices=["norm_consistent", "vanilla"])
    f.add_argument("--scales", nargs="+", type=float)
    f.add_argument("--probe", help="dataset whose first frames condition generation")
    f.add_argument("--ddim-steps", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fuse)

    d = sub.add_parser("diagnose", help="layer-wise similarity and norm profiles")
    d.add_argument("--base", required=True)
    d.add_argument("--adapters", nargs="+", required=True)
    d.add_argument("--probe", required=True)
    d.add_argument("--timestep", type=int)
    d.add_argument("--svg", action="store_true")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    e = sub.add_parser("eval", help="linearity of motion magnitude in S")
    e.add_argument("--base", required=True)
    e.add_argument("--adapter", action="append", required=True)
    e.add_argument("--s-grid")
    e.add_argument("--probe")
    e.add_argument("--ddim-steps", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        with thread_limit():
            return args.func(args, cfg)
    except EvalDomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except TrainingFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (OSError, WeightFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, FusionError, AttachmentError, LionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
