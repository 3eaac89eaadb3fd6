"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 rewrite-engine transport failure with fallback disabled.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pool as poolmod
from .config import ConfigError, GenerationConfig, MissingArtifactError, load_config, parse_eta
from .denoiser import load_denoiser, train_denoiser
from .embedder import make_embedder
from .npnet import build_dataset, train_npnet
from .pipeline import (
    check_schedule,
    evaluate,
    generate,
    load_artifacts,
    run_experiment,
    sampling_schedule,
    sweep,
    MetricRecord,
    RunReport,
)
from .report import format_records, format_table, plot_arms, write_report
from .schedule import BetaSpec, make_schedule
from .spr import TransportError
from .tensorio import Record, read_collection, write_collection
from .toy import make_toy_dataset

logger = logging.getLogger("posgen")

EXIT_CONFIG, EXIT_MISSING, EXIT_TRANSPORT = 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML key-value config file")
    p.add_argument("--arm", choices=["baseline", "ona", "spr", "pos", "pos_star"])
    p.add_argument("--eta", help="mixture weight; 'inf' keeps only the inverted noise")
    p.add_argument("--gamma", type=float, help="fraction of steps conditioned on the rewritten prompt")
    p.add_argument("--steps", type=int, help="DDIM sampling steps T")
    p.add_argument("--train-steps", type=int, help="length of the training noise schedule")
    p.add_argument("--refs-k", type=int, dest="k", help="reference sentences for rewriting")
    p.add_argument("--seed", type=int)
    p.add_argument("--pool")
    p.add_argument("--denoiser")
    p.add_argument("--npnet")
    p.add_argument("--embedder-file", help="precomputed text embeddings (text<TAB>values)")
    p.add_argument("--llm-endpoint")
    p.add_argument("--llm-mock", choices=["identity", "prefix", "fixture", "none"])
    p.add_argument("--llm-fixture")
    p.add_argument("--no-fallback", action="store_true", help="fail instead of keeping the original prompt")
    p.add_argument("--workers", type=int)
    p.add_argument("--out")


def _config(args) -> GenerationConfig:
    overrides = {
        k: getattr(args, k, None)
        for k in ("arm", "gamma", "steps", "train_steps", "k", "seed", "pool", "denoiser", "npnet",
                  "embedder_file", "llm_endpoint", "llm_fixture", "workers", "out")
    }
    if getattr(args, "eta", None) is not None:
        overrides["eta"] = parse_eta(args.eta)
    mock = getattr(args, "llm_mock", None)
    if mock and mock != "none":
        overrides["llm_mock"] = mock
    cfg = load_config(getattr(args, "config", None), overrides)
    if mock == "none":
        # None overrides are skipped, so switch the mock off explicitly
        cfg = cfg.replace(llm_mock=None)
    if getattr(args, "no_fallback", False):
        cfg = cfg.replace(llm_fallback=False)
    return cfg


def _require_dir(path: str | None, what: str) -> Path:
    if not path or not (Path(path) / "manifest.json").exists():
        raise MissingArtifactError(f"{what} directory not found: {path}")
    return Path(path)


# -- subcommands -------------------------------------------------------------------


def cmd_dataset_gen(args) -> int:
    videos = make_toy_dataset(args.count, args.seed, args.split, frames=args.frames, size=args.size)
    records = [Record(v.id, v.caption, v.latent, {"mid_x": v.params.mid_x, "mid_y": v.params.mid_y}) for v in videos]
    meta = {"format": "posgen-dataset", "seed": args.seed, "split": args.split}
    write_collection(args.out, records, meta)
    print(f"wrote {len(records)} {args.split} videos to {args.out}")
    return 0


def cmd_pool_build(args) -> int:
    records, _ = read_collection(_require_dir(args.data, "dataset"))
    if args.limit:
        records = poolmod.subsample(records, args.limit, args.seed)
    embedder = make_embedder("table", args.embedder_file) if args.embedder_file else make_embedder("hash")
    pool = poolmod.build([(r.text, r.latent) for r in records], embedder, ids=[r.id for r in records])
    pool.save(args.out)
    print(f"built pool of N={len(pool)} at {args.out}")
    return 0


def cmd_train_denoiser(args) -> int:
    cfg = _config(args)
    records, _ = read_collection(_require_dir(args.data, "dataset"))
    embedder = make_embedder("table", cfg.embedder_file) if cfg.embedder_file else make_embedder(cfg.embedder)
    data = [(r.latent.astype(np.float64), embedder.embed(r.text)) for r in records]
    schedule = make_schedule(cfg.train_steps, BetaSpec.linear(cfg.beta_start, cfg.beta_end))
    model, trace = train_denoiser(
        data, embedder.dims, schedule, args.iterations, cfg.seed,
        hidden_width=args.hidden, layer_count=args.layers, prior_rank=args.prior_rank,
        batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer,
        cond_drop=args.cond_drop, log_every=args.log_every,
    )
    model.save(args.out_ckpt)
    _write_trace(args.out_ckpt, trace)
    print(f"trained denoiser for {len(trace)} steps, final loss {trace[-1].loss:.5f} -> {args.out_ckpt}")
    return 0


def cmd_train_npnet(args) -> int:
    cfg = _config(args)
    pool = poolmod.load(_require_dir(cfg.pool, "pool"))
    if not cfg.denoiser or not Path(cfg.denoiser).exists():
        raise MissingArtifactError(f"denoiser checkpoint not found: {cfg.denoiser}")
    denoiser = load_denoiser(cfg.denoiser)
    sched = sampling_schedule(cfg)
    check_schedule(denoiser, sched)
    dataset = build_dataset(pool, sched, denoiser, args.limit or len(pool), cfg.seed)
    net, trace = train_npnet(
        dataset, args.iterations, cfg.seed,
        hidden_width=args.hidden, layer_count=args.layers, prior=args.prior, sample_steps=args.sample_steps,
        batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer, log_every=args.log_every,
    )
    net.save(args.out_ckpt)
    _write_trace(args.out_ckpt, trace)
    print(f"trained noise network on {len(dataset)} pairs for {len(trace)} steps -> {args.out_ckpt}")
    return 0


def _write_trace(ckpt: str, trace) -> None:
    lines = ["step\tloss"] + [f"{r.step}\t{r.loss!r}" for r in trace]
    Path(str(ckpt) + ".loss.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_generate(args) -> int:
    cfg = _config(args)
    prompts = list(args.prompt or [])
    if args.prompts_file:
        prompts += [ln.strip() for ln in Path(args.prompts_file).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not prompts:
        raise ConfigError("no prompts given")
    art = load_artifacts(cfg)
    report = RunReport(cfg.hash, prompts, [])
    for i, prompt in enumerate(prompts):
        seed = cfg.seed + i
        g = generate(prompt, cfg, art, seed)
        report.seeds.append(seed)
        report.generations.setdefault(cfg.arm, []).append(g)
        print(json.dumps(g.record(), ensure_ascii=False))
    if cfg.out:
        write_report(report, cfg.out, images=args.images, figures=False)
    return 0


def _load_prompts_and_refs(args):
    refs = None
    if args.eval_data:
        records, _ = read_collection(_require_dir(args.eval_data, "evaluation data"))
        if args.limit:
            records = records[: args.limit]
        prompts = [r.text for r in records]
        refs = [r.latent.astype(np.float64) for r in records]
    elif args.prompts_file:
        prompts = [ln.strip() for ln in Path(args.prompts_file).read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        raise ConfigError("give --eval-data or --prompts-file")
    if not prompts:
        raise ConfigError("no prompts")
    return prompts, refs


def cmd_experiment(args) -> int:
    cfg = _config(args)
    prompts, refs = _load_prompts_and_refs(args)
    if args.sweep:
        param, _, values = args.sweep.partition("=")
        if param not in ("eta", "gamma") or not values:
            raise ConfigError("--sweep takes eta=v1,v2,... or gamma=v1,v2,...")
        parsed = [parse_eta(v) if param == "eta" else float(v) for v in values.split(",")]
        art = load_artifacts(cfg, [cfg.arm])
        report = sweep(param, parsed, prompts, cfg.arm, cfg, art, refs)
    else:
        arms = [a.strip() for a in args.arms.split(",") if a.strip()]
        for a in arms:
            cfg.replace(arm=a)  # validates the arm name
        art = load_artifacts(cfg, arms)
        report = run_experiment(prompts, arms, cfg, art, refs)
    sys.stdout.write(format_table(report.metrics))
    if cfg.out:
        write_report(report, cfg.out, images=args.images)
        print(f"report written to {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    gen, gmeta = read_collection(_require_dir(args.generated, "generated"))
    ref = None
    if args.reference:
        ref_recs, _ = read_collection(_require_dir(args.reference, "reference"))
        ref = [r.latent.astype(np.float64) for r in ref_recs]
    embedder = make_embedder("table", args.embedder_file) if args.embedder_file else make_embedder("hash")
    tag = gmeta.get("config_hash", "")
    groups: dict[str, list[Record]] = {}
    for r in gen:
        groups.setdefault(str(r.extra.get("arm", "generated")), []).append(r)
    records = []
    for arm, recs in groups.items():
        scores = evaluate([r.latent.astype(np.float64) for r in recs], [r.text for r in recs], embedder, ref)
        records += [MetricRecord(k, arm, v, tag) for k, v in scores.items()]
    sys.stdout.write(format_table(records))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.tsv").write_text(format_records(records), encoding="utf-8")
        (out / "table.txt").write_text(format_table(records), encoding="utf-8")
        plot_arms(records, out / "metrics.svg")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posgen", description="Prompt optimization for diffusion sampling on a toy video task.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    p = ds.add_parser("gen", help="generate toy moving-blob videos")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dataset_gen)

    pl = sub.add_parser("pool").add_subparsers(dest="action", required=True)
    p = pl.add_parser("build", help="embed a dataset into a retrieval pool")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="uniformly subsample this many entries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--embedder-file")
    p.set_defaults(func=cmd_pool_build)

    tr = sub.add_parser("train").add_subparsers(dest="action", required=True)
    for name, func in (("denoiser", cmd_train_denoiser), ("npnet", cmd_train_npnet)):
        p = tr.add_parser(name)
        _add_config_flags(p)
        p.add_argument("--iterations", type=int, default=3000 if name == "denoiser" else 2000)
        p.add_argument("--hidden", type=int, default=256)
        p.add_argument("--layers", type=int, default=2)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--optimizer", choices=["sgd", "adam"], default="adam")
        p.add_argument("--log-every", type=int, default=0)
        p.add_argument("--checkpoint", dest="out_ckpt", required=True)
        if name == "denoiser":
            p.add_argument("--data", required=True)
            p.add_argument("--cond-drop", type=float, default=0.1)
            p.add_argument("--prior-rank", type=int, default=256, help="0 for a per-element Gaussian prior")
        else:
            p.add_argument("--limit", type=int)
            p.add_argument("--prior", choices=["data", "unit"], default="data")
            p.add_argument("--sample-steps", type=int, default=10)
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="generate latents for prompts under one arm")
    _add_config_flags(p)
    p.add_argument("--prompt", action="append")
    p.add_argument("--prompts-file")
    p.add_argument("--images", action="store_true", help="also write PGM frame strips")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("experiment", help="paired comparison of arms, or a parameter sweep")
    _add_config_flags(p)
    p.add_argument("--arms", default="baseline,ona,spr,pos")
    p.add_argument("--sweep", help="eta=0,0.5,inf or gamma=0,0.5,1 (uses --arm)")
    p.add_argument("--eval-data", help="dataset directory whose captions are prompts and latents references")
    p.add_argument("--prompts-file")
    p.add_argument("--limit", type=int)
    p.add_argument("--images", action="store_true")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("eval", help="score a directory of generated latents")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference")
    p.add_argument("--embedder-file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except TransportError as e:
        print(f"rewrite engine failed: {e}", file=sys.stderr)
        return EXIT_TRANSPORT


if __name__ == "__main__":
    sys.exit(main())
