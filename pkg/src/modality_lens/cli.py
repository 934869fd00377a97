"""Command-line entry point: ``modality-lens <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import __version__
from .alignment import Triplet, make_triplets, normalize_rows_np, train_loop
from .backbone import EncoderPipeline, estimate_flops
from .checkpoint import canonical_json, load_checkpoint, save_checkpoint
from .config import RunConfig, pipeline_from_checkpoint, snapshot
from .errors import ConfigError, ContractError, DataError, LensError, NumericError
from .lens import lens_param_count
from .numerics import write_embd
from .pointcloud import PointCloud, load_pointcloud, save_pointcloud, synth_generate
from .zeroshot import build_class_embeddings, eval_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def n_workers() -> int:
    raw = os.environ.get("MODALITY_LENS_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------- datasets on disk


def write_dataset(root: Path, cfg: RunConfig) -> dict:
    names = cfg.category_names()
    manifest = {"config": cfg.to_dict(), "categories": names, "splits": {}}
    for split in ("train", "heldout"):
        samples = synth_generate(cfg.synth.spec(cfg.seed, split))
        triplets = make_triplets(samples, names, cfg.seed)
        (root / split).mkdir(parents=True, exist_ok=True)
        entries = []
        jobs = []
        for t in triplets:
            rel = f"{split}/{t.points.source_id}.pclb"
            jobs.append((t.points, root / rel))
            entries.append({
                "file": rel,
                "category": names[t.points.label],
                "image_anchor": t.image_anchor,
                "text_anchor": t.text_anchor,
                "image_pool": list(t.image_pool),
                "text_pool": list(t.text_pool),
            })
        with ThreadPoolExecutor(n_workers()) as pool:
            list(pool.map(lambda job: save_pointcloud(*job), jobs))
        manifest["splits"][split] = entries
    (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(root, split: str) -> tuple[list[Triplet], list[str]]:
    root = Path(root)
    mpath = root / MANIFEST
    if not mpath.is_file():
        raise DataError(f"dataset path not found or has no {MANIFEST}: {root}")
    manifest = json.loads(mpath.read_text())
    names = manifest["categories"]
    if split not in manifest["splits"]:
        raise DataError(f"{mpath}: no split named {split!r}")
    triplets = []
    for e in manifest["splits"][split]:
        pc = load_pointcloud(root / e["file"])
        if e["category"] not in names:
            raise DataError(f"{mpath}: unknown category {e['category']!r}")
        pc.label = names.index(e["category"])
        triplets.append(Triplet(pc, e["image_anchor"], e["text_anchor"],
                                tuple(e.get("image_pool", ())), tuple(e.get("text_pool", ()))))
    if not triplets:
        raise DataError(f"{mpath}: split {split!r} is empty")
    return triplets, names


def prefetch_patches(pipe: EncoderPipeline, clouds: list[PointCloud]) -> None:
    with ThreadPoolExecutor(n_workers()) as pool:
        list(pool.map(pipe.patches_for, clouds))


# ---------------------------------------------------------------- subcommands


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    root = Path(args.out or "data")
    manifest = write_dataset(root, cfg)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {counts} clouds to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if not args.data:
        raise DataError("train needs --data PATH (a directory written by `synth`)")
    dataset, names = read_dataset(args.data, "train")
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        # the stored config wins; --set may still adjust it (e.g. train.steps)
        config, tensors, step = load_checkpoint(args.resume)
        if args.set:
            config = RunConfig.from_dict(config).with_overrides(args.set).to_dict()
        cfg, pipe, state = pipeline_from_checkpoint(config, tensors)
        state.step = step
    else:
        pipe = cfg.build_pipeline()
        state = cfg.build_state(pipe)
    if args.dump_vit_hash:
        print(f"vit_hash initial {pipe.vit.content_hash()}")
    prefetch_patches(pipe, [t.points for t in dataset])
    config = cfg.to_dict()
    log_path = out / "metrics.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode) as log:
        def on_record(rec):
            log.write(canonical_json(rec) + "\n")

        def on_checkpoint(st):
            save_checkpoint(out / f"checkpoint-{st.step:06d}.vlck", config, snapshot(pipe, st), st.step)

        state, records = train_loop(cfg.train, dataset, pipe, state, on_record=on_record,
                                    on_checkpoint=on_checkpoint)
    save_checkpoint(out / "checkpoint.vlck", config, snapshot(pipe, state), state.step)
    (out / "run.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    if records:
        from .plotting import plot_training

        all_records = [json.loads(line) for line in log_path.read_text().splitlines()]
        plot_training(all_records, out / "loss.png")
        last = records[-1]
        print(f"step {last['step']}: loss {last['loss']:.6f} logit_scale {last['logit_scale']:.3f}")
    if args.dump_vit_hash:
        print(f"vit_hash final {pipe.vit.content_hash()}")
    print(f"checkpoint written to {out / 'checkpoint.vlck'}")
    return EXIT_OK


def _pipeline_for_eval(args):
    if args.checkpoint:
        config, tensors, step = load_checkpoint(args.checkpoint)
        cfg, pipe, state = pipeline_from_checkpoint(config, tensors)
        state.step = step
        return cfg, pipe, state
    cfg = _load_config(args)
    pipe = cfg.build_pipeline()
    return cfg, pipe, cfg.build_state(pipe)


def cmd_eval(args) -> int:
    if not args.data:
        raise DataError("eval needs --data PATH")
    cfg, pipe, state = _pipeline_for_eval(args)
    if args.dump_vit_hash:
        print(f"vit_hash {pipe.vit.content_hash()}", file=sys.stderr)
    dataset, names = read_dataset(args.data, args.split)
    clouds = [t.points for t in dataset]
    prefetch_patches(pipe, clouds)
    table = build_class_embeddings(names, cfg.eval.templates, state.text_teacher)
    report = eval_dataset(clouds, [names[t.points.label] for t in dataset], pipe, table, cfg.eval.ks)
    report["config"] = cfg.to_dict()
    report["split"] = args.split
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _emit(text, args.out)
    if args.csv:
        row = {"method": args.method, **{k: f"{v:.2f}" for k, v in report["topk"].items()}}
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
    if args.out:
        from .plotting import plot_report

        plot_report(report, Path(args.out).with_suffix(".png"))
    return EXIT_OK


def cmd_embed(args) -> int:
    if not args.input:
        raise DataError("embed needs --input FILE (.xyz or .pclb)")
    cfg, pipe, state = _pipeline_for_eval(args)
    if args.dump_vit_hash:
        print(f"vit_hash {pipe.vit.content_hash()}", file=sys.stderr)
    pc = load_pointcloud(args.input)
    feat = normalize_rows_np(pipe.encode_clouds([pc]).data)[0]
    if args.out:
        Path(args.out).write_bytes(write_embd(feat))
    else:
        print(json.dumps([float(x) for x in feat]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TINY_OVERRIDES, run_gradcheck

    base = RunConfig.load(args.config) if args.config else RunConfig().with_overrides(TINY_OVERRIDES)
    overrides = list(args.set or []) + ([f"seed={args.seed}"] if args.seed is not None else [])
    cfg = base.with_overrides(overrides) if overrides else base
    result = run_gradcheck(cfg, n_coords=args.coords)
    ok = result["max_rel_error"] < 1e-4
    result["passed"] = ok
    result["config"] = cfg.to_dict()
    _emit(json.dumps(result, indent=2, sort_keys=True) + "\n", args.out)
    print(f"gradcheck max relative error {result['max_rel_error']:.3e} "
          f"over {result['n_tensors']} tensors: {'PASS' if ok else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if ok else EXIT_NUMERIC


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def ablation_rows(cfg: RunConfig, axis: str, depths: list[int], latents: list[int]) -> list[tuple[str, RunConfig]]:
    """(label, config) pairs for one sweep, shaped like the ablation tables."""
    rows: list[tuple[str, RunConfig]] = []
    if axis in ("perceiver", "all"):
        for d in depths:
            shares = [False] if d < 2 else [False, True]
            for share in shares:
                label = f"depth={d} share={'yes' if share else 'no'}"
                rows.append((label, cfg.with_overrides([f"perceiver.depth={d}", f"perceiver.share_weights={json.dumps(share)}"])))
    if axis in ("latents", "all"):
        for m in latents:
            for use_pos in (False, True):
                label = f"latents={m} pos={'yes' if use_pos else 'no'}"
                rows.append((label, cfg.with_overrides([f"perceiver.n_latents={m}", f"vit.use_pos_embed={json.dumps(use_pos)}"])))
    if axis in ("variant", "all"):
        for variant in ("full", "perceiver_only"):
            rows.append((f"variant={variant}", cfg.with_overrides([f"pipeline.variant={variant}"])))
    if axis in ("unlock", "all"):
        nb = cfg.vit.n_blocks
        half = max(1, nb // 2)
        sels = ["none", "cls", "cls+proj", f"cls+proj+blocks:1-{half}", f"cls+proj+blocks:{nb - half + 1}-{nb}", "all"]
        base = cfg.with_overrides([
            "pipeline.variant=pointembed_to_vit",
            f"patch.n_groups={cfg.vit.pretrained_seq_len}",
            f"embed.token_dim={cfg.vit.embed_dim}",
        ])
        for sel in sels:
            rows.append((f"unlock={sel}", base.with_overrides([f"pipeline.unlock={sel}"])))
    if not rows:
        raise UsageError(f"unknown ablation axis {axis!r}")
    return rows


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    rows_cfg = ablation_rows(cfg, args.axis, _int_list(args.depths), _int_list(args.latents))
    data = heldout = None
    if args.train_steps:
        if not args.data:
            raise DataError("ablate --train-steps needs --data PATH")
        data, names = read_dataset(args.data, "train")
        heldout, _ = read_dataset(args.data, "heldout")
    rows = []
    for label, rc in rows_cfg:
        pipe = rc.build_pipeline()
        row = {
            "label": label,
            "variant": rc.pipeline.variant,
            "depth": rc.perceiver.depth,
            "share_weights": rc.perceiver.share_weights,
            "n_latents": rc.perceiver.n_latents,
            "use_pos": rc.vit.use_pos_embed,
            "unlock": rc.pipeline.unlock,
            "lens_params": lens_param_count(rc.embed, rc.perceiver),
            "trainable_params": pipe.trainable_count(),
            "flops": estimate_flops(pipe),
            "top1": "",
        }
        if args.train_steps:
            rc = rc.with_overrides([f"train.steps={args.train_steps}"])
            state = rc.build_state(pipe)
            train_loop(rc.train, data, pipe, state)
            table = build_class_embeddings(names, rc.eval.templates, state.text_teacher)
            rep = eval_dataset([t.points for t in heldout], [names[t.points.label] for t in heldout], pipe, table)
            row["top1"] = f"{rep['topk']['top1']:.2f}"
        rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _emit(buf.getvalue(), args.out)
    if args.out:
        from .plotting import plot_ablation

        out = Path(args.out)
        plot_ablation(rows, out.with_suffix(".png"))
        out.with_suffix(".config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- dispatch


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--out", metavar="PATH", help="output file or directory")
    common.add_argument("--set", action="append", metavar="K=V", help="override a config key (repeatable)")
    common.add_argument("--dump-vit-hash", action="store_true", help="print the ViT weight hash")

    p = _Parser(prog="modality-lens", description="Point-cloud lens into a frozen ViT.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic triplet dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train the lens by contrastive alignment")
    s.add_argument("--data", metavar="PATH")
    s.add_argument("--resume", metavar="CKPT")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="zero-shot classification report")
    s.add_argument("--data", metavar="PATH")
    s.add_argument("--checkpoint", metavar="CKPT")
    s.add_argument("--split", default="heldout")
    s.add_argument("--csv", metavar="PATH", help="also write a method,top1,top3,top5 row")
    s.add_argument("--method", default="lens")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("embed", parents=[common], help="embed one point cloud file")
    s.add_argument("--input", metavar="FILE")
    s.add_argument("--checkpoint", metavar="CKPT")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("gradcheck", parents=[common], help="autodiff vs central differences")
    s.add_argument("--coords", type=int, default=64, help="coordinates sampled per tensor")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ablate", parents=[common], help="sweep ablation axes, emit CSV")
    s.add_argument("--axis", default="perceiver", choices=["perceiver", "latents", "variant", "unlock", "all"])
    s.add_argument("--depths", default="2,4,6,8")
    s.add_argument("--latents", default="8,16,24,32")
    s.add_argument("--train-steps", type=int, default=0)
    s.add_argument("--data", metavar="PATH")
    s.set_defaults(func=cmd_ablate)
    return p


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, ContractError, LensError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DATA
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
