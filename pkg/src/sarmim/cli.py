"""``sarmim`` command line: reproducible experiments from one YAML config.

Every subcommand writes into ``<out_dir>/<subcommand>/`` and leaves a
``run_config.yaml`` snapshot there.  CSV outputs start with a provenance
comment (tool, version, config hash, seed).

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, IncompatibleCheckpointError, InputError, ParameterError, SarmimError

log = logging.getLogger("sarmim")

COMMANDS = ("simulate", "extract", "pretrain", "twostep", "probe", "fewshot", "partialft", "attndist",
            "slice", "ingest", "rebalance", "sweep")


class Context:
    """Resolved config plus output helpers for one subcommand."""

    def __init__(self, cfg, command):
        from .reporting import provenance

        self.cfg = cfg
        self.command = command
        self.dir = cfg.out_dir / command
        self.dir.mkdir(parents=True, exist_ok=True)
        self.prov = provenance(cfg.config_hash(), cfg.seed)

    def snapshot(self, **resolved):
        (self.dir / "run_config.yaml").write_text(self.cfg.snapshot(self.command, resolved), encoding="utf-8")

    def csv(self, name, fields, rows):
        from .reporting import write_csv

        return write_csv(self.dir / name, fields, rows, self.prov)

    def json(self, name, payload):
        from .reporting import write_json

        return write_json(self.dir / name, dict(payload, config_hash=self.cfg.config_hash()), self.prov)


def _manifest(path):
    from .datakit import CorpusManifest

    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest {path} does not exist (run `sarmim simulate` or set paths.manifest)")
    return CorpusManifest.read(path)


def _encoder(ctx: Context):
    """The encoder under evaluation: a checkpoint, or ``random`` for an untrained one."""
    from .backbone import build_encoder
    from .checkpoint import EncoderCheckpoint, checkpoint_paths

    path = ctx.cfg.checkpoint_path
    if path == "random":
        return build_encoder(ctx.cfg.encoder_config(), ctx.cfg.seed), "random"
    npz, _ = checkpoint_paths(path)
    if not npz.exists():
        raise InputError(f"checkpoint {npz} does not exist (run `sarmim pretrain` or set paths.checkpoint)")
    return EncoderCheckpoint.load(path).build_encoder(), str(path)


def cmd_simulate(ctx: Context):
    from .specklesim import make_corpus

    corpus_cfg = ctx.cfg.corpus_config()
    corpus_cfg.out_dir = str(ctx.dir.parent / "corpus")
    manifest = make_corpus(corpus_cfg)
    counts = Counter((r.cls, r.split) for r in manifest.records)
    rows = [{"class": c, "split": s, "count": n} for (c, s), n in sorted(counts.items(), key=str)]
    ctx.csv("class_counts.csv", ["class", "split", "count"], rows)
    ctx.snapshot(manifest=Path(corpus_cfg.out_dir) / "manifest.jsonl")
    log.info("wrote %d images to %s", len(manifest), corpus_cfg.out_dir)


def _image_sources(path: Path):
    from .datakit import CorpusManifest
    from .imageio import IMAGE_SUFFIXES

    if path.is_dir():
        return sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)
    return [m.resolve(r) for m in [CorpusManifest.read(path)] for r in m.records]


def cmd_extract(ctx: Context):
    from .features import DEFAULT_SCALES, target_features
    from .imageio import read_image, write_feature_stack

    cfg = ctx.cfg
    source = cfg.path("input", cfg.manifest_path)
    if not source.exists():
        raise InputError(f"input {source} does not exist")
    kind = cfg.get("features", "kind", "mgf")
    scales = tuple(cfg.get("features", "scales", DEFAULT_SCALES))
    params = cfg.get("features", "params", {}) or {}
    files = _image_sources(source)
    if not files:
        raise InputError(f"no images found under {source}")

    def one(item):
        i, f = item
        stack = target_features(read_image(f), kind, scales, **params)
        rel = f"features/{i:05d}_{Path(f).stem}.npz"
        write_feature_stack(ctx.dir / rel, stack, {"source": str(f), "config_hash": cfg.config_hash()})
        return {"source": str(f), "archive": rel, "kind": kind, "channels": ";".join(stack.channel_names),
                "height": stack.values.shape[0], "width": stack.values.shape[1]}

    with ThreadPoolExecutor(cfg.workers) as pool:
        rows = list(pool.map(one, enumerate(files)))
    ctx.csv("index.csv", ["source", "archive", "kind", "channels", "height", "width"], rows)
    ctx.snapshot(input=source)
    log.info("extracted %s features for %d images", kind, len(rows))


def _loss_plot(ctx, record, name="loss.png"):
    from .plots import line_plot

    line_plot(ctx.dir / name, record.epochs, {"MIM loss": record.losses}, "epoch", "masked-token MSE")


def cmd_pretrain(ctx: Context):
    from .checkpoint import EncoderCheckpoint
    from .pretrain import pretrain_run

    cfg = ctx.cfg
    manifest = _manifest(cfg.manifest_path)
    init = cfg.path("init_checkpoint")
    resume = cfg.path("resume")
    ckpt, record = pretrain_run(manifest, cfg.encoder_config(), cfg.pretrain_config(),
                                init=EncoderCheckpoint.load(init) if init else None,
                                resume=EncoderCheckpoint.load(resume) if resume else None, run_dir=ctx.dir)
    ckpt.save(ctx.dir / "final")
    _loss_plot(ctx, record)
    ctx.snapshot(manifest=cfg.manifest_path, init=init, resume=resume)
    log.info("final loss %.5f after %d epochs", record.final, record.epochs[-1])


def cmd_twostep(ctx: Context):
    from .checkpoint import EncoderCheckpoint
    from .plots import head_scatter
    from .pretrain import two_step
    from .specklesim import make_corpus

    cfg = ctx.cfg
    manifest = _manifest(cfg.manifest_path)
    init = cfg.path("init_checkpoint")
    generic = cfg.path("generic_manifest")
    if init is not None:
        stage_a = EncoderCheckpoint.load(init)
    elif generic is not None:
        stage_a = _manifest(generic)
    else:
        gcfg = cfg.corpus_config(kind="generic")
        gcfg.num_images = int(cfg.get("stage_a", "num_images", gcfg.num_images))
        gcfg.num_classes = 1
        gcfg.out_dir = str(ctx.dir / "generic_corpus")
        stage_a = make_corpus(gcfg)
    attn_images = _attn_images(ctx, manifest)
    result = two_step(stage_a, cfg.pretrain_config(), cfg.encoder_config(), manifest,
                      stage_a_cfg=cfg.stage_a_config(), attn_images=attn_images, run_dir=ctx.dir)
    result.checkpoint.save(ctx.dir / "final")
    for label, rep in (("before", result.attn_before), ("after", result.attn_after)):
        head_scatter(ctx.dir / f"attention_{label}_stage_b.png", rep.distances, f"{label} stage b")
    ctx.snapshot(manifest=cfg.manifest_path, init=init, generic_manifest=generic)


def _attn_images(ctx, manifest):
    split = ctx.cfg.get("attndist", "split", "test")
    n = int(ctx.cfg.get("attndist", "num_images", 64))
    sub = manifest.filter(split=split)
    sub.records = sub.records[:n]
    from .evaluation import encoder_inputs

    images = sub.load_images()
    return encoder_inputs(images, ctx.cfg.encoder_config()).numpy() if len(images) else images


def cmd_probe(ctx: Context):
    from .evaluation import linear_probe

    manifest = _manifest(ctx.cfg.manifest_path)
    encoder, source = _encoder(ctx)
    res = linear_probe(encoder, manifest, manifest, ctx.cfg.probe_config())
    counts = res.confusion.sum(axis=1)
    rows = [{"class": c, "accuracy": a, "count": int(n)} for c, a, n in zip(res.classes, res.per_class_accuracy,
                                                                          counts)]
    rows.append({"class": "all", "accuracy": res.accuracy, "count": int(counts.sum())})
    ctx.csv("results.csv", ["class", "accuracy", "count"], rows)
    ctx.json("results.json", {"checkpoint": source, "accuracy": res.accuracy,
                              "per_class_accuracy": dict(zip(res.classes, res.per_class_accuracy)),
                              "classes": res.classes, "confusion": res.confusion.tolist()})
    ctx.snapshot(manifest=ctx.cfg.manifest_path, checkpoint=source)
    log.info("linear probe accuracy %.4f", res.accuracy)


def cmd_fewshot(ctx: Context):
    from .evaluation import FewShotTask, extract_embeddings, fewshot_from_embeddings, labeled_split
    from .plots import bar_plot

    cfg = ctx.cfg
    manifest = _manifest(cfg.manifest_path)
    encoder, source = _encoder(ctx)
    tr_img, tr_y, classes = labeled_split(manifest, "train")
    te_img, te_y, _ = labeled_split(manifest, "test", classes)
    tr_x, te_x = extract_embeddings(encoder, tr_img), extract_embeddings(encoder, te_img)
    n_way = int(cfg.get("fewshot", "n_way", len(classes)))
    shots = [int(k) for k in cfg.get("fewshot", "shots", [5])]
    episodes = int(cfg.get("fewshot", "episodes", 10))
    probe_cfg = cfg.probe_config()
    rows, ep_rows, per_class = [], [], {}
    for k in shots:
        res = fewshot_from_embeddings(tr_x, tr_y, te_x, te_y, FewShotTask(n_way, k, episodes, cfg.seed),
                                      probe_cfg, num_classes=len(classes))
        rows.append({"n_way": n_way, "k_shot": k, "episodes": episodes, "mean_accuracy": res.mean,
                     "std_accuracy": res.std})
        for ep in res.episodes:
            ep_rows.append({"k_shot": k, "episode": ep["episode"], "accuracy": ep["accuracy"],
                            "classes": ";".join(classes[c] for c in ep["classes"]), "support": ep["support"],
                            "query": ep["query"]})
            for c, acc in ep["per_class"].items():
                per_class.setdefault(k, {}).setdefault(classes[c], []).append(acc)
        log.info("%d-way %d-shot: %.4f +- %.4f", n_way, k, res.mean, res.std)
    ctx.csv("results.csv", ["n_way", "k_shot", "episodes", "mean_accuracy", "std_accuracy"], rows)
    ctx.csv("episodes.csv", ["k_shot", "episode", "accuracy", "classes", "support", "query"], ep_rows)
    ctx.json("results.json", {
        "checkpoint": source, "n_way": n_way,
        "results": [dict(r, per_class_accuracy={c: float(np.mean(v)) for c, v in sorted(per_class[r["k_shot"]]
                                                                                         .items())})
                    for r in rows]})
    bar_plot(ctx.dir / "fewshot.png", [f"{k}-shot" for k in shots], [r["mean_accuracy"] for r in rows],
             "accuracy", errors=[r["std_accuracy"] for r in rows], title=f"{n_way}-way few-shot")
    ctx.snapshot(manifest=cfg.manifest_path, checkpoint=source)


def cmd_partialft(ctx: Context):
    from .evaluation import partial_finetune
    from .plots import line_plot

    manifest = _manifest(ctx.cfg.manifest_path)
    encoder, source = _encoder(ctx)
    depth = len(encoder.blocks)
    ks = [int(k) for k in ctx.cfg.get("partialft", "k_blocks", list(range(depth + 1)))]
    rows = []
    for k in ks:
        res = partial_finetune(encoder, k, manifest, manifest, ctx.cfg.probe_config()).result
        rows.append({"k_blocks": k, "accuracy": res.accuracy})
        log.info("k=%d accuracy %.4f", k, res.accuracy)
    ctx.csv("results.csv", ["k_blocks", "accuracy"], rows)
    ctx.json("results.json", {"checkpoint": source, "results": rows})
    line_plot(ctx.dir / "partialft.png", ks, {"accuracy": [r["accuracy"] for r in rows]},
              "tuned blocks", "accuracy")
    ctx.snapshot(manifest=ctx.cfg.manifest_path, checkpoint=source)


def cmd_attndist(ctx: Context):
    from .backbone import attention_distance
    from .evaluation import encoder_inputs
    from .plots import head_scatter

    manifest = _manifest(ctx.cfg.manifest_path)
    encoder, source = _encoder(ctx)
    split = ctx.cfg.get("attndist", "split", "test")
    sub = manifest.filter(split=split)
    sub.records = sub.records[:int(ctx.cfg.get("attndist", "num_images", 64))]
    report = attention_distance(encoder, encoder_inputs(sub.load_images(), encoder.cfg).numpy())
    ctx.csv("attention_distance.csv", ["layer", "head", "mean_distance_px", "count"], list(report.rows()))
    ctx.csv("layer_means.csv", ["layer", "mean_distance_px"],
            [{"layer": i, "mean_distance_px": float(v)} for i, v in enumerate(report.layer_means())])
    head_scatter(ctx.dir / "attention_distance.png", report.distances)
    ctx.snapshot(manifest=ctx.cfg.manifest_path, checkpoint=source)


def cmd_slice(ctx: Context):
    from .datakit import slice_manifest

    source = ctx.cfg.path("input", ctx.cfg.manifest_path)
    out = slice_manifest(_manifest(source), ctx.dir, ctx.cfg.tile_policy())
    counts = Counter(r.parent or r.path for r in out.records)
    ctx.csv("tiles.csv", ["source", "tiles"], [{"source": s, "tiles": n} for s, n in counts.items()])
    ctx.snapshot(input=source)
    log.info("%d records -> %d tiles/passthroughs", len(counts), len(out))


def cmd_ingest(ctx: Context):
    from .datakit import ingest

    source = ctx.cfg.path("input")
    if source is None:
        raise ConfigError("ingest needs an input manifest (--input or paths.input)")
    rate = float(ctx.cfg.get("ingest", "max_failure_rate", 0.10))
    out = ingest(_manifest(source), ctx.dir, rate)
    ctx.csv("summary.csv", ["ingested", "failed"], [{"ingested": len(out), "failed": len(out.problems)}])
    ctx.snapshot(input=source)


def cmd_rebalance(ctx: Context):
    from dataclasses import replace

    from .datakit import CorpusManifest, rebalance

    source = ctx.cfg.path("input", ctx.cfg.manifest_path)
    src = _manifest(source)
    strategy = ctx.cfg.get("rebalance", "strategy", "none")
    out = rebalance(src, strategy, ctx.cfg.seed)
    # keep paths valid from the new manifest location
    records = [replace(r, path=Path(os.path.relpath(src.resolve(r), ctx.dir)).as_posix()) for r in out.records]
    moved = CorpusManifest(records, ctx.dir)
    moved.write(ctx.dir / "manifest.jsonl")
    before, after = src.class_counts(), out.class_counts()
    ctx.csv("class_counts.csv", ["class", "before", "after"],
            [{"class": c, "before": before[c], "after": after.get(c, 0)} for c in sorted(before, key=str)])
    ctx.snapshot(input=source)


def cmd_sweep(ctx: Context):
    from .plots import line_plot
    from .pretrain import scaling_sweep

    cfg = ctx.cfg
    manifest = _manifest(cfg.manifest_path)
    fractions = [float(f) for f in cfg.get("sweep", "fractions", [0.1, 0.5, 1.0])]
    rows = scaling_sweep(manifest, manifest, manifest, fractions, cfg.get("sweep", "dims"),
                         cfg.get("sweep", "epochs"), cfg.encoder_config(), cfg.pretrain_config(),
                         cfg.probe_config(), run_dir=ctx.dir)
    dims_keys = sorted({(tuple(r["dims"]), r["epochs"]) for r in rows})
    series = {}
    for d, e in dims_keys:
        pts = [r for r in rows if tuple(r["dims"]) == d and r["epochs"] == e]
        series[f"dims={'x'.join(map(str, d))} epochs={e}"] = [r["probe_accuracy"] for r in pts]
    line_plot(ctx.dir / "sweep.png", fractions, series, "data fraction", "linear-probe accuracy")
    ctx.snapshot(manifest=cfg.manifest_path)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}

HELP = {
    "simulate": "render a synthetic speckled corpus and its manifest",
    "extract": "compute MGF or baseline feature archives for images",
    "pretrain": "masked-image-modeling pre-training on a corpus",
    "twostep": "generic-image initialisation followed by SAR pre-training",
    "probe": "linear probe of a frozen encoder",
    "fewshot": "N-way K-shot linear-probe episodes",
    "partialft": "fine-tune the last k attention blocks plus the head",
    "attndist": "per-head mean attention distance of an encoder",
    "slice": "cut images larger than the threshold into tiles",
    "ingest": "validate and copy external images into a corpus",
    "rebalance": "equalise per-class record counts",
    "sweep": "pre-train and probe across data fractions, widths and epochs",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--workers", type=int, help="cap on parallel workers (env SARMIM_WORKERS)")
    common.add_argument("--out", type=Path, help="output root directory (env SARMIM_OUT_DIR)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="sarmim", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"sarmim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    parsers = {name: sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
               for name in COMMANDS}

    for name in ("pretrain", "twostep", "probe", "fewshot", "partialft", "attndist", "sweep"):
        parsers[name].add_argument("--manifest", type=Path, help="corpus manifest (paths.manifest)")
    for name in ("probe", "fewshot", "partialft", "attndist"):
        parsers[name].add_argument("--checkpoint", help="encoder checkpoint, or 'random' (paths.checkpoint)")
    for name in ("extract", "slice", "ingest", "rebalance"):
        parsers[name].add_argument("--input", type=Path, help="input manifest or image directory (paths.input)")
    parsers["extract"].add_argument("--kind", choices=("mgf", "pixel", "lowpass", "hog", "sarhog"),
                                    help="feature kind (features.kind)")
    parsers["extract"].add_argument("--scales", type=int, nargs="+", help="window scales r (features.scales)")
    parsers["pretrain"].add_argument("--init", type=Path, help="initial encoder checkpoint (paths.init_checkpoint)")
    parsers["pretrain"].add_argument("--resume", type=Path, help="checkpoint to resume from (paths.resume)")
    parsers["twostep"].add_argument("--init", type=Path, help="stage-a checkpoint instead of training stage a")
    parsers["twostep"].add_argument("--generic-manifest", type=Path, help="generic-image corpus for stage a")
    parsers["rebalance"].add_argument("--strategy", choices=("none", "oversample-to-max", "undersample-to-min"),
                                      help="rebalance strategy (rebalance.strategy)")
    return parser


def _overrides(args) -> dict:
    def s(v):
        return str(v) if isinstance(v, Path) else v

    get = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "seed": get("seed"), "workers": get("workers"), "out_dir": s(get("out")),
        "paths.manifest": s(get("manifest")), "paths.checkpoint": get("checkpoint"), "paths.input": s(get("input")),
        "paths.init_checkpoint": s(get("init")), "paths.resume": s(get("resume")),
        "paths.generic_manifest": s(get("generic_manifest")), "features.kind": get("kind"),
        "features.scales": get("scales"), "rebalance.strategy": get("strategy"),
    }


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    from .config import RunConfig

    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        HANDLERS[args.command](Context(cfg, args.command))
    except (ConfigError, InputError, ParameterError, IncompatibleCheckpointError) as exc:
        print(f"sarmim {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (SarmimError, OSError, RuntimeError) as exc:
        print(f"sarmim {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
