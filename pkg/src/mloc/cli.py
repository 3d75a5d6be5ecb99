"""Command-line entry point: ``mloc <subcommand> ...``.

Settings resolve as CLI flag > ``--config`` file > built-in default, and every
run prints the resolved values before doing any work.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .catalog import DEFAULT_CATALOG, OTHER
from .dataio import (
    SyntheticSpec,
    export_latents,
    generate_synthetic,
    load_image,
    load_records,
    read_config,
    read_manifest,
)
from .embedder import build_embedder, build_embedding_head, embed_images, ingest_embeddings
from .errors import MlocError
from .inference import SupportIndex, batch_classify, read_predictions, write_predictions
from .metrics import evaluate, format_report, roc_curves, write_roc_points
from .ndiff import Dense, load_checkpoint, save_checkpoint
from .sequence import classify_video, frame_labels, hop_length, read_video_manifest, read_windows, write_windows
from .siamese import MixupConfig, TrainConfig, gradient_audit, train, write_loss_trace

logger = logging.getLogger("mloc")

DEFAULTS = {
    "seed": 0,
    "tau": 0.5,
    "alpha": 2.0,
    "mixes_per_pair": 50,
    "fps": 5,
    "episodes": 200,
    "pairs_per_episode": 32,
    "learning_rate": 1e-3,
    "mixed_share": 0.5,
    "mixup": True,
    "image_size": 64,
    "modality": "WCE",
    "noise": 0.1,
    "n_classes": 10,
    "support_per_class": 5,
    "eval_per_class": 24,
    "unknown_class": False,
    "unknown_eval": 24,
    "tolerance": 1e-4,
}
ECHOED = ("seed", "tau", "alpha", "mixes_per_pair", "fps", "hop")


def _coerce(key, value):
    kind = type(DEFAULTS[key])
    if kind is bool and isinstance(value, str):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise MlocError(f"config key {key}: expected a boolean, got {value!r}")
    try:
        return kind(value)
    except ValueError:
        raise MlocError(f"config key {key}: cannot read {value!r} as {kind.__name__}") from None


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    explicit = set()
    if getattr(args, "config", None):
        for key, value in read_config(args.config).items():
            if key not in DEFAULTS:
                raise MlocError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
            explicit.add(key)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
            explicit.add(key)
    if "fps" not in explicit and getattr(args, "video", None):
        # a video's own frame rate beats the built-in default
        cfg["fps"] = read_video_manifest(args.video).fps
    cfg["hop"] = hop_length(cfg["fps"])
    return cfg


def _echo(cfg):
    print("config " + " ".join(f"{k}={cfg[k]}" for k in ECHOED), flush=True)


# ------------------------------------------------------------------ helpers


def _support_inputs(manifest, cfg, table):
    records = manifest.select(split="support", modality=cfg["modality"])
    if not records:
        raise MlocError(f"manifest has no support records for modality {cfg['modality']}")
    labels = np.array([r.index for r in records])
    if table is not None:
        return np.stack([_table_vector(table, r.item_id) for r in records]), labels
    return load_records(manifest, records, cfg["image_size"]), labels


def _table_vector(table, item_id):
    if item_id not in table.vectors:
        raise MlocError(f"no embedding for item {item_id!r}")
    return table.vectors[item_id]


def _embed(network, inputs, table_mode):
    """Unit embeddings for images (N,H,W,3) or external vectors (N,64)."""
    if table_mode:
        net = network.astype(np.float64)
        out = np.concatenate([net.forward(inputs[i:i + 1], retain=False) for i in range(len(inputs))])
        return out
    return embed_images(inputs, network)


def _load_model(args):
    network = load_checkpoint(args.checkpoint)
    table_mode = isinstance(network.layers[0], Dense)
    table = None
    if table_mode:
        if not args.embeddings:
            raise MlocError("checkpoint holds an embedding head; pass --embeddings")
        table = ingest_embeddings(args.embeddings)
    return network, table


def _support_index(network, manifest, cfg, table):
    inputs, labels = _support_inputs(manifest, cfg, table)
    return SupportIndex.from_arrays(_embed(network, inputs, table is not None), labels, cfg["modality"])


# -------------------------------------------------------------- subcommands


def cmd_gen_synth(args, cfg):
    spec = SyntheticSpec(seed=cfg["seed"], n_classes=cfg["n_classes"],
                         support_per_class=cfg["support_per_class"], eval_per_class=cfg["eval_per_class"],
                         image_size=cfg["image_size"], noise=cfg["noise"], unknown_class=cfg["unknown_class"],
                         unknown_eval=cfg["unknown_eval"], fps=cfg["fps"], modality=cfg["modality"])
    manifest, video = generate_synthetic(spec, args.out)
    print(f"wrote {len(manifest.records)} images, video of {len(video.frames)} frames to {args.out}")
    return 0


def cmd_train(args, cfg):
    manifest = read_manifest(args.manifest)
    table = ingest_embeddings(args.embeddings) if args.embeddings else None
    inputs, labels = _support_inputs(manifest, cfg, table)
    if table is not None:
        network = build_embedding_head(seed=cfg["seed"])
    else:
        network = build_embedder(seed=cfg["seed"])
        inputs = inputs.transpose(0, 3, 1, 2)
    tc = TrainConfig(episodes=cfg["episodes"], pairs_per_episode=cfg["pairs_per_episode"], seed=cfg["seed"],
                     mixup_enabled=cfg["mixup"], learning_rate=cfg["learning_rate"],
                     mixed_share=cfg["mixed_share"])
    result = train(network, inputs, labels, tc, MixupConfig(cfg["alpha"], cfg["mixes_per_pair"]))
    save_checkpoint(network, args.out)
    if args.loss_trace:
        write_loss_trace(args.loss_trace, result.losses)
    print(f"trained {result.episodes_run} episodes, final loss {result.losses[-1]:.6f}; wrote {args.out}")
    return 0


def cmd_classify_frame(args, cfg):
    network, table = _load_model(args)
    manifest = read_manifest(args.manifest)
    index = _support_index(network, manifest, cfg, table)
    records = manifest.select(split="eval", modality=cfg["modality"])
    if table is not None:
        inputs = np.stack([_table_vector(table, r.item_id) for r in records])
    else:
        inputs = load_records(manifest, records, cfg["image_size"])
    preds = batch_classify(_embed(network, inputs, table is not None), index, cfg["tau"])
    write_predictions(args.out, [r.item_id for r in records], preds)
    n_other = sum(p.label == OTHER for p in preds)
    print(f"classified {len(preds)} frames ({n_other} Other); wrote {args.out}")
    return 0


def cmd_classify_video(args, cfg):
    network, table = _load_model(args)
    manifest = read_manifest(args.manifest)
    video = read_video_manifest(args.video)
    video.fps = cfg["fps"]
    index = _support_index(network, manifest, cfg, table)
    root = Path(args.video).parent

    net64 = network.astype(np.float64)
    if table is not None:
        def resolve(frame_id, ref):
            return net64.forward(table.vectors[ref][None], retain=False)[0]
    else:
        def resolve(frame_id, ref):
            p = Path(ref)
            return embed_images(load_image(p if p.is_absolute() else root / p, cfg["image_size"]), net64)[0]

    result = classify_video(video, index, resolve, cfg["tau"])
    write_windows(args.out, result.windows)
    if args.frames_out:
        write_predictions(args.frames_out, result.frame_ids, result.frame_predictions)
    print(f"{len(result.windows)} windows over {len(result.frame_ids)} frames; wrote {args.out}")
    return 0


def cmd_evaluate(args, cfg):
    manifest = read_manifest(args.manifest)
    truth_of = {r.item_id: r.index for r in manifest.records}
    rocs = None
    if args.windows:
        if not args.video:
            raise MlocError("--windows needs --video for the frame order")
        video = read_video_manifest(args.video)
        ids = video.frame_ids
        predicted = frame_labels(read_windows(args.windows), len(ids))
    else:
        if not args.predictions:
            raise MlocError("pass --predictions or --windows")
        ids, preds = read_predictions(args.predictions)
        predicted = [p.label for p in preds]
        classes = sorted({c for p in preds for c in p.per_class_median})
        scores = {c: [-p.per_class_median.get(c, np.inf) for p in preds] for c in classes}
    missing = [i for i in ids if i not in truth_of]
    if missing:
        raise MlocError(f"no ground truth for frame {missing[0]!r}")
    truth = [truth_of[i] for i in ids]
    if not args.windows:
        rocs = roc_curves(scores, truth)
    report = evaluate(predicted, truth)
    text = format_report(report, DEFAULT_CATALOG, rocs)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.roc and rocs:
        write_roc_points(args.roc, rocs)
    sys.stdout.write(text)
    return 0


def cmd_export_latents(args, cfg):
    network = load_checkpoint(args.checkpoint)
    if isinstance(network.layers[0], Dense):
        raise MlocError("export-latents needs an image embedder checkpoint")
    manifest = read_manifest(args.manifest)
    vectors = export_latents(manifest, network, args.out, target_size=cfg["image_size"])
    print(f"exported {len(vectors)} embeddings to {args.out}")
    return 0


def cmd_grad_check(args, cfg):
    reports = gradient_audit(seed=cfg["seed"], tolerance=cfg["tolerance"])
    ok = True
    for name, report in reports.items():
        ok &= report.passed
        print(f"[{'PASS' if report.passed else 'FAIL'}] {name}")
        for line in report.lines():
            print("    " + line)
    print("all gradients match" if ok else "gradient check FAILED")
    return 0 if ok else 1


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mloc", description="Few-shot GI-tract frame localization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p):
        p.add_argument("--config", help="flat key=value file; CLI flags override it")
        p.add_argument("--seed", type=int)
        return p

    def model(p):
        p.add_argument("--tau", type=float, help="rejection threshold on the winning median")
        p.add_argument("--modality", choices=("CE", "WCE"))
        p.add_argument("--image-size", dest="image_size", type=int)
        return p

    p = common(sub.add_parser("gen-synth", help="write a seeded synthetic dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float)
    p.add_argument("--n-classes", dest="n_classes", type=int)
    p.add_argument("--support-per-class", dest="support_per_class", type=int)
    p.add_argument("--eval-per-class", dest="eval_per_class", type=int)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--fps", type=int)
    p.add_argument("--modality", choices=("CE", "WCE"))
    p.add_argument("--unknown-class", dest="unknown_class", action="store_const", const=True)
    p.add_argument("--unknown-eval", dest="unknown_eval", type=int)
    p.set_defaults(func=cmd_gen_synth)

    p = model(common(sub.add_parser("train", help="train the embedder on a manifest's support split")))
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--embeddings", help="train a dense head on this embedding file instead of images")
    p.add_argument("--loss-trace", dest="loss_trace")
    p.add_argument("--episodes", type=int)
    p.add_argument("--pairs-per-episode", dest="pairs_per_episode", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mixes-per-pair", dest="mixes_per_pair", type=int)
    p.add_argument("--mixed-share", dest="mixed_share", type=float)
    p.add_argument("--no-mixup", dest="mixup", action="store_const", const=False)
    p.set_defaults(func=cmd_train)

    p = model(common(sub.add_parser("classify-frame", help="classify every eval record of a manifest")))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify_frame)

    p = model(common(sub.add_parser("classify-video", help="windowed, order-repaired video labels")))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="dataset manifest holding the support set")
    p.add_argument("--video", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--fps", type=int)
    p.add_argument("--out", required=True, help="window table")
    p.add_argument("--frames-out", dest="frames_out", help="per-frame prediction dump")
    p.set_defaults(func=cmd_classify_video)

    p = common(sub.add_parser("evaluate", help="metrics against manifest ground truth"))
    p.add_argument("--manifest", required=True)
    p.add_argument("--predictions")
    p.add_argument("--windows")
    p.add_argument("--video")
    p.add_argument("--out")
    p.add_argument("--roc", help="write ROC points here")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("export-latents", help="embed every manifest record"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)

    p = common(sub.add_parser("grad-check", help="finite-difference audit of all gradients"))
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _echo(cfg)
        return args.func(args, cfg)
    except (MlocError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
