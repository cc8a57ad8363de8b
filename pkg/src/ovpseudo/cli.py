"""``ovpseudo`` command-line front end."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import anchors, cbl_loss, evaluation, preprocess
from .annotations import CocoError, Dataset, InstanceMask, emit_coco, parse_coco, tight_bbox
from .config import ConfigError, RunConfig, load_config, override
from .cot_engine import backends as be
from .cot_engine.pipeline import PipelineConfig, run_pipeline
from .cot_engine.proposals import load_proposals
from .io import atomic_write_text, read_jsonl, write_jsonl

log = logging.getLogger("ovpseudo")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
GRADCHECK_TOLERANCE = 1e-5


class CommandFailed(RuntimeError):
    """A command ran to completion but its check did not pass."""


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write_json(path: Path, obj) -> None:
    atomic_write_text(path, _dump_json(obj))


def _load_dataset(cfg: RunConfig, load_masks: bool = True) -> Dataset:
    return parse_coco(cfg.dataset.annotations, split=cfg.dataset.split, load_masks=load_masks)


def _temps(cfg: RunConfig) -> cbl_loss.Temperatures:
    t = cfg.temperatures
    return cbl_loss.Temperatures(t.tau_bag, t.tau_bg, t.tau_cls, t.tau_individual)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> int:
    required = ["dataset.annotations", "dataset.proposals"]
    required.append("backend.manifest" if cfg.backend.kind == "mock" else "backend.endpoint")
    cfg.validate(tuple(required))
    dataset = _load_dataset(cfg)
    proposals = load_proposals(cfg.dataset.proposals)
    max_retries = cfg.backend.max_retries
    if cfg.backend.kind == "mock":
        backend = be.MockBackend.from_manifest(cfg.backend.manifest)
    else:
        endpoint = be.load_endpoint_config(cfg.backend.endpoint)
        backend = be.HTTPBackend(endpoint["base_url"], float(endpoint.get("timeout", 60.0)),
                                 params=endpoint.get("params"))
        max_retries = int(endpoint.get("max_retries", max_retries))
    pconf = PipelineConfig(
        mode=preprocess.Mode(cfg.preprocess.mode),
        ksize=cfg.preprocess.ksize,
        sigma=cfg.preprocess.sigma,
        blur_scope=preprocess.BlurScope(cfg.preprocess.blur_scope),
        dedup_iou=cfg.thresholds.dedup_iou,
        max_retries=max_retries,
        retry_backoff=cfg.backend.retry_backoff,
        max_in_flight=cfg.jobs,
    )
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    scratch = out / ".transcript.partial.jsonl"
    scratch.unlink(missing_ok=True)
    transcript = be.Transcript(scratch)
    try:
        result = run_pipeline(dataset, proposals, backend, pconf, images_root=cfg.dataset.images_root,
                              transcript=transcript)
    finally:
        if hasattr(backend, "close"):
            backend.close()
    records = list(read_jsonl(scratch)) if scratch.exists() else []
    if cfg.deterministic:
        steps = {"verify": 0, "label": 1, "ground": 2}
        records.sort(key=lambda r: (r["image_id"], r["proposal_index"], steps[r["step"]], r["attempt"]))
    write_jsonl(out / "transcript.jsonl", records)
    scratch.unlink(missing_ok=True)

    pseudo = Dataset(dataset.images, result.annotations, dataset.base_classes, dataset.novel_classes,
                     dict(dataset.categories))
    emit_coco(pseudo, out / "pseudo_annotations.json")
    write_jsonl(out / "unsure.jsonl", result.unsure_log)
    _write_json(out / "histogram.json", result.histogram_json())
    _write_json(out / "counts.json", {"total": result.counts,
                                      "per_image": {str(k): v for k, v in sorted(result.per_image.items())}})
    _write_json(out / "run_config.json", cfg.to_json())
    c = result.counts
    print(f"proposals={c['proposals']} filtered={c['filtered']} emitted={c['emitted']} no={c['no']} "
          f"unsure={c['unsure']} parse_error={c['parse_error']}")
    print(f"wrote {len(result.annotations)} pseudo annotations to {out / 'pseudo_annotations.json'}")
    return EXIT_OK


def _read_histogram(path: Path) -> tuple[dict, dict]:
    obj = json.loads(Path(path).read_text())
    if "histogram" not in obj:
        raise ValueError(f"{path}: expected a 'histogram' key")
    return obj["histogram"], obj.get("grounding", {})


def cmd_filter(cfg: RunConfig) -> int:
    cfg.validate()
    mode = anchors.ThresholdMode(cfg.thresholds.anchor_mode)
    required = ["eval.histogram"]
    if mode is anchors.ThresholdMode.MIN or cfg.eval.pseudo is not None:
        required.append("dataset.annotations")
    cfg.validate(tuple(required))
    hist, votes = _read_histogram(cfg.eval.histogram)
    dataset = _load_dataset(cfg, load_masks=False) if cfg.dataset.annotations is not None else None
    threshold = anchors.resolve_threshold(mode, dataset)
    anchor_set = anchors.filter_anchors(hist, anchors.aggregate_grounding(votes), threshold)
    base = dataset.base_classes if dataset is not None else set()
    merged = anchors.merge_open_world_base(base, anchor_set)

    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    anchor_set.write(out / "anchors.json")
    _write_json(out / "open_world_categories.json", {
        "base": sorted(base),
        "foreground_anchors": sorted(anchor_set.foreground),
        "categories": sorted(merged),
    })
    if cfg.eval.pseudo is not None:
        pseudo = parse_coco(cfg.eval.pseudo)
        kept = anchors.cbl_plus_plus_filter(pseudo.annotations, dataset.novel_classes)
        filtered = Dataset(pseudo.images, kept, dataset.base_classes, dataset.novel_classes,
                           dict(pseudo.categories))
        emit_coco(filtered, out / "cbl_pp_annotations.json")
        print(f"CBL++ kept {len(kept)} of {len(pseudo.annotations)} pseudo annotations")
    _write_json(out / "run_config.json", cfg.to_json())
    print(f"anchor threshold ({mode.value}): {threshold}")
    print(f"foreground={len(anchor_set.foreground)} background={len(anchor_set.background)} "
          f"outliers={len(anchor_set.outliers)} open_world_classes={len(merged)}")
    return EXIT_OK


def _read_vocabulary(path: Path) -> list[str]:
    text = Path(path).read_text()
    if path.suffix == ".json":
        obj = json.loads(text)
        if isinstance(obj, dict):
            return [c["name"] for c in obj["categories"]]
        return [str(c) for c in obj]
    return [line.strip() for line in text.splitlines() if line.strip()]


def cmd_stats(cfg: RunConfig) -> int:
    cfg.validate(("eval.histogram",))
    hist, _ = _read_histogram(cfg.eval.histogram)
    unsure = 0
    if cfg.eval.counts is not None:
        unsure = int(json.loads(cfg.eval.counts.read_text())["total"]["unsure"])
    vocabs = {name: _read_vocabulary(p) for name, p in sorted(cfg.eval.vocabularies.items())}
    report = anchors.stats_report(hist, unsure, vocabs)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "stats.json", report.to_json())
    atomic_write_text(out / "stats.txt", report.to_table())
    print(report.to_table(), end="")
    return EXIT_OK


def _loss_inputs(cfg: RunConfig):
    bags = cbl_loss.load_bags(cfg.loss.text, cfg.loss.image)
    bank = cbl_loss.load_background_bank(cfg.loss.background) if cfg.loss.background else \
        cbl_loss.BackgroundBank.empty()
    return bags, bank


def cmd_loss(cfg: RunConfig) -> int:
    cfg.validate(("loss.text", "loss.image"))
    bags, bank = _loss_inputs(cfg)
    temps = _temps(cfg)
    cbl = cbl_loss.cbl_bag_loss(bags, bank, temps)
    base = cbl_loss.baseline_bag_loss(bags, temps)
    report = {"bags": len(bags), "backgrounds": bank.size, "cbl_loss": cbl, "baseline_loss": base,
              "p_tv": [cbl_loss.p_tv(k, bags, bank, temps) for k in range(len(bags))],
              "p_vt": [cbl_loss.p_vt(k, bags, bank, temps) for k in range(len(bags))]}
    if cfg.loss.steps > 0:
        if bank.size == 0:
            raise ConfigError("loss.steps > 0 needs a background embedding file")
        _, trace = cbl_loss.gradient_descent_background(bank, bags, temps, cfg.loss.steps, cfg.loss.lr)
        report["descent"] = {"steps": cfg.loss.steps, "lr": cfg.loss.lr, "trace": trace}
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "loss.json", report)
    print(f"bags={len(bags)} backgrounds={bank.size}")
    print(f"cbl_loss      {cbl!r}")
    print(f"baseline_loss {base!r}")
    if "descent" in report:
        print(f"descent {cfg.loss.steps} steps: {report['descent']['trace'][0]!r} -> "
              f"{report['descent']['trace'][-1]!r}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    if cfg.loss.text is None and cfg.loss.image is None:
        cfg.loss.text = cbl_loss.data_path("gradcheck_text.jsonl")
        cfg.loss.image = cbl_loss.data_path("gradcheck_image.jsonl")
        if cfg.loss.background is None:
            cfg.loss.background = cbl_loss.data_path("background_concepts.jsonl")
    cfg.validate(("loss.text", "loss.image"))
    bags, bank = _loss_inputs(cfg)
    report = cbl_loss.gradcheck(bags, bank, _temps(cfg), cfg.loss.h)
    ok = report.worst <= GRADCHECK_TOLERANCE
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "gradcheck.json", {"loss": report.loss, "grad_norms": report.grad_norms,
                                         "max_rel_err": report.max_rel_err, "worst": report.worst,
                                         "tolerance": GRADCHECK_TOLERANCE, "pass": ok})
    for name in ("text", "image", "background"):
        print(f"{name:<10} |grad|={report.grad_norms[name]:.6e}  rel err={report.max_rel_err[name]:.3e}")
    sign = "<=" if ok else ">"
    print(f"max rel err {report.worst:.3e} {sign} 1e-5: {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise CommandFailed("gradient check failed")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    cfg.validate(("dataset.annotations",))
    if (cfg.eval.detections is None) == (cfg.eval.pseudo is None):
        raise ConfigError("eval needs exactly one of eval.detections or eval.pseudo")
    dataset = _load_dataset(cfg, load_masks=False)
    if cfg.eval.detections is not None:
        dets = evaluation.load_detections(cfg.eval.detections, dataset)
    else:
        dets = evaluation.pseudo_as_detections(parse_coco(cfg.eval.pseudo, load_masks=False).annotations)
    classes = dataset.novel_classes or {a.category for a in dataset.ground_truth()}
    kw = dict(crowded_threshold=cfg.thresholds.crowded, occluded_threshold=cfg.thresholds.occluded,
              occluded_mode=cfg.thresholds.occluded_mode)
    reports = {s.value: evaluation.subset_eval(dets, dataset, s, classes, **kw) for s in evaluation.Subset}
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", {"classes": sorted(classes),
                                    "subsets": {k: r.to_json() for k, r in reports.items()}})
    text = "".join(r.to_table() for r in reports.values())
    atomic_write_text(out / "eval.txt", text)
    print(text, end="")
    return EXIT_OK


def _read_mask(path: Path) -> InstanceMask:
    from PIL import Image

    with Image.open(path) as im:
        return InstanceMask(np.asarray(im.convert("L")) > 0)


def cmd_preprocess_dump(cfg: RunConfig, image: Path | None, mask: Path | None) -> int:
    if image is None or mask is None:
        raise ConfigError("preprocess-dump needs --image and --mask")
    for p in (image, mask):
        if not p.exists():
            raise ConfigError(f"path does not exist: {p}")
    cfg.validate()
    img = preprocess.read_image(image)
    m = _read_mask(mask)
    if m.bits.shape != img.shape[:2]:
        raise ValueError(f"mask {m.bits.shape} and image {img.shape[:2]} sizes differ")
    box = tight_bbox(m)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    meta = {"box": box.to_list(), "ksize": cfg.preprocess.ksize, "sigma": cfg.preprocess.sigma,
            "blur_scope": cfg.preprocess.blur_scope, "crops": {}}
    for mode in preprocess.Mode:
        crop = preprocess.make_crop(img, box, m, mode, cfg.preprocess.ksize, cfg.preprocess.sigma,
                                    preprocess.BlurScope(cfg.preprocess.blur_scope))
        name = f"crop_{mode.value}.png"
        preprocess.write_png(out / name, crop)
        meta["crops"][mode.value] = {"file": name, "crop_sha256": be.crop_sha256(crop),
                                     "shape": list(crop.shape)}
        print(f"{mode.value:<5} {crop.shape[1]}x{crop.shape[0]} -> {out / name}")
    _write_json(out / "preprocess.json", meta)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


_FLAG_KEYS = {
    "annotations": "dataset.annotations", "split": "dataset.split", "images_root": "dataset.images_root",
    "proposals": "dataset.proposals", "manifest": "backend.manifest", "endpoint": "backend.endpoint",
    "mode": "preprocess.mode", "ksize": "preprocess.ksize", "sigma": "preprocess.sigma",
    "anchor_mode": "thresholds.anchor_mode", "occluded_mode": "thresholds.occluded_mode",
    "histogram": "eval.histogram", "counts": "eval.counts", "pseudo": "eval.pseudo",
    "detections": "eval.detections", "text": "loss.text", "image_emb": "loss.image",
    "background": "loss.background", "steps": "loss.steps", "lr": "loss.lr",
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="TOML run config")
    parser.add_argument("--out-dir", type=Path, default=default, help="output directory")
    parser.add_argument("--backend", choices=["mock", "http"], default=default, help="MLLM backend kind")
    parser.add_argument("--jobs", type=int, default=default, help="max in-flight backend requests")
    parser.add_argument("-v", "--verbose", action="store_true", default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ovpseudo", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("generate", "run the verify/label/ground dialogue over mask proposals")
    p.add_argument("--annotations", type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--images-root", type=Path)
    p.add_argument("--proposals", type=Path)
    p.add_argument("--manifest", type=Path, help="mock backend response manifest")
    p.add_argument("--endpoint", type=Path, help="HTTP endpoint config JSON")
    p.add_argument("--mode", choices=[m.value for m in preprocess.Mode])
    p.add_argument("--ksize", type=int)
    p.add_argument("--sigma", type=float)

    p = add("filter", "build semantic anchors and the open-world base set")
    p.add_argument("--annotations", type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--histogram", type=Path)
    p.add_argument("--anchor-mode", type=str.upper, choices=[m.value for m in anchors.ThresholdMode])
    p.add_argument("--pseudo", type=Path, help="pseudo annotations to pass through the CBL++ filter")

    p = add("stats", "pseudo-label statistics per benchmark vocabulary")
    p.add_argument("--histogram", type=Path)
    p.add_argument("--counts", type=Path)
    p.add_argument("--vocab", action="append", default=[], metavar="NAME=PATH")

    for name, help_text in (("loss", "contrastive background loss on embedding files"),
                            ("gradcheck", "analytic vs finite-difference gradients")):
        p = add(name, help_text)
        p.add_argument("--text", type=Path)
        p.add_argument("--image-emb", type=Path)
        p.add_argument("--background", type=Path)
        if name == "loss":
            p.add_argument("--steps", type=int)
            p.add_argument("--lr", type=float)

    p = add("eval", "AP50 on novel classes, overall and on crowded/occluded subsets")
    p.add_argument("--annotations", type=Path)
    p.add_argument("--split", type=Path)
    p.add_argument("--detections", type=Path, help="COCO results JSON")
    p.add_argument("--pseudo", type=Path, help="pseudo annotation COCO file, scored at 1.0")
    p.add_argument("--occluded-mode", choices=[m.value for m in evaluation.OccludedMode])

    p = add("preprocess-dump", "write soft/hard/raw crops for one image and mask")
    p.add_argument("--image", type=Path)
    p.add_argument("--mask", type=Path, help="mask PNG, nonzero pixels are inside")
    p.add_argument("--ksize", type=int)
    p.add_argument("--sigma", type=float)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            override(cfg, key, value)
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.backend is not None:
        cfg.backend.kind = args.backend
    if args.jobs is not None:
        cfg.jobs = args.jobs
    for item in getattr(args, "vocab", []):
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise ConfigError(f"--vocab expects NAME=PATH, got {item!r}")
        cfg.eval.vocabularies[name] = Path(path)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "filter":
            return cmd_filter(cfg)
        if args.command == "stats":
            return cmd_stats(cfg)
        if args.command == "loss":
            return cmd_loss(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_preprocess_dump(cfg, args.image, args.mask)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CocoError, be.BackendError, OSError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
