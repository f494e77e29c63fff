"""Operator CLI: synth, vocab, train, refine, eval, oracle.

Every command is a pure function of its config and input files; outputs land
under the configured run directory together with a resolved-config snapshot
and a checksum manifest, so reruns are byte-identical and auditable.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from . import refine as refine_mod
from .config import RunConfig, load_run_config
from .embedstore import (
    SPLIT_BASE,
    SPLIT_NOVEL,
    derive_text_bank,
    generate_synthetic_world,
    load_dataset,
    load_region_file,
    load_text_bank,
    save_dataset,
    save_region_file,
    save_text_bank,
)
from .errors import ConfigurationError, DataError, NumericError, ToolkitError
from .evalkit import Detection, evaluate, oracle_box_topk
from .geometry import Box
from .selftrain import LinearHead, load_head, predict_dataset, save_head, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finalize(cfg: RunConfig, command: str, out_dir: Path, outputs: list[Path]) -> None:
    snapshot = out_dir / "resolved_config.json"
    _json_dump(cfg.to_dict(), snapshot)
    manifest = {
        "command": command,
        "config": snapshot.name,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    _json_dump(manifest, out_dir / "manifest.json")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_inputs(cfg: RunConfig, need=("dataset", "embeddings", "text_bank")):
    loaded = {}
    if "dataset" in need:
        if not cfg.paths.dataset:
            raise ConfigurationError("paths.dataset is required")
        loaded["dataset"] = load_dataset(cfg.paths.dataset)
    if "embeddings" in need:
        if not cfg.paths.embeddings:
            raise ConfigurationError("paths.embeddings is required")
        loaded["embeddings"] = load_region_file(cfg.paths.embeddings)
    if "text_bank" in need:
        if not cfg.paths.text_bank:
            raise ConfigurationError("paths.text_bank is required")
        loaded["text_bank"] = load_text_bank(cfg.paths.text_bank)
    return loaded


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    s = cfg.synth
    bank, regions, dataset = generate_synthetic_world(
        n_base=s.n_base,
        n_novel=s.n_novel,
        dim=s.dim,
        n_images=s.n_images,
        noise_sigma=s.noise_sigma,
        seed=s.seed,
        n_distractors=s.n_distractors,
    )
    bank_path = out / "text_bank.ovpe"
    regions_path = out / "regions.ovpe"
    dataset_path = out / "dataset.json"
    save_text_bank(bank, bank_path)
    save_region_file(regions, regions_path)
    save_dataset(dataset, dataset_path)
    _finalize(cfg, "synth", out, [bank_path, Path(str(bank_path) + ".json"), regions_path, dataset_path])
    print(
        f"synth: {s.n_base} base + {s.n_novel} novel classes"
        + (f" + {s.n_distractors} distractors" if s.n_distractors else "")
        + f", dim {s.dim}, {len(dataset.images)} images, "
        f"{len(dataset.annotations)} objects, {len(regions)} region records -> {out}"
    )
    return EXIT_OK


def cmd_vocab(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    loaded = _load_inputs(cfg, need=("dataset", "text_bank"))
    dataset, bank = loaded["dataset"], loaded["text_bank"]
    base_names = [c.name for c in dataset.categories if c.split == SPLIT_BASE]
    if cfg.vocab.source == "dataset":
        novel_names = [c.name for c in dataset.categories if c.split == SPLIT_NOVEL]
    elif cfg.vocab.source == "base-only":
        novel_names = []
    elif cfg.vocab.source == "file":
        if not cfg.vocab.names_file:
            raise ConfigurationError("vocab.names_file is required with vocab.source='file'")
        novel_names = [
            line.strip()
            for line in Path(cfg.vocab.names_file).read_text().splitlines()
            if line.strip()
        ]
    else:
        raise ConfigurationError(f"unknown vocab.source {cfg.vocab.source!r}")
    derived = derive_text_bank(bank, base_names, novel_names)
    bank_path = out / "vocab_bank.ovpe"
    save_text_bank(derived, bank_path)
    _finalize(cfg, "vocab", out, [bank_path, Path(str(bank_path) + ".json")])
    n_novel = sum(1 for s in derived.class_split if s == SPLIT_NOVEL)
    print(
        f"vocab: {derived.num_classes} classes ({len(base_names)} base, {n_novel} novel "
        f"candidates) -> {bank_path}"
    )
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    loaded = _load_inputs(cfg)
    dataset, regions, bank = loaded["dataset"], loaded["embeddings"], loaded["text_bank"]
    head = LinearHead.from_bank(bank, cfg.fusion.temperature)
    trained, metrics = train(head, dataset, regions, bank, cfg.train_config())

    head_path = out / "head.ovpe"
    save_head(trained, head_path)
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text(
        "".join(json.dumps(m, sort_keys=True, separators=(",", ":")) + "\n" for m in metrics)
    )
    detections = predict_dataset(
        trained, dataset, regions, bank, cfg.fusion_config(), cfg.fusion.nms_iou
    )
    det_path = out / "detections.json"
    _json_dump([_detection_to_doc(d) for d in detections], det_path)
    _finalize(cfg, "train", out, [head_path, metrics_path, det_path])
    last_loss = metrics[-1]["loss"] if metrics else float("nan")
    print(
        f"train: {cfg.train.iterations} iterations "
        f"(plm={'on' if cfg.plm.enabled else 'off'}), final loss {last_loss:.6f}, "
        f"{len(detections)} detections -> {out}"
    )
    return EXIT_OK


def cmd_refine(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    loaded = _load_inputs(cfg)
    dataset, regions, bank = loaded["dataset"], loaded["embeddings"], loaded["text_bank"]
    if not cfg.paths.head:
        raise ConfigurationError("paths.head is required for refine")
    head = load_head(cfg.paths.head, cfg.fusion.temperature)
    refine_cfg = refine_mod.RefinementConfig(
        score_threshold=cfg.refine.score_threshold,
        max_pseudo_per_image=cfg.refine.max_pseudo_per_image,
        dedup_iou=cfg.refine.dedup_iou,
    )
    augmented = refine_mod.offline_refine(
        dataset, head, regions, bank, cfg.fusion_config(), refine_cfg
    )
    aug_path = out / "augmented_dataset.json"
    save_dataset(augmented, aug_path)
    _finalize(cfg, "refine", out, [aug_path])
    appended = len(augmented.annotations) - len(dataset.annotations)
    print(f"refine: appended {appended} pseudo annotations -> {aug_path}")
    return EXIT_OK


def _detection_to_doc(det: Detection) -> dict:
    x, y, w, h = det.box.to_xywh()
    return {
        "image_id": det.image_id,
        "bbox": [x, y, w, h],
        "category_id": det.class_id,
        "score": det.score,
    }


def _detection_from_doc(doc: dict) -> Detection:
    return Detection(
        image_id=doc["image_id"],
        box=Box.from_xywh(*doc["bbox"]),
        class_id=doc["category_id"],
        score=doc["score"],
    )


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    loaded = _load_inputs(cfg, need=("dataset",))
    dataset = loaded["dataset"]
    if not cfg.paths.detections:
        raise ConfigurationError("paths.detections is required for eval")
    docs = json.loads(Path(cfg.paths.detections).read_text())
    detections = [_detection_from_doc(d) for d in docs]
    report = evaluate(detections, dataset)
    report_path = out / "eval_report.json"
    _json_dump(report.to_dict(), report_path)
    csv_path = out / "eval_per_class.csv"
    rows = ["id,name,split,ap50,ap"] + [
        f"{r['id']},{r['name']},{r['split']},{r['ap50']},{r['ap']}" for r in report.per_class
    ]
    csv_path.write_text("\n".join(rows) + "\n")
    _finalize(cfg, "eval", out, [report_path, csv_path])
    print(
        f"eval: ap50_novel={report.ap50_novel:.4f} ap50_base={report.ap50_base:.4f} "
        f"ap_all={report.ap_all:.4f} ar_all={report.ar_all:.4f} -> {report_path}"
    )
    return EXIT_OK


def cmd_oracle(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    loaded = _load_inputs(cfg)
    dataset, regions, bank = loaded["dataset"], loaded["embeddings"], loaded["text_bank"]
    report = {
        str(k): oracle_box_topk(dataset, regions, bank, k) for k in cfg.oracle.k
    }
    report_path = out / "oracle_report.json"
    _json_dump(report, report_path)
    _finalize(cfg, "oracle", out, [report_path])
    summary = " ".join(
        f"top{k}: base={report[str(k)][SPLIT_BASE]:.4f} novel={report[str(k)][SPLIT_NOVEL]:.4f}"
        for k in cfg.oracle.k
    )
    print(f"oracle: {summary} -> {report_path}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "vocab": cmd_vocab,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "oracle": cmd_oracle,
}


def _add_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="TOML config file")
    defaults = RunConfig()
    for section_field in dataclasses.fields(defaults):
        section = getattr(defaults, section_field.name)
        for f in dataclasses.fields(section):
            flag = f"--{section_field.name}-{f.name.replace('_', '-')}"
            parser.add_argument(flag, dest=f"{section_field.name}__{f.name}", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ovps",
        description="Open-vocabulary pseudo-label self-training toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd_parser = sub.add_parser(name)
        _add_flags(cmd_parser)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        tuple(key.split("__", 1)): value
        for key, value in vars(args).items()
        if "__" in key and value is not None
    }
    try:
        cfg = load_run_config(args.config, overrides)
        return _COMMANDS[args.command](cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ToolkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
