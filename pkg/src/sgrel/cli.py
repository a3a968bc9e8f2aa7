"""Command-line pipeline: synth, ingest, zsplit, resample, weights, train, refine, eval, report.

Every stage reads files its predecessor produced and can also run standalone on
compatible inputs. Configuration is a flat key=value file with CLI-flag
overrides (flags win); all randomness flows from one seed through named
substreams, and reports embed the fully resolved config that produced them.
Exit codes: 0 success, 1 usage/config error, 2 data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import alignment, ingest, metrics, refinement, sampling, synth
from .core import AnnotationError, LabelSpace, OBJECT, PREDICATE
from .ingest import ParseError, build_zero_shot_index, load_annotations, load_embeddings, load_labels
from .reweighting import InfoWeights, info_weights, uniform_weights
from .sampling import PredicateStats, build_sampling_plan, count_predicates, resample
from .seeding import substream

logger = logging.getLogger(__name__)


class UsageError(Exception):
    """Bad invocation or configuration; exits with status 1."""


@dataclass
class RunConfig:
    """Fully resolved pipeline configuration; defaults follow the reference setup."""

    seed: int = 0
    alpha: float = refinement.DEFAULT_ALPHA
    tau: float = sampling.DEFAULT_TAU
    beta: float = sampling.DEFAULT_BETA
    mu: float = 1.2
    lr: float = 0.001
    iterations: int = 500
    patience: int = 3
    batch_size: int = 16
    eval_every: int = 100
    box_loss: float = 0.0
    object_loss: float = 0.0
    use_resampling: bool = False
    use_refinement: bool = False
    use_reweighting: bool = False
    use_alignment: bool = False
    subtask: str = metrics.PREDCLS
    ks: tuple[int, ...] = metrics.DEFAULT_KS
    # Synthetic-corpus knobs.
    images: int = 300
    c_obj: int = 30
    c_pred: int = 20
    d_roi: int = 32
    d_emb: int = 16
    zipf_s: float = 1.5
    zero_shot_fraction: float = 0.1
    noise_sigma: float = 0.5
    min_triples: int = 1
    max_triples: int = 4
    max_distractors: int = 2
    embedding_scale: float = 160.0
    intra_cluster_sigma: float = 1.0


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _parse_ks(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(","))


_CONFIG_PARSERS = {
    "seed": int,
    "alpha": float,
    "tau": float,
    "beta": float,
    "mu": float,
    "lr": float,
    "iterations": int,
    "patience": int,
    "batch_size": int,
    "eval_every": int,
    "box_loss": float,
    "object_loss": float,
    "use_resampling": _parse_bool,
    "use_refinement": _parse_bool,
    "use_reweighting": _parse_bool,
    "use_alignment": _parse_bool,
    "subtask": str,
    "ks": _parse_ks,
    "images": int,
    "c_obj": int,
    "c_pred": int,
    "d_roi": int,
    "d_emb": int,
    "zipf_s": float,
    "zero_shot_fraction": float,
    "noise_sigma": float,
    "min_triples": int,
    "max_triples": int,
    "max_distractors": int,
    "embedding_scale": float,
    "intra_cluster_sigma": float,
}


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a key=value config file, then apply CLI overrides on top."""
    values: dict = {}
    if path is not None:
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in _CONFIG_PARSERS:
                raise UsageError(f"{path}:{lineno}: invalid config key {key!r}")
            try:
                values[key] = _CONFIG_PARSERS[key](value.strip())
            except ValueError as err:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {err}") from err
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    if values.get("subtask") not in (None, *metrics.PROTOCOLS):
        raise UsageError(f"invalid subtask {values.get('subtask')!r}")
    return RunConfig(**values)


def config_echo(config: RunConfig) -> dict:
    echo = dataclasses.asdict(config)
    echo["ks"] = list(config.ks)
    return echo


def _write_json(payload: dict, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_spaces(args: argparse.Namespace) -> tuple[LabelSpace, LabelSpace]:
    return (
        load_labels(args.object_labels, OBJECT),
        load_labels(args.predicate_labels, PREDICATE),
    )


def save_weights(info: InfoWeights, counts: np.ndarray, space: LabelSpace, path: Path) -> None:
    rows = [
        {
            "name": space.names[j],
            "count": int(counts[j]),
            "frequency": float(info.frequencies[j]),
            "bits": float(info.bits[j]),
            "weight": float(info.weights[j]),
        }
        for j in range(space.size)
    ]
    _write_json({"predicates": rows}, path)


def load_weights(path: str | Path, space: LabelSpace) -> InfoWeights:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    frequencies = np.zeros(space.size)
    bits = np.zeros(space.size)
    weights = np.zeros(space.size)
    for row in payload["predicates"]:
        j = space.index_of(row["name"])
        frequencies[j] = row["frequency"]
        bits[j] = row["bits"]
        weights[j] = row["weight"]
    return InfoWeights(frequencies=frequencies, bits=bits, weights=weights)


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = synth.SynthConfig(
        c_obj=config.c_obj,
        c_pred=config.c_pred,
        d_roi=config.d_roi,
        d_emb=config.d_emb,
        images=config.images,
        zipf_s=config.zipf_s,
        zero_shot_fraction=config.zero_shot_fraction,
        noise_sigma=config.noise_sigma,
        seed=config.seed,
        min_triples=config.min_triples,
        max_triples=config.max_triples,
        max_distractors=config.max_distractors,
        embedding_scale=config.embedding_scale,
        intra_cluster_sigma=config.intra_cluster_sigma,
    )
    data = synth.generate(cfg)
    (out / "object_labels.txt").write_text(
        "".join(n + "\n" for n in data.train.object_space.names), encoding="utf-8"
    )
    (out / "predicate_labels.txt").write_text(
        "".join(n + "\n" for n in data.train.predicate_space.names), encoding="utf-8"
    )
    ingest.save_embeddings(data.object_embeddings, out / "object_embeddings.txt")
    ingest.save_embeddings(data.predicate_embeddings, out / "predicate_embeddings.txt")
    ingest.save_annotations(data.train, out / "train.jsonl")
    ingest.save_annotations(data.val, out / "val.jsonl")
    ingest.save_annotations(data.test, out / "test.jsonl")
    synth.save_map(data.map, out / "generative_map.json")
    _write_json(
        {
            "config": config_echo(config),
            "images": {
                "train": len(data.train.annotations),
                "val": len(data.val.annotations),
                "test": len(data.test.annotations),
            },
            "triples": {
                "train": data.train.num_triples(),
                "val": data.val.num_triples(),
                "test": data.test.num_triples(),
            },
        },
        out / "synth_manifest.json",
    )
    logger.info(
        "synth: %d/%d/%d train/val/test images -> %s",
        len(data.train.annotations),
        len(data.val.annotations),
        len(data.test.annotations),
        out,
    )
    return 0


def cmd_ingest(args: argparse.Namespace, config: RunConfig) -> int:
    object_space, predicate_space = _load_spaces(args)
    dataset = load_annotations(
        args.annotations, object_space, predicate_space, args.d_roi, split=args.split
    )
    summary = {
        "config": config_echo(config),
        "split": dataset.split,
        "images": len(dataset.annotations),
        "triples": dataset.num_triples(),
        "objects": sum(len(a.objects) for a in dataset.annotations),
        "object_labels": object_space.size,
        "predicate_labels": predicate_space.size,
        "d_roi": dataset.d_roi,
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(summary, out / "ingest_summary.json")
    print(json.dumps({"images": summary["images"], "triples": summary["triples"]}, sort_keys=True))
    return 0


def cmd_zsplit(args: argparse.Namespace, config: RunConfig) -> int:
    object_space, predicate_space = _load_spaces(args)
    train = load_annotations(args.train, object_space, predicate_space, args.d_roi, "train")
    test = load_annotations(args.test, object_space, predicate_space, args.d_roi, "test")
    index = build_zero_shot_index(train, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingest.save_zero_shot_index(index, object_space, predicate_space, out / "zero_shot.json")
    logger.info("zsplit: %d novel signatures -> %s", len(index), out / "zero_shot.json")
    return 0


def cmd_resample(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "train_resampled.jsonl"
    if not config.use_resampling:
        shutil.copyfile(args.train, target)
        _write_json({"applied": False, "config": config_echo(config)}, out / "sampling_plan.json")
        logger.info("resample: disabled, copied input unchanged")
        return 0
    object_space, predicate_space = _load_spaces(args)
    train = load_annotations(args.train, object_space, predicate_space, args.d_roi, "train")
    recalls = ingest.load_recalls(args.recalls, predicate_space)
    counts = count_predicates(train)
    plan = build_sampling_plan(
        PredicateStats(counts=counts, recalls=recalls),
        tau=config.tau,
        beta=config.beta,
        seed=config.seed,
    )
    resampled = resample(train, plan)
    ingest.save_annotations(resampled, target)
    _write_json(
        {
            "applied": True,
            "config": config_echo(config),
            "seed": plan.seed,
            "tau": plan.tau,
            "beta": plan.beta,
            "predicates": [
                {
                    "name": predicate_space.names[j],
                    "count": int(plan.counts[j]),
                    "recall": float(recalls.values[j]),
                    "rate": float(plan.rates[j]),
                    "target": int(plan.targets[j]),
                }
                for j in range(predicate_space.size)
            ],
        },
        out / "sampling_plan.json",
    )
    logger.info(
        "resample: %d -> %d triples", train.num_triples(), resampled.num_triples()
    )
    return 0


def cmd_weights(args: argparse.Namespace, config: RunConfig) -> int:
    object_space, predicate_space = _load_spaces(args)
    train = load_annotations(args.train, object_space, predicate_space, args.d_roi, "train")
    counts = count_predicates(train)
    info = info_weights(counts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(info, counts, predicate_space, out / "info_weights.json")
    logger.info("weights: wrote %s", out / "info_weights.json")
    return 0


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    object_space, predicate_space = _load_spaces(args)
    train_set = load_annotations(args.train, object_space, predicate_space, args.d_roi, "train")
    val_set = load_annotations(args.val, object_space, predicate_space, args.d_roi, "val")
    test_set = load_annotations(args.test, object_space, predicate_space, args.d_roi, "test")
    embeddings = load_embeddings(args.object_embeddings, object_space)

    if config.use_reweighting:
        if not args.weights:
            raise UsageError("--weights is required when use_reweighting is on")
        weights = load_weights(args.weights, predicate_space)
    else:
        weights = uniform_weights(predicate_space.size)

    model = alignment.RelationModel.init(
        train_set.d_roi, embeddings.dim, predicate_space.size, substream(config.seed, "alignment.init")
    )
    train_config = alignment.TrainConfig(
        lr=config.lr,
        iterations=config.iterations,
        batch_size=config.batch_size,
        seed=config.seed,
        mu=config.mu,
        patience=config.patience,
        eval_every=config.eval_every,
        use_alignment=config.use_alignment,
        box_loss=config.box_loss,
        object_loss=config.object_loss,
    )
    result = alignment.train(model, train_set, embeddings, train_config, val_set, weights)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alignment.save_model(result.model, out / "model.ckpt")
    alignment.save_history(result.history, out / "loss_history.csv")
    metrics.save_predictions(
        alignment.predict(result.model, val_set), object_space, out / "predictions_val.jsonl"
    )
    metrics.save_predictions(
        alignment.predict(result.model, test_set), object_space, out / "predictions_test.jsonl"
    )
    logger.info(
        "train: %d iterations, final total loss %.5f",
        len(result.history),
        result.history[-1].total if result.history else float("nan"),
    )
    return 0


def cmd_refine(args: argparse.Namespace, config: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "predictions_refined.jsonl"
    report_path = out / "refinement_report.jsonl"
    if not config.use_refinement:
        shutil.copyfile(args.predictions, target)
        report_path.write_text("", encoding="utf-8")
        logger.info("refine: disabled, copied predictions unchanged")
        return 0
    object_space, predicate_space = _load_spaces(args)
    predictions = metrics.load_predictions(args.predictions, object_space)
    object_embeddings = load_embeddings(args.object_embeddings, object_space)
    predicate_embeddings = load_embeddings(args.predicate_embeddings, predicate_space)
    refined = refinement.refine_dataset(
        predictions, object_embeddings, predicate_embeddings, config.alpha
    )
    metrics.save_predictions(refined, object_space, target)
    lines = []
    for before, after in zip(predictions, refined):
        record = {
            "image_id": before.image_id,
            "subj_id": before.subj_id,
            "obj_id": before.obj_id,
            "pre_top": predicate_space.names[int(np.argmax(before.probs))],
            "post_top": predicate_space.names[int(np.argmax(after.probs))],
            "scores": [float(v) for v in after.probs],
        }
        lines.append(json.dumps(record, separators=(",", ":")))
    report_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    flipped = sum(
        1
        for before, after in zip(predictions, refined)
        if int(np.argmax(before.probs)) != int(np.argmax(after.probs))
    )
    logger.info("refine: %d/%d pairs flipped", flipped, len(predictions))
    return 0


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    object_space, predicate_space = _load_spaces(args)
    dataset = load_annotations(args.dataset, object_space, predicate_space, args.d_roi, args.split)
    predictions = metrics.load_predictions(args.predictions, object_space)
    zero_shot = (
        ingest.load_zero_shot_index(args.zero_shot, object_space, predicate_space)
        if args.zero_shot
        else None
    )
    info = load_weights(args.weights, predicate_space) if args.weights else None
    report = metrics.evaluate(
        predictions, dataset, zero_shot, info, ks=config.ks, protocol=config.subtask
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        {"config": config_echo(config), "report": report.to_dict(predicate_space)},
        out / "report.json",
    )
    metrics.per_predicate_csv(report, predicate_space, out / "per_predicate.csv")
    max_k = max(config.ks)
    recalls = {
        name: (
            0.0
            if np.isnan(report.per_predicate_recall[max_k][j])
            else float(report.per_predicate_recall[max_k][j])
        )
        for j, name in enumerate(predicate_space.names)
    }
    _write_json(recalls, out / "recalls.json")
    headline = {
        f"{family}@{k}": value
        for family, values in (
            ("R", report.recall),
            ("mR", report.mean_recall),
            ("zR", report.zero_shot_recall),
            ("mRIC", report.mric),
        )
        for k, value in values.items()
    }
    print(json.dumps(headline, sort_keys=True))
    return 0


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    rows = []
    seeds = set()
    for idx, path in enumerate(args.inputs):
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        cfg = payload["config"]
        seeds.add(cfg["seed"])
        toggles = {
            key: cfg[key]
            for key in ("use_alignment", "use_refinement", "use_resampling", "use_reweighting")
        }
        label = args.labels[idx] if args.labels and idx < len(args.labels) else None
        if label is None:
            enabled = [key.removeprefix("use_") for key, on in toggles.items() if on]
            label = "+".join(enabled) if enabled else "baseline"
        rows.append(
            {
                "label": label,
                "toggles": toggles,
                "metrics": payload["report"]["metrics"],
            }
        )
    if len(seeds) > 1:
        raise ValueError(f"seed conflict across reports: {sorted(seeds)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"config": config_echo(config), "seed": sorted(seeds)[0] if seeds else None, "rows": rows}
    _write_json(payload, out / "summary.json")

    ks = rows[0]["metrics"]["recall"].keys() if rows else []
    header = ["run"] + [f"{fam}@{k}" for fam in ("R", "mR", "zR", "mRIC") for k in ks]
    print("\t".join(header))
    for row in rows:
        cells = [row["label"]]
        for family in ("recall", "mean_recall", "zero_shot_recall", "mric"):
            for k in ks:
                value = row["metrics"][family][k]
                cells.append("-" if value is None else f"{value:.4f}")
        print("\t".join(cells))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--beta", type=float, default=None)
    parser.add_argument("--mu", type=float, default=None)
    parser.add_argument("--lr", type=float, default=None)
    parser.add_argument("--log-file", default=None, help="sidecar log with timestamps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgrel", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load and validate an annotation file")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--d-roi", type=int, required=True)
    p.add_argument("--split", default="train")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("zsplit", help="build the zero-shot signature index")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--d-roi", type=int, required=True)
    p.set_defaults(func=cmd_zsplit)

    p = sub.add_parser("resample", help="recall-guided down-sampling of the train set")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--recalls", default=None, help="JSON map predicate-name -> recall")
    p.add_argument("--d-roi", type=int, required=True)
    p.set_defaults(func=cmd_resample)

    p = sub.add_parser("weights", help="information-content loss weights from train counts")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--d-roi", type=int, required=True)
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("train", help="train the relation model and emit predictions")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--object-embeddings", required=True)
    p.add_argument("--weights", default=None, help="info_weights.json (required with use_reweighting)")
    p.add_argument("--d-roi", type=int, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("refine", help="refine predictions with label-embedding distances")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--object-embeddings", default=None)
    p.add_argument("--predicate-embeddings", default=None)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="metric report for a prediction file")
    _add_common(p)
    p.add_argument("--object-labels", required=True)
    p.add_argument("--predicate-labels", required=True)
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--d-roi", type=int, required=True)
    p.add_argument("--zero-shot", default=None)
    p.add_argument("--weights", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine eval reports into one document / ablation grid")
    _add_common(p)
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--labels", nargs="*", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if getattr(args, "log_file", None):
        handlers.append(logging.FileHandler(args.log_file))
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        handlers=handlers,
        force=True,
    )

    overrides = {
        key: getattr(args, key, None) for key in ("seed", "alpha", "tau", "beta", "mu", "lr")
    }
    try:
        config = load_config(args.config, overrides)
        return args.func(args, config)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ParseError, AnnotationError, ValueError, KeyError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
