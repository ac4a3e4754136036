"""Command-line pipeline driver.

Every subcommand wraps one library operation, reads a JSON run config plus
``--set key=value`` overrides, and drops an effective-config snapshot next
to whatever it writes so runs can be reproduced from their outputs alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import cachebank, dec, ensemble, evaluation, kma, pipeline, protocol, report, synth, tensorcore
from .errors import BadConfig, ToolkitError, ValidationError


@dataclass
class RunConfig:
    """Run parameters; defaults follow the reference operating point."""

    lam: float = 0.7
    k_channels: int = 300
    alpha: float = 0.5
    cache_K: int = 4
    n_trainable: int = 32
    T: int = 1
    beta_seen: float = 0.4
    beta_unseen: float = 0.8
    temperature: float = 0.01
    protocol: str = "GZSRI"
    workers: int = 1
    num_scenes: int = 4
    mask_jitter: int = 0
    split: str | dict | None = None
    paths: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d


_JSON_TO_ATTR = {"lambda": "lam"}
_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def config_from_json_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise BadConfig("config must be a JSON object")
    cfg = RunConfig()
    for key, value in obj.items():
        attr = _JSON_TO_ATTR.get(key, key)
        if attr not in _CONFIG_FIELDS:
            raise BadConfig("unknown config key", field=key)
        setattr(cfg, attr, value)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: RunConfig) -> None:
    def check(cond, field_name, msg):
        if not cond:
            raise BadConfig(msg, field=field_name)

    check(isinstance(cfg.lam, (int, float)) and 0.0 <= cfg.lam <= 1.0,
          "lambda", "must be a number in [0, 1]")
    check(isinstance(cfg.k_channels, int) and cfg.k_channels >= 1,
          "k_channels", "must be an integer >= 1")
    check(isinstance(cfg.alpha, (int, float)) and cfg.alpha >= 0,
          "alpha", "must be a non-negative number")
    check(isinstance(cfg.cache_K, int) and cfg.cache_K >= 1,
          "cache_K", "must be an integer >= 1")
    check(isinstance(cfg.n_trainable, int) and cfg.n_trainable >= 1,
          "n_trainable", "must be an integer >= 1")
    check(isinstance(cfg.T, int) and cfg.T >= 1, "T", "must be an integer >= 1")
    check(isinstance(cfg.beta_seen, (int, float)) and 0.0 <= cfg.beta_seen <= 1.0,
          "beta_seen", "must be a number in [0, 1]")
    check(isinstance(cfg.beta_unseen, (int, float)) and 0.0 <= cfg.beta_unseen <= 1.0,
          "beta_unseen", "must be a number in [0, 1]")
    check(isinstance(cfg.temperature, (int, float)) and cfg.temperature > 0,
          "temperature", "must be a positive number")
    check(cfg.protocol in ("ZSRI", "GZSRI"), "protocol", "must be 'ZSRI' or 'GZSRI'")
    check(isinstance(cfg.workers, int) and cfg.workers >= 1,
          "workers", "must be an integer >= 1")
    check(isinstance(cfg.num_scenes, int) and cfg.num_scenes >= 1,
          "num_scenes", "must be an integer >= 1")
    check(isinstance(cfg.mask_jitter, int) and cfg.mask_jitter >= 0,
          "mask_jitter", "must be a non-negative integer")
    check(cfg.split is None or isinstance(cfg.split, (str, dict)),
          "split", "must be a dataset name, a JSON file path, or an inline object")
    check(isinstance(cfg.paths, dict), "paths", "must be an object")
    check(isinstance(cfg.synth, dict), "synth", "must be an object")


def _parse_set_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_override(obj: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = obj
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise BadConfig("cannot override a scalar with a nested key", field=dotted)
    node[parts[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> RunConfig:
    obj: dict = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            try:
                obj = json.load(f)
            except json.JSONDecodeError as e:
                raise BadConfig(f"config file is not valid JSON: {e}")
    for item in overrides:
        if "=" not in item:
            raise BadConfig(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _apply_override(obj, key.strip(), _parse_set_value(raw))
    return config_from_json_dict(obj)


def _path(cfg: RunConfig, args, name: str, required: bool = True) -> str | None:
    """Resolve a file argument: CLI flag first, then the config's paths map."""
    value = getattr(args, name, None) or cfg.paths.get(name)
    if required and not value:
        raise BadConfig("missing required path (flag or config)", field=f"paths.{name}")
    return value


def resolve_split(cfg: RunConfig) -> protocol.SeenUnseenSplit:
    if cfg.split is None:
        raise BadConfig("a split is required for this command", field="split")
    if isinstance(cfg.split, dict):
        return protocol.load_split(cfg.split)
    name = cfg.split
    if name.lower() in protocol.BUILTIN_SPLITS:
        return protocol.builtin_split(name)
    if os.path.exists(name):
        with open(name, "r", encoding="utf-8") as f:
            return protocol.load_split(json.load(f), dataset_name=os.path.basename(name))
    raise BadConfig(f"{name!r} is neither a builtin dataset nor a split file", field="split")


def synth_config(cfg: RunConfig) -> synth.SynthConfig:
    allowed = {f.name for f in dataclasses.fields(synth.SynthConfig)}
    unknown = set(cfg.synth) - allowed
    if unknown:
        raise BadConfig("unknown synth key", field=f"synth.{sorted(unknown)[0]}")
    kwargs = dict(cfg.synth)
    if "image_size" in kwargs:
        kwargs["image_size"] = tuple(kwargs["image_size"])
    try:
        return synth.SynthConfig(**kwargs)
    except BadConfig as e:
        raise BadConfig(str(e), field=f"synth.{e.field}" if e.field else "synth") from e


def write_snapshot(target: str, cfg: RunConfig) -> None:
    """Effective-config snapshot next to an output file or inside an output dir."""
    if os.path.isdir(target):
        path = os.path.join(target, "effective_config.json")
    else:
        path = target + ".config.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def _load_classifier(path: str, selection_path: str | None) -> dec.Classifier:
    weights = tensorcore.read_embeddings(path)
    if weights.row_labels is None:
        raise ValidationError("classifier file must carry class-name labels")
    selection = None
    if selection_path:
        with open(selection_path, "r", encoding="utf-8") as f:
            selection = dec.ChannelSelection.from_json_dict(json.load(f))
    weights = tensorcore.EmbeddingMatrix(
        weights.data, row_labels=weights.row_labels, normalized=True
    )
    return dec.Classifier(
        weights=weights, class_names=list(weights.row_labels), selection=selection
    )


def _group_by_image(items) -> dict[str, list]:
    groups: dict[str, list] = {}
    for it in items:
        groups.setdefault(it.image_id, []).append(it)
    return groups


def _features_path(features_dir: str, image_id: str) -> str:
    return os.path.join(features_dir, f"{image_id}.zemb")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _path(cfg, args, "out")
    os.makedirs(out, exist_ok=True)
    scenes_dir = os.path.join(out, "scenes")
    os.makedirs(scenes_dir, exist_ok=True)
    scfg = synth_config(cfg)
    split = scfg.split()
    names = scfg.class_names()

    embeddings, planted = synth.generate_class_embeddings(scfg)
    tensorcore.write_embeddings(os.path.join(out, "text_embeddings.zemb"), embeddings)
    visual = synth.generate_visual_class_embeddings(scfg)
    tensorcore.write_embeddings(os.path.join(out, "visual_class_embeddings.zemb"), visual)
    backbone = synth.generate_backbone_class_features(scfg)
    tensorcore.write_embeddings(os.path.join(out, "backbone_class_features.zemb"), backbone)
    with open(os.path.join(out, "planted_channels.json"), "w", encoding="utf-8") as f:
        json.dump({"indices": planted}, f)
        f.write("\n")
    with open(os.path.join(out, "classes.json"), "w", encoding="utf-8") as f:
        json.dump(
            {"class_names": names, "seen": split.seen, "unseen": split.unseen}, f, indent=2
        )
        f.write("\n")

    h, w = scfg.image_size
    images = []
    annotations = []
    proposals = []
    for i in range(cfg.num_scenes):
        fm, anns, props = synth.generate_scene(
            scfg,
            scene_index=i,
            mask_jitter=cfg.mask_jitter,
            embeddings=visual,
            text_embeddings=embeddings,
        )
        image_id = synth.scene_image_id(i)
        tensorcore.write_feature_map(_features_path(scenes_dir, image_id), fm)
        images.append((image_id, w, h))
        annotations.extend(anns)
        proposals.extend(props)
    aset = protocol.AnnotationSet(images=images, annotations=annotations, categories=names)
    protocol.save_annotations(os.path.join(out, "annotations.json"), aset)
    pipeline.write_proposals(os.path.join(out, "proposals.jsonl"), proposals)
    write_snapshot(out, cfg)
    print(f"wrote {cfg.num_scenes} scenes, {len(annotations)} instances to {out}")
    return 0


def cmd_select_channels(cfg: RunConfig, args) -> int:
    out = _path(cfg, args, "out")
    embeddings = tensorcore.read_embeddings(_path(cfg, args, "embeddings"))
    score = dec.score_channels(embeddings, cfg.lam)
    selection = dec.select_top_k(score, cfg.k_channels)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(selection.to_json_dict(), f)
        f.write("\n")
    write_snapshot(out, cfg)
    print(f"selected {selection.k} of {selection.source_D} channels -> {out}")
    return 0


def cmd_build_classifier(cfg: RunConfig, args) -> int:
    out = _path(cfg, args, "out")
    selection_path = _path(cfg, args, "selection", required=False)
    embeddings = tensorcore.read_embeddings(_path(cfg, args, "embeddings"))
    if embeddings.row_labels is None:
        raise ValidationError("embeddings file must carry class-name labels")
    if selection_path:
        with open(selection_path, "r", encoding="utf-8") as f:
            selection = dec.ChannelSelection.from_json_dict(json.load(f))
        classifier = dec.build_refined_classifier(
            embeddings, selection, embeddings.row_labels
        )
    else:
        classifier = dec.build_naive_classifier(embeddings, embeddings.row_labels)
    labeled = tensorcore.EmbeddingMatrix(
        classifier.weights.data, row_labels=classifier.class_names, normalized=True
    )
    tensorcore.write_embeddings(out, labeled)
    write_snapshot(out, cfg)
    print(f"classifier {classifier.n_classes} x {classifier.weights.n_cols} -> {out}")
    return 0


def cmd_partition_channels(cfg: RunConfig, args) -> int:
    out = _path(cfg, args, "out")
    features = tensorcore.read_embeddings(_path(cfg, args, "features"))
    partition = kma.partition_channels(features, cfg.lam, cfg.n_trainable)
    with open(out, "w", encoding="utf-8") as f:
        json.dump(partition.to_json_dict(), f)
        f.write("\n")
    write_snapshot(out, cfg)
    print(
        f"froze {len(partition.frozen)} channels, {len(partition.trainable)} trainable -> {out}"
    )
    return 0


def cmd_build_cache(cfg: RunConfig, args) -> int:
    split = resolve_split(cfg)
    out = _path(cfg, args, "out")
    features_dir = _path(cfg, args, "features_dir")
    classifier = _load_classifier(
        _path(cfg, args, "classifier"), _path(cfg, args, "selection", required=False)
    )
    names = classifier.class_names
    aset = protocol.load_annotations(_path(cfg, args, "annotations"))
    proposals = pipeline.read_proposals(_path(cfg, args, "proposals"))
    if list(aset.categories) != list(names):
        raise ValidationError("annotation categories do not match classifier classes")

    image_order = [img[0] for img in aset.images]
    fm_by_image = {
        image_id: tensorcore.read_feature_map(_features_path(features_dir, image_id))
        for image_id in image_order
    }
    anns_by_image = _group_by_image(aset.annotations)
    props_by_image = _group_by_image(proposals)

    seen_ids = {i: n for i, n in enumerate(names) if n in set(split.seen)}
    gt_scenes = [(fm_by_image[i], anns_by_image.get(i, [])) for i in image_order]
    instances = pipeline.pool_seen_instances(gt_scenes, seen_ids)
    class_index_map = {n: i for i, n in enumerate(names)}
    bank = cachebank.build_seen_bank(instances, cfg.cache_K, class_index_map)

    prop_scenes = [(fm_by_image[i], props_by_image.get(i, [])) for i in image_order]
    pseudo = pipeline.mine_pseudo_samples(
        prop_scenes, classifier, names, split.unseen, cfg.temperature
    )
    bank = cachebank.augment_unseen(bank, pseudo, cfg.cache_K)
    cachebank.save_bank(out, bank)
    write_snapshot(out, cfg)
    print(f"cache bank: {bank.n_rows} rows (K={bank.K}, P={bank.P}) -> {out}")
    return 0


def _predict_image_job(job):
    (features_path, proposals, classifier, bank, alpha, ens_cfg, temperature) = job
    fm = tensorcore.read_feature_map(features_path)
    return pipeline.predict_scene(fm, proposals, classifier, bank, alpha, ens_cfg, temperature)


def cmd_predict(cfg: RunConfig, args) -> int:
    split = resolve_split(cfg)
    out = _path(cfg, args, "out")
    features_dir = _path(cfg, args, "features_dir")
    cache_dir = _path(cfg, args, "cache", required=False)
    classifier = _load_classifier(
        _path(cfg, args, "classifier"), _path(cfg, args, "selection", required=False)
    )
    bank = cachebank.load_bank(cache_dir) if cache_dir else None
    if bank is not None and list(bank.class_names) != list(classifier.class_names):
        raise ValidationError("cache bank classes do not match classifier classes")
    proposals = pipeline.read_proposals(_path(cfg, args, "proposals"))
    seen_set = set(split.seen)
    unknown = [n for n in classifier.class_names if n not in seen_set and n not in set(split.unseen)]
    if unknown:
        raise ValidationError(f"classes missing from split: {unknown}")
    seen_mask = np.array([n in seen_set for n in classifier.class_names], dtype=bool)
    ens_cfg = ensemble.EnsembleConfig(
        beta_seen=cfg.beta_seen, beta_unseen=cfg.beta_unseen, seen_mask=seen_mask
    )

    groups = _group_by_image(proposals)
    image_order = list(groups)
    jobs = [
        (
            _features_path(features_dir, image_id),
            groups[image_id],
            classifier,
            bank,
            cfg.alpha,
            ens_cfg,
            cfg.temperature,
        )
        for image_id in image_order
    ]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_predict_image_job, jobs))
    else:
        results = [_predict_image_job(j) for j in jobs]
    detections = [d for dets in results for d in dets]
    evaluation.write_detections(out, detections)
    write_snapshot(out, cfg)
    print(f"{len(detections)} detections -> {out}")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    split = resolve_split(cfg)
    out = _path(cfg, args, "out")
    aset = protocol.load_annotations(_path(cfg, args, "annotations"))
    dets = evaluation.read_detections(_path(cfg, args, "detections"))
    rep = evaluation.evaluate(dets, aset, split, cfg.protocol)
    paths = report.write_report(out, rep)
    write_snapshot(out, cfg)
    print(report.format_text_table(rep))
    print(f"report -> {paths['json']}")
    return 0


def cmd_split_dataset(cfg: RunConfig, args) -> int:
    split = protocol.builtin_split(args.dataset) if args.dataset else resolve_split(cfg)
    out = _path(cfg, args, "out")
    train_path = _path(cfg, args, "train_annotations", required=False)
    test_path = _path(cfg, args, "test_annotations", required=False)
    os.makedirs(out, exist_ok=True)
    wrote = []
    if train_path:
        aset = protocol.load_annotations(train_path)
        filtered = protocol.filter_train(aset, split)
        path = os.path.join(out, protocol.train_file_name(split))
        protocol.save_annotations(path, filtered)
        wrote.append(path)
    if test_path:
        aset = protocol.load_annotations(test_path)
        gz = protocol.filter_test(aset, split, "GZSRI")
        path = os.path.join(out, protocol.gzsri_file_name(split))
        protocol.save_annotations(path, gz)
        wrote.append(path)
        zs = protocol.filter_test(aset, split, "ZSRI")
        path = os.path.join(out, protocol.zsri_file_name(split))
        protocol.save_annotations(path, zs)
        wrote.append(path)
    if not wrote:
        raise BadConfig("provide --train-annotations and/or --test-annotations")
    write_snapshot(out, cfg)
    for p in wrote:
        print(f"wrote {p}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run-config file")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config key (dotted paths allowed, value parsed as JSON)",
    )

    parser = argparse.ArgumentParser(
        prog="rszero",
        description="Zero-shot remote-sensing instance segmentation head toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    # file arguments may come from the flag or from the config's "paths" map
    p = sub.add_parser("synth", parents=[common], help="generate a synthetic fixture")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser(
        "select-channels", parents=[common], help="score channels and keep the top k"
    )
    p.add_argument("--embeddings")
    p.add_argument("--out", help="selection JSON path")
    p.set_defaults(func=cmd_select_channels)

    p = sub.add_parser(
        "build-classifier", parents=[common], help="build a (refined) cosine classifier"
    )
    p.add_argument("--embeddings")
    p.add_argument("--selection", help="channel-selection JSON; omit for naive classifier")
    p.add_argument("--out", help="classifier ZEMB path")
    p.set_defaults(func=cmd_build_classifier)

    p = sub.add_parser(
        "partition-channels",
        parents=[common],
        help="split backbone channels into frozen/trainable groups",
    )
    p.add_argument("--features", help="per-class backbone features ZEMB")
    p.add_argument("--out", help="partition JSON path")
    p.set_defaults(func=cmd_partition_channels)

    p = sub.add_parser("build-cache", parents=[common], help="build the prototype cache bank")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--annotations")
    p.add_argument("--proposals")
    p.add_argument("--classifier")
    p.add_argument("--selection")
    p.add_argument("--out", help="cache bank directory")
    p.set_defaults(func=cmd_build_cache)

    p = sub.add_parser("predict", parents=[common], help="classify proposals into detections")
    p.add_argument("--features-dir", dest="features_dir")
    p.add_argument("--proposals")
    p.add_argument("--classifier")
    p.add_argument("--selection")
    p.add_argument("--cache", help="cache bank directory; omit to skip prior injection")
    p.add_argument("--out", help="detections JSONL path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="score detections against ground truth")
    p.add_argument("--detections")
    p.add_argument("--annotations")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser(
        "split-dataset", parents=[common], help="write zero-shot train/test annotation files"
    )
    p.add_argument("--train-annotations", dest="train_annotations")
    p.add_argument("--test-annotations", dest="test_annotations")
    p.add_argument("--dataset", help="builtin split name (overrides config split)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_split_dataset)

    return parser


def _error_json(e: Exception) -> str:
    payload = {"error": type(e).__name__, "message": str(e)}
    for attr in ("field", "offset", "index", "class_name", "have", "need"):
        if hasattr(e, attr) and getattr(e, attr) is not None:
            payload[attr] = getattr(e, attr)
    return json.dumps(payload)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(cfg, args)
    except (ToolkitError, OSError) as e:
        print(_error_json(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
