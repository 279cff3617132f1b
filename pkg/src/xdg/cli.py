"""Command-line surface.

Subcommands: gen-data, train, sweep, export-cams, export-distances. Configs
are strict JSON: unknown keys are rejected with their path so typos cannot
silently fall back to defaults. Exit codes: 0 success, 1 runtime abort,
2 usage/config error, 3 missing artifact. All outputs are byte-stable for
identical inputs and seeds.
"""

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from . import cam, datasets as D, harness as H, proto, tensor as T


class ConfigError(Exception):
    pass


_HP_FIELDS = {f.name: f.type for f in fields(H.HyperParams)}

_DATASET_KEYS = {
    "name": str, "path": str, "seed": int, "domain_probs": list, "label_noise": float,
    "angles": list, "classes": int, "per_class": int, "domains": int, "size": int,
    "channels": int, "source_per_class": int,
}

_TOP_KEYS = {
    "algorithm": str, "dataset": dict, "test_env": int, "val_fraction": float,
    "split_seed": int, "seed": int, "out": str, "hp": dict, "export": dict,
    "sweep": dict, "save_checkpoints": bool, "trace": bool,
}

_EXPORT_KEYS = {"cams": bool, "proto_distances": bool}
_SWEEP_KEYS = {"table": str, "trials": int, "split_seeds": int, "workers": int}


def _check_keys(node, allowed, path):
    for key, value in node.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key: {path}{key}")
        want = allowed[key]
        if want is float and isinstance(value, int):
            continue
        if want is not dict and not isinstance(value, want):
            raise ConfigError(f"config key {path}{key} must be {want.__name__}")


def validate_config(cfg):
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    _check_keys(cfg, _TOP_KEYS, "")
    if "dataset" in cfg:
        _check_keys(cfg["dataset"], _DATASET_KEYS, "dataset.")
    if "hp" in cfg:
        for key in cfg["hp"]:
            if key not in _HP_FIELDS:
                raise ConfigError(f"unknown config key: hp.{key}")
    if "export" in cfg:
        _check_keys(cfg["export"], _EXPORT_KEYS, "export.")
    if "sweep" in cfg:
        _check_keys(cfg["sweep"], _SWEEP_KEYS, "sweep.")
    if "algorithm" in cfg and cfg["algorithm"] not in H.ALGORITHMS:
        raise ConfigError(f"unknown algorithm {cfg['algorithm']!r}; pick one of {H.ALGORITHMS}")
    return cfg


def build_dataset(spec):
    """Materialize the dataset a config names (or load a container)."""
    if "path" in spec:
        return D.load_dataset(spec["path"])
    name = spec.get("name")
    seed = spec.get("seed", 0)
    if name == "cmnist":
        source = D.load_digit_source(fallback_per_class=spec.get("source_per_class", 200), seed=seed)
        return D.gen_colored_mnist(
            source,
            domain_probs=tuple(spec.get("domain_probs", (0.1, 0.2, 0.9))),
            label_noise=spec.get("label_noise", 0.25),
            seed=seed,
        )
    if name == "rmnist":
        source = D.load_digit_source(fallback_per_class=spec.get("source_per_class", 200), seed=seed)
        return D.gen_rotated_mnist(source, angles_deg=tuple(spec.get("angles", (0, 15, 30, 45, 60, 75))))
    if name == "glyphs":
        return D.gen_synth_glyphs(
            spec.get("classes", 4), spec.get("per_class", 60), spec.get("domains", 3),
            seed=seed, size=spec.get("size", 32), channels=spec.get("channels", 1),
        )
    raise ConfigError(f"unknown dataset name {name!r}; pick cmnist, rmnist, or glyphs")


def _manifest(ds):
    envs = []
    for env in ds.environments:
        counts = np.bincount(env.labels, minlength=ds.class_count)
        envs.append({
            "domain_id": int(env.domain_id),
            "count": int(env.labels.shape[0]),
            "per_class": {str(c): int(n) for c, n in enumerate(counts)},
        })
    return {"class_count": int(ds.class_count),
            "image_shape": [int(d) for d in ds.image_shape],
            "environments": envs}


def cmd_gen_data(args):
    spec = {"name": args.dataset, "seed": args.seed}
    if args.per_class is not None:
        spec["per_class" if args.dataset == "glyphs" else "source_per_class"] = args.per_class
    try:
        ds = build_dataset(spec)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    D.save_dataset(os.path.join(args.out, f"{args.dataset}.xdg"), ds)
    manifest = _manifest(ds)
    manifest["name"] = args.dataset
    manifest["seed"] = args.seed
    with open(os.path.join(args.out, f"{args.dataset}_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"wrote {args.dataset}.xdg with {len(ds.environments)} environments")
    return 0


def _load_config(path, overrides):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    validate_config(cfg)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def _prepare_splits(cfg):
    source = build_dataset(cfg.get("dataset", {"name": "glyphs"}))
    test_env = cfg.get("test_env", len(source.environments) - 1)
    if not (0 <= test_env < len(source.environments)):
        raise ConfigError(f"test_env {test_env} outside [0,{len(source.environments)})")
    frac = cfg.get("val_fraction", 0.2)
    split_seed = cfg.get("split_seed", 0)
    test = D.MultiDomainDataset([source.environments[test_env]], source.class_count)
    rest = D.MultiDomainDataset(
        [e for i, e in enumerate(source.environments) if i != test_env], source.class_count
    )
    train_split, val_split = D.split_domains(rest, D.SplitSpec(frac, seed=split_seed))
    test_train, test_val = D.split_domains(test, D.SplitSpec(frac, seed=split_seed))
    return source, train_split, val_split, test_train, test_val


def _checkpoint_meta(hp, ds, algorithm):
    return {
        "meta/channels": np.array([float(hp.channels)]),
        "meta/blocks": np.array([float(hp.blocks)]),
        "meta/classes": np.array([float(ds.class_count)]),
        "meta/in_channels": np.array([float(ds.image_shape[0])]),
        "meta/per_class": np.array([float(hp.per_class)]),
        "meta/algorithm_is_proto": np.array([1.0 if algorithm == "protodrop" else 0.0]),
    }


def cmd_train(args):
    try:
        cfg = _load_config(args.config, {"algorithm": args.algorithm, "seed": args.seed, "out": args.out})
        if args.dataset:
            cfg.setdefault("dataset", {})["name"] = args.dataset
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    algorithm = cfg.get("algorithm", "erm")
    out = cfg.get("out", "run")
    os.makedirs(out, exist_ok=True)
    hp = H.HyperParams(**cfg.get("hp", {}))
    if "seed" in cfg:
        hp.seed = cfg["seed"]
    try:
        _, train_split, val_split, test_train, test_val = _prepare_splits(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    trace_f = open(os.path.join(out, "trace.jsonl"), "w") if cfg.get("trace") else None
    try:
        result = H.train(algorithm, train_split, val_split, hp,
                         test_train=test_train, test_val=test_val, trace=trace_f)
    finally:
        if trace_f:
            trace_f.close()

    with open(os.path.join(out, "metrics.jsonl"), "w") as f:
        for record in result.metrics:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    meta = _checkpoint_meta(hp, train_split, algorithm)
    if cfg.get("save_checkpoints", True):
        ck_dir = os.path.join(out, "checkpoints")
        os.makedirs(ck_dir, exist_ok=True)
        for ck in result.checkpoints:
            T.save_arrays(os.path.join(ck_dir, f"step{ck.step:06d}.xdg"), {**ck.params, **meta})
    final = result.checkpoints[-1]
    T.save_arrays(os.path.join(out, "final.xdg"), {**final.params, **meta})

    selection = {}
    for strategy in ("training_domain", "oracle"):
        ck = H.select_model(strategy, result.checkpoints)
        selection[strategy] = {"step": ck.step, **{k: v for k, v in ck.record.items() if k != "val_acc"}}
    with open(os.path.join(out, "selected.json"), "w") as f:
        json.dump(selection, f, indent=2, sort_keys=True)

    if result.aborted:
        print("aborted on non-finite loss; last good checkpoint kept", file=sys.stderr)
        return 1
    print(f"trained {algorithm} for {final.step} steps; outputs in {out}")
    return 0


def cmd_sweep(args):
    try:
        cfg = _load_config(args.config, {"algorithm": args.algorithm, "out": args.out})
        if args.dataset:
            cfg.setdefault("dataset", {})["name"] = args.dataset
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    sweep_cfg = cfg.get("sweep", {})
    trials = args.trials or sweep_cfg.get("trials", 20)
    split_seeds = args.split_seeds or sweep_cfg.get("split_seeds", 3)
    out = cfg.get("out", "sweep")
    os.makedirs(out, exist_ok=True)
    try:
        source = build_dataset(cfg.get("dataset", {"name": "glyphs"}))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    config = {
        "source": source,
        "algorithm": cfg.get("algorithm", "divcam"),
        "table": sweep_cfg.get("table", "mask_study"),
        "test_env": cfg.get("test_env", len(source.environments) - 1),
        "val_fraction": cfg.get("val_fraction", 0.2),
        "seed": cfg.get("seed", 0),
        "hp_overrides": cfg.get("hp", {}),
    }
    report = H.run_sweep(trials, split_seeds, config, out_dir=out,
                         workers=sweep_cfg.get("workers", 1))
    H.write_sweep_csv(os.path.join(out, "report.csv"), report)
    print(f"sweep done: training-domain {report.mean_training_domain:.3f} "
          f"± {report.std_training_domain:.3f}, oracle {report.mean_oracle:.3f} "
          f"± {report.std_oracle:.3f}")
    return 0


def _load_model_checkpoint(path):
    if not os.path.exists(path):
        return None
    arrays = T.load_arrays(path)
    meta = {k.split("/")[1]: int(arrays[k].item()) for k in list(arrays) if k.startswith("meta/")}
    return arrays, meta


def cmd_export_cams(args):
    loaded = _load_model_checkpoint(args.checkpoint)
    if loaded is None:
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 3
    arrays, meta = loaded
    if not os.path.exists(args.data):
        print(f"error: dataset not found: {args.data}", file=sys.stderr)
        return 3
    ds = D.load_dataset(args.data)
    model = T.build_cnn(meta["in_channels"], meta["classes"], channels=meta["channels"],
                        blocks=meta["blocks"], seed=0)
    H.load_checkpoint_into({k: v for k, v in arrays.items() if not k.startswith("meta/")},
                           model.parameters())
    os.makedirs(args.out, exist_ok=True)
    env = ds.environments[args.env]
    count = min(args.samples, env.labels.shape[0])
    for i in range(count):
        image = env.images[i : i + 1]
        c = args.class_id if args.class_id is not None else int(env.labels[i])
        m = cam.grad_cam(model, image, c)
        base = image[0].mean(axis=0)
        cam.export_heatmap(m.values[0], base, os.path.join(args.out, f"cam_env{args.env}_{i:03d}_class{c}.ppm"))
    print(f"wrote {count} overlays to {args.out}")
    return 0


def cmd_export_distances(args):
    loaded = _load_model_checkpoint(args.checkpoint)
    if loaded is None:
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 3
    arrays, meta = loaded
    if "proto.bank" not in arrays:
        print("error: checkpoint has no prototype bank", file=sys.stderr)
        return 3
    class_of = np.repeat(np.arange(meta["classes"]), meta["per_class"])
    layer = proto.PrototypeLayer(meta["channels"], class_of, seed=0)
    layer.prototypes.value[...] = arrays["proto.bank"]
    l2, cos = proto.pairwise_distances(layer)
    os.makedirs(args.out, exist_ok=True)
    proto.export_distance_csv(os.path.join(args.out, "l2.csv"), l2)
    proto.export_distance_csv(os.path.join(args.out, "cosdist.csv"), cos)
    cam.export_map_pgm(l2, os.path.join(args.out, "l2.pgm"))
    cam.export_map_pgm(cos, os.path.join(args.out, "cosdist.pgm"))
    print(f"wrote distance matrices ({l2.shape[0]}x{l2.shape[0]}) to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="xdg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a dataset container + manifest")
    p.add_argument("dataset", help="cmnist | rmnist | glyphs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=os.environ.get("XDG_DATA_DIR", "data"))
    p.add_argument("--per-class", type=int, default=None, help="source images per class")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--algorithm", default=None, choices=H.ALGORITHMS)
    p.add_argument("--dataset", default=None, help="override the config's dataset name")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="random hyperparameter search")
    p.add_argument("--config", required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--split-seeds", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--algorithm", default=None, choices=H.ALGORITHMS)
    p.add_argument("--dataset", default=None, help="override the config's dataset name")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("export-cams", help="render activation-map overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="cams")
    p.add_argument("--env", type=int, default=0)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--class-id", type=int, default=None)
    p.set_defaults(fn=cmd_export_cams)

    p = sub.add_parser("export-distances", help="export prototype distance matrices")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="distances")
    p.set_defaults(fn=cmd_export_distances)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
