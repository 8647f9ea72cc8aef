"""Command-line entry point: ``cityseg <subcommand> ...``."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fixtures
from .config import RunConfig, load_config
from .errors import CitySegError, ConfigError, ShapeError
from .gradcheck import TOL, run_suite
from .hierarchy import LabelHierarchy, build_hierarchy
from .metrics import confusion_ids, metrics
from .numcore import ParamStore
from .pcio import DatasetManifest, PointCloud, load_cloud, save_cloud
from .sampling import grid_sample, serialize_order
from .training import (
    Model,
    ReplayBuffer,
    fill_replay,
    finetune_incremental,
    predict_cloud,
    train_stage1,
    train_stage2,
    zero_shot_infer,
)


def _read_manifest(path, h: Optional[LabelHierarchy] = None):
    """Clouds listed in a manifest (paths relative to it), plus tags applied to ``h``."""
    man = DatasetManifest.read(path)
    root = Path(path).parent
    clouds = []
    for p, dom, nodes in man.entries:
        src = Path(p) if Path(p).is_absolute() else root / p
        files = sorted(src.glob("*.cspc")) if src.is_dir() else [src]
        clouds += [load_cloud(f, dom) for f in files]
        if h is not None and nodes:
            h = h.with_tags(dom, nodes)
    return clouds, h


def _build_model(cfg: RunConfig, h: LabelHierarchy, init: Optional[str]) -> Model:
    provider = cfg.embedding.provider()
    if provider.dim != cfg.encoder.embed_dim:
        raise ShapeError(f"text embedding dim {provider.dim} != encoder embed_dim {cfg.encoder.embed_dim}")
    L = None if cfg.graph_layers < 0 else cfg.graph_layers
    model = Model.create(cfg.encoder, h, provider, seed=cfg.seed, graph_layers_=L)
    if init:
        loaded = ParamStore.load(init)
        for k in model.params.names():
            if k not in loaded:
                raise ConfigError(f"snapshot {init} lacks parameter {k}")
            if loaded[k].shape != model.params[k].shape:
                raise ShapeError(f"parameter {k}: snapshot shape {loaded[k].shape} != configured "
                                 f"{model.params[k].shape} (check hidden_dim/embed_dim)")
        extra = set(loaded.names()) - set(model.params.names())
        if extra:
            raise ConfigError(f"snapshot {init} has parameters the config does not: {sorted(extra)[:3]}")
        model.params = loaded
    return model


def _parse_leaf(text: str):
    parent, _, name = text.partition(":")
    if not name:
        raise ConfigError(f"--new-leaf expects PARENT_ID:TEXT, got {text!r}")
    return int(parent), name


def _snapshots(args, cfg: RunConfig):
    if cfg.snapshot_every <= 0:
        return None
    stem = Path(args.out)

    def on_epoch(epoch, model):
        if (epoch + 1) % cfg.snapshot_every == 0:
            model.params.save(stem.with_suffix(f".e{epoch + 1}.cspm"))
    return on_epoch


# ---------------------------------------------------------------- subcommands

def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    if args.fixture == "toy":
        ds = fixtures.toy_dataset(args.scenes, args.test_scenes, seed=cfg.seed)
        h, train, tests = ds.hierarchy, ds.train, ds.test_by_domain
    elif args.fixture == "conflict":
        ds = fixtures.conflict_dataset(args.scenes, args.test_scenes, seed=cfg.seed)
        h, train, tests = ds.hierarchy, ds.train, {1: ds.test}
    else:
        # a new domain whose scenes contain boats; the manifests already list the
        # id the boat leaf receives once inserted under water
        tr, te = fixtures.boat_domain(args.scenes, args.test_scenes, seed=cfg.seed)
        base = fixtures.default_hierarchy()
        h = base.with_tags(fixtures.NEW_DOMAIN, base.leaves())
        train, tests = tr, {fixtures.NEW_DOMAIN: te}
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    for d in {c.domain_id for c in train}:
        (out / "train" / f"d{d}").mkdir(exist_ok=True)
    for d in tests:
        (out / "test" / f"d{d}").mkdir(exist_ok=True)
    counts: dict = {}
    for c in train:
        k = counts[c.domain_id] = counts.get(c.domain_id, -1) + 1
        save_cloud(c, out / "train" / f"d{c.domain_id}" / f"scene{k:03d}.cspc")
    for dom, clouds in tests.items():
        for k, c in enumerate(clouds):
            save_cloud(c, out / "test" / f"d{dom}" / f"scene{k:03d}.cspc")
    doms = sorted(counts)
    extra = (max(h.nodes) + 1,) if args.fixture == "boats" else ()

    def tags(d):
        return tuple(h.nodes_for_domain(d)) + extra
    DatasetManifest(tuple((f"train/d{d}", d, tags(d)) for d in doms)).write(out / "train.tsv")
    DatasetManifest(tuple((f"test/d{d}", d, tags(d)) for d in sorted(tests))).write(out / "test.tsv")
    if args.fixture != "boats":
        (out / "hierarchy.txt").write_text(h.to_text())
    print(f"wrote {len(train)} training and {sum(len(v) for v in tests.values())} held-out clouds to {out}")
    return 0


def cmd_preprocess(args, cfg: RunConfig) -> int:
    cloud = load_cloud(args.input, args.domain)
    grid = args.grid if args.grid is not None else cfg.sampler.local_grid
    curve = args.curve or cfg.sampler.curve
    down = grid_sample(cloud, grid)
    order = serialize_order(down.positions, grid, curve)
    save_cloud(down.subset(order), args.output)
    print(f"{cloud.N} -> {down.N} points ({curve} order, cell {grid})")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    h = build_hierarchy(args.hierarchy)
    clouds, h = _read_manifest(args.manifest, h)
    model = _build_model(cfg, h, args.init)
    log_path = args.log or str(Path(args.out).with_suffix(".log"))
    if args.stage == 1:
        tlog = train_stage1(model, clouds, cfg.train, cfg.sampler, log_path, _snapshots(args, cfg))
    else:
        tlog = train_stage2(model, clouds, cfg.train, cfg.sampler, log_path, _snapshots(args, cfg))
    model.params.save(args.out)
    for line in tlog.lines():
        print(line)
    print(f"checksum\t{model.params.checksum()}")
    return 0


def _active_and_truth(h: LabelHierarchy, cloud: PointCloud, granularity: str):
    if granularity == "base":
        active = h.base_classes()
    elif granularity == "leaf":
        active = h.leaves()
    else:
        active = h.nodes_for_domain(cloud.domain_id)
    return active, h.annotate(cloud.labels, active)


def _evaluate(model: Model, clouds, granularity: str, cfg: RunConfig, h=None):
    h = h or model.hierarchy
    total = None
    labels = sorted({n for c in clouds for n in _active_and_truth(h, c, granularity)[0]})
    for c in clouds:
        if c.labels is None:
            raise CitySegError("evaluation clouds need labels")
        active, truth = _active_and_truth(h, c, granularity)
        pred = predict_cloud(model, c, active, cfg.train.tau, cfg.sampler, hierarchy=h, seed=cfg.seed)
        cm = confusion_ids(pred.argmax, truth, labels)
        total = cm if total is None else total + cm
    return metrics(total, [h[n].text for n in labels])


def cmd_eval(args, cfg: RunConfig) -> int:
    h = build_hierarchy(args.hierarchy)
    clouds, h = _read_manifest(args.manifest, h)
    model = _build_model(cfg, h, args.model)
    report = _evaluate(model, clouds, args.granularity, cfg)
    text = report.render()
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    return 0


def cmd_finetune(args, cfg: RunConfig) -> int:
    h = build_hierarchy(args.hierarchy)
    old, h = _read_manifest(args.old_manifest, h)
    model = _build_model(cfg, h, args.model)
    new_domains = sorted({d for _, d, _ in DatasetManifest.read(args.manifest).entries})
    leaves = [(*_parse_leaf(x), tuple(new_domains)) for x in args.new_leaf]
    replay = ReplayBuffer(cfg.train.replay_budget, cfg.sampler.local_count, cfg.seed)
    if cfg.train.replay_budget > 0:
        fill_replay(replay, model, old, cfg.sampler, seed=cfg.seed)
    new_clouds, _ = _read_manifest(args.manifest, None)
    # new leaves are tagged for every new domain; existing nodes get the manifest tags now
    for _, dom, nodes in DatasetManifest.read(args.manifest).entries:
        known = [n for n in nodes if n in model.hierarchy.nodes]
        if known:
            model.hierarchy = model.hierarchy.with_tags(dom, known)
    model, new_ids, tlog = finetune_incremental(model, new_clouds, leaves, replay, cfg.train, cfg.sampler,
                                                args.log or str(Path(args.out).with_suffix(".log")),
                                                _snapshots(args, cfg))
    model.params.save(args.out)
    Path(args.hierarchy_out).write_text(model.hierarchy.to_text())
    for line in tlog.lines():
        print(line)
    print(f"new_ids\t{','.join(str(i) for i in new_ids)}")
    print(f"checksum\t{model.params.checksum()}")
    return 0


def cmd_zeroshot(args, cfg: RunConfig) -> int:
    h = build_hierarchy(args.hierarchy)
    model = _build_model(cfg, h, args.model)
    cloud = load_cloud(args.input, args.domain)
    before = model.params.checksum()
    leaves = [_parse_leaf(x) for x in args.new_leaf]
    pred, h_ext, new_ids = zero_shot_infer(model, cloud, leaves, cfg.train.tau, cfg.sampler, seed=cfg.seed)
    after = model.params.checksum()
    print(f"checksum_before\t{before}")
    print(f"checksum_after\t{after}")
    print(f"new_ids\t{','.join(str(i) for i in new_ids)}")
    if args.labels_out:
        np.savetxt(args.labels_out, pred.argmax, fmt="%d")
    if cloud.labels is not None:
        labels = list(pred.label_ids)
        truth = h_ext.annotate(cloud.labels, labels)
        sys.stdout.write(metrics(confusion_ids(pred.argmax, truth, labels), [h_ext[n].text for n in labels]).render())
    return 0 if before == after else 1


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    def report(name, err, dt):
        status = "ok" if err < TOL else "FAIL"
        print(f"{name}\tmax_rel_err={err:.3e}\t{dt:.1f}s\t{status}")

    res = run_suite(range(args.seeds), report)
    worst = max(res.values())
    print(f"max relative error {worst:.3e} over {args.seeds} seeds")
    return 0 if worst < TOL else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cityseg", description="Hierarchical multi-domain point cloud segmentation")
    ap.add_argument("--config", help="INI config file (defaults apply when omitted)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-domain fixture as CSPC files")
    g.add_argument("--out", required=True)
    g.add_argument("--fixture", choices=("toy", "conflict", "boats"), default="toy",
                   help="boats: a new domain containing an unseen class (leaf under water)")
    g.add_argument("--scenes", type=int, default=13, help="training scenes per domain")
    g.add_argument("--test-scenes", type=int, default=3)
    g.set_defaults(fn=cmd_generate)

    p = sub.add_parser("preprocess", help="grid-sample a cloud and store it in curve order")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--grid", type=float)
    p.add_argument("--curve", choices=("morton", "hilbert"))
    p.add_argument("--domain", type=int, default=0)
    p.set_defaults(fn=cmd_preprocess)

    t = sub.add_parser("train", help="run training stage 1 or 2")
    t.add_argument("--hierarchy", required=True)
    t.add_argument("--manifest", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--init", help="parameter snapshot to resume from")
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a model on labelled clouds")
    e.add_argument("--hierarchy", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--granularity", choices=("leaf", "base", "domain"), default="domain")
    e.add_argument("--report")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("finetune", help="insert leaves and fine-tune with replay")
    f.add_argument("--hierarchy", required=True)
    f.add_argument("--model", required=True)
    f.add_argument("--manifest", required=True, help="new-domain clouds")
    f.add_argument("--old-manifest", required=True, help="old-domain clouds feeding the replay buffer")
    f.add_argument("--new-leaf", action="append", default=[], metavar="PARENT_ID:TEXT")
    f.add_argument("--out", required=True)
    f.add_argument("--hierarchy-out", required=True)
    f.add_argument("--log")
    f.set_defaults(fn=cmd_finetune)

    z = sub.add_parser("zeroshot", help="classify with extra leaves and frozen parameters")
    z.add_argument("--hierarchy", required=True)
    z.add_argument("--model", required=True)
    z.add_argument("--input", required=True)
    z.add_argument("--domain", type=int, default=0)
    z.add_argument("--new-leaf", action="append", default=[], metavar="PARENT_ID:TEXT")
    z.add_argument("--labels-out")
    z.set_defaults(fn=cmd_zeroshot)

    c = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    c.add_argument("--seeds", type=int, default=10)
    c.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)  # usage errors exit with status 2
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except (CitySegError, OSError, KeyError) as exc:
        print(f"cityseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
