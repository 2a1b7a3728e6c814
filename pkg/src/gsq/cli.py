"""Command-line entry point: gen, train, compress, decompress, render, eval.

Exit codes: 0 success, 1 usage, 2 data/format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import container, scenelab, trainer
from .codec import CodecConfig, ConditioningViews, compress, decode_codes
from .config import parse_config
from .gauss import Scene
from .grid import voxelize
from .metrics import evaluate_scene
from .render import RenderConfig, read_png, render, write_png
from .rvq import CorruptStreamError

log = logging.getLogger("gsq")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass(frozen=True)
class GenConfig:
    scenes: int = 64
    test: int = 16
    complexity: str = "tiny"
    max_images: int = 6
    image_size: int = 64


@dataclass(frozen=True)
class DecodeConfig:
    stage: str = "fine"


def _read_config(path, *classes):
    """Split one ``key = value`` file across dataclasses; ``model.`` keys go to CodecConfig."""
    if path is None:
        return [c() for c in classes]
    buckets = {c: [] for c in classes}
    names = {c: {f.name for f in dataclasses.fields(c)} for c in classes}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = (t.strip() for t in line.partition("="))
        if key.startswith("model.") and CodecConfig in classes:
            target, key = CodecConfig, key[len("model."):]
        else:
            target = next((c for c in classes if c is not CodecConfig and key in names[c]), None)
        if target is None or key not in names[target]:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        buckets[target].append(f"{key} = {value}")
    return [parse_config("\n".join(buckets[c]), c) for c in classes]


def _changed(cfg) -> dict:
    """Fields of a dataclass config that differ from their defaults."""
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if getattr(cfg, f.name) != f.default}


def _seed(seed: int) -> None:
    np.random.seed(seed)
    torch.manual_seed(seed)


def _scene_dir(root: Path, scene_id: str) -> Path:
    return root / scene_id


# -- commands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    (cfg,) = _read_config(args.config, GenConfig)
    cfg = dataclasses.replace(cfg, **{k: v for k, v in (("scenes", args.scenes), ("test", args.test)) if v is not None})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = scenelab.build_dataset(cfg.scenes, cfg.test, seed=args.seed, complexity=cfg.complexity,
                                max_images=cfg.max_images)
    scenelab.write_manifest(out / "manifest.txt", ds, cfg.complexity)
    for r in ds.train + ds.test:
        d = _scene_dir(out, r.scene_id)
        d.mkdir(exist_ok=True)
        container.write_ply(d / "archived.ply", r.archived)
        container.write_ply(d / "changed.ply", r.changed)
        specs = trainer.conditioning_specs(r.seed, size=cfg.image_size)
        scenelab.write_cameras(d / "cond_cams.txt", specs[: r.n_images])
        for i, spec in enumerate(specs[: r.n_images]):
            write_png(d / f"cond_{i:02d}.png", render(r.changed, spec.camera()))
        scenelab.write_cameras(d / "eval_cams.txt", trainer.eval_specs(r.seed, size=cfg.image_size))
    print(f"wrote {len(ds.train)} train and {len(ds.test)} test scenes to {out}")
    return EXIT_OK


def _load_records(data: Path):
    ds = scenelab.read_manifest(data / "manifest.txt")
    def load(r):
        d = _scene_dir(data, r.scene_id)
        return dataclasses.replace(r, archived=container.read_ply(d / "archived.ply"),
                                   changed=container.read_ply(d / "changed.ply"))
    return [load(r) for r in ds.train], [load(r) for r in ds.test]


def cmd_train(args) -> int:
    tcfg, mcfg = _read_config(args.config, trainer.TrainConfig, CodecConfig)
    if args.desk:
        tcfg = trainer.desk_config(**_changed(tcfg))
        mcfg = trainer.desk_model_config(**_changed(mcfg))
    if args.epochs:
        tcfg = trainer.rescale_schedule(tcfg, args.epochs)
    tcfg = dataclasses.replace(tcfg, seed=args.seed)
    _seed(args.seed)
    train_recs, test_recs = _load_records(Path(args.data))
    train = [trainer.prepare_scene(r, mcfg) for r in train_recs]
    val = trainer.prepare_scene(test_recs[0], mcfg) if test_recs else None
    res = trainer.train_loop(train, tcfg, mcfg, val=val, out_dir=args.out)
    print(f"trained {tcfg.epochs} epochs on {len(train)} scenes; codebook pack {res.pack.hash:016x} -> {args.out}")
    return EXIT_OK


def _in_unit_cube(scene: Scene) -> bool:
    return bool(np.all(scene.mu >= 0.0) and np.all(scene.mu <= 1.0))


def cmd_compress(args) -> int:
    _read_config(args.config, DecodeConfig)
    _seed(args.seed)
    model = trainer.load_model(args.model)
    scene = container.read_ply(args.scene)
    if len(scene) == 0:
        raise DataError("scene has no Gaussians")
    if not _in_unit_cube(scene):
        raise DataError("scene positions must lie in the unit cube [0, 1]^3")
    gs = voxelize(scene, model.cfg.G, model.cfg.K)
    codes = compress(gs, model)
    pack = container.CodebookPack(model.rvq_geo, model.rvq_tex)
    data = container.write_scene(codes, pack.hash)
    Path(args.out).write_bytes(data)
    bits = container.stream_bits(codes)
    payload = len(data) - container.HEADER_BYTES
    print(f"blocks={codes.M} payload_bits={bits} payload_bytes={payload} file_bytes={len(data)}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    (dcfg,) = _read_config(args.config, DecodeConfig)
    _seed(args.seed)
    model = trainer.load_model(args.model)
    codes, h = container.read_scene(Path(args.scene).read_bytes())
    container.check_pack(h, container.CodebookPack(model.rvq_geo, model.rvq_tex))
    views = None
    if args.images:
        if not args.cameras:
            raise UsageError("--images needs --cameras")
        specs = scenelab.read_cameras(args.cameras)
        if len(specs) < len(args.images):
            raise DataError(f"{len(args.images)} images but only {len(specs)} cameras")
        views = ConditioningViews([s.camera() for s in specs[: len(args.images)]],
                                  [read_png(p) for p in args.images])
    gs, _ = decode_codes(codes, model, views, args.stage or dcfg.stage)
    container.write_ply(args.out, gs.to_scene())
    print(f"decoded {len(gs)} Gaussians from {codes.M} blocks ({'%d images' % len(args.images) if args.images else 'no images'})")
    return EXIT_OK


def cmd_render(args) -> int:
    (rcfg,) = _read_config(args.config, RenderConfig)
    scene = container.read_ply(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = scenelab.read_cameras(args.camera)
    for i, s in enumerate(specs):
        write_png(out / f"view_{i:03d}.png", render(scene, s.camera(), rcfg))
    print(f"rendered {len(specs)} views to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    (rcfg,) = _read_config(args.config, RenderConfig)
    pred = container.read_ply(args.pred)
    truth_dir = Path(args.truth)
    cams_path = Path(args.cameras) if args.cameras else truth_dir / "eval_cams.txt"
    cams = [s.camera() for s in scenelab.read_cameras(cams_path)]
    truth = container.read_ply(truth_dir / "changed.ply")
    bits = None
    if args.gsq:
        codes, _ = container.read_scene(Path(args.gsq).read_bytes())
        bits = container.stream_bits(codes)
    report = evaluate_scene(pred, truth, cams, bits, rcfg)
    report.write_csv(args.out)
    print(report.summary())
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gsq", description="Grid-block Gaussian splat compression with shared RVQ codebooks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="key = value config file")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen", cmd_gen, "generate a procedural dataset")
    sp.add_argument("--scenes", type=int, help="number of training scenes")
    sp.add_argument("--test", type=int, help="number of held-out scenes")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a model and its shared codebooks")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--desk", action="store_true", help="start from the single-core desk schedule")

    sp = add("compress", cmd_compress, "encode a PLY scene into a .gsq file")
    sp.add_argument("scene")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)

    sp = add("decompress", cmd_decompress, "decode a .gsq file, optionally conditioned on images")
    sp.add_argument("scene")
    sp.add_argument("--model", required=True)
    sp.add_argument("--images", nargs="+")
    sp.add_argument("--cameras")
    sp.add_argument("--stage", choices=["scene", "coarse", "fine"])
    sp.add_argument("--out", required=True)

    sp = add("render", cmd_render, "render a PLY scene from a camera file")
    sp.add_argument("scene")
    sp.add_argument("--camera", required=True)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "PSNR/SSIM of a predicted scene against a truth scene directory")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True, help="directory holding changed.ply and eval_cams.txt")
    sp.add_argument("--cameras", help="camera file overriding <truth>/eval_cams.txt")
    sp.add_argument("--gsq", help="compressed file whose payload size is reported")
    sp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"gsq {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.NumericalError as e:
        print(f"gsq {args.command}: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CorruptStreamError, container.FormatError, container.WrongCodebookError,
            FileNotFoundError, IsADirectoryError, ValueError) as e:
        print(f"gsq {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
