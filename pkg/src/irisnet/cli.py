"""Command-line front end: ``irisnet <subcommand> [options]``.

Subcommands: gen-data, train-detector, train-segmenter, train-embedder,
enroll, match, evaluate. Settings come from an INI file (``--config``) with
sections [run], [data], [detector], [segmenter], [embedder]; command-line
flags override it. Every command writes ``run_manifest.<command>.json`` to its output
directory with the resolved config, its hash, the seed and output checksums.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataio import FormatError

log = logging.getLogger("irisnet")

SECTIONS = ("run", "data", "detector", "segmenter", "embedder")
DATA_DEFAULTS = {"identities": "10", "per_identity": "20", "size": "128", "spectrum": "NIR",
                 "first_identity": "0", "first_pose": "0", "train": "", "test": ""}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _coerce(text: str, default):
    t = text.strip()
    if t.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        if t.lower() in ("1", "true", "yes", "on"):
            return True
        if t.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(t)
    if isinstance(default, float) or default is None:
        return float(t)
    if isinstance(default, str):
        return t
    raise UsageError(f"cannot set a {type(default).__name__} from the config file")


def _apply(obj, section: dict, skip=()):
    """Return a copy of dataclass ``obj`` with matching keys from ``section``."""
    names = {f.name for f in fields(obj)}
    kw = {}
    for k, v in section.items():
        if k in names and k not in skip:
            try:
                kw[k] = _coerce(v, getattr(obj, k))
            except ValueError as e:
                raise UsageError(f"bad value for {k}: {e}") from None
    return replace(obj, **kw)


class Config:
    def __init__(self, text: str = "", origin: str = "<defaults>"):
        self.parser = configparser.ConfigParser()
        try:
            self.parser.read_string(text, source=origin)
        except configparser.Error as e:
            raise UsageError(f"{origin}: {e}") from None
        unknown = set(self.parser.sections()) - set(SECTIONS)
        if unknown:
            raise UsageError(f"{origin}: unknown sections {sorted(unknown)}")
        self.text, self.origin = text, origin

    @classmethod
    def load(cls, path: Optional[str]) -> "Config":
        if not path:
            return cls()
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {path}")
        return cls(p.read_text(), str(p))

    def section(self, name: str) -> dict:
        return dict(self.parser[name]) if self.parser.has_section(name) else {}

    def get(self, section: str, key: str, default: str) -> str:
        return self.section(section).get(key, default)

    def resolve_path(self, value: str) -> str:
        if not value or self.origin == "<defaults>":
            return value
        p = Path(value)
        return str(p if p.is_absolute() else Path(self.origin).parent / p)

    @property
    def scale(self) -> str:
        s = self.get("run", "scale", "desk")
        if s not in ("desk", "full"):
            raise UsageError(f"[run] scale must be desk or full, got {s!r}")
        return s

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


def detector_setup(cfg: Config):
    from .detect import DetectorConfig, DetectorRecipe
    desk = cfg.scale == "desk"
    net = DetectorConfig.desk() if desk else DetectorConfig(in_channels=1)
    recipe = DetectorRecipe.desk() if desk else DetectorRecipe()
    sec = cfg.section("detector")
    return _apply(net, sec, skip=("layers", "fc_widths")), _apply(recipe, sec, skip=("seed",))


def segmenter_setup(cfg: Config):
    from .segment import SegRecipe
    desk = cfg.scale == "desk"
    sec = cfg.section("segmenter")
    width = float(sec.get("width", 0.125 if desk else 1.0))
    recipe = SegRecipe.desk() if desk else SegRecipe()
    return width, _apply(recipe, sec, skip=("seed",))


def embedder_setup(cfg: Config):
    from .embed import EmbedderConfig, EmbedRecipe
    desk = cfg.scale == "desk"
    sec = cfg.section("embedder")
    template = EmbedderConfig.desk(classes=1) if desk else EmbedderConfig(classes=1)
    template = _apply(template, sec, skip=("classes", "in_channels", "widths"))
    overrides = {f.name: getattr(template, f.name) for f in fields(template)
                 if f.name not in ("classes", "in_channels")}
    recipe = EmbedRecipe.desk() if desk else EmbedRecipe()
    return overrides, _apply(recipe, sec, skip=("seed",)), sec.get("variant")


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, command: str, args: argparse.Namespace, cfg: Config,
                       outputs: list, inputs: list = ()) -> Path:
    """Everything needed to replay the run: argv-level options, config text, checksums."""
    from . import __version__
    out.mkdir(parents=True, exist_ok=True)
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    record = {
        "command": command,
        "options": {k: (str(v) if isinstance(v, Path) else v) for k, v in opts.items()},
        "seed": args.seed,
        "config_file": cfg.origin,
        "config_sha256": cfg.digest(),
        "config_text": cfg.text,
        "irisnet_version": __version__,
        "numpy_version": np.__version__,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(Path(p).relative_to(out)): _sha256(Path(p)) for p in outputs},
    }
    path = out / f"run_manifest.{command}.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _data_manifest(args, cfg: Config, key: str = "train") -> Path:
    value = args.data or cfg.resolve_path(cfg.get("data", key, ""))
    if not value:
        raise UsageError(f"no dataset: pass --data or set [data] {key}")
    p = Path(value)
    if not p.exists():
        raise UsageError(f"dataset manifest not found: {p}")
    return p


def _load_samples(manifest: Path):
    from .dataio import load_dataset, read_manifest
    rows = read_manifest(manifest)
    return rows, load_dataset(manifest)


def _seed(args, cfg: Config) -> int:
    if args.seed is None:
        args.seed = int(cfg.get("run", "seed", "0"))
    return args.seed


def _epoch_logger(name: str):
    def cb(epoch, hist):
        print(f"{name} epoch {epoch + 1} loss {hist.losses[-1]:.6f} lr {hist.lrs[-1]:.2e}", flush=True)
    return cb


def cmd_gen_data(args, cfg: Config) -> int:
    from .dataio import generate_dataset
    seed = _seed(args, cfg)
    d = {k: cfg.get("data", k, v) for k, v in DATA_DEFAULTS.items()}
    n_id = args.identities if args.identities is not None else int(d["identities"])
    per = args.per_identity if args.per_identity is not None else int(d["per_identity"])
    # the seed offsets both identity and pose streams so different seeds give disjoint sets
    first_id = (args.first_identity if args.first_identity is not None
                else int(d["first_identity"])) + seed * 100000
    first_pose = (args.first_pose if args.first_pose is not None
                  else int(d["first_pose"])) + seed * 100000
    path = generate_dataset(args.out, n_id, per, d["spectrum"], int(d["size"]), first_id, first_pose)
    outs = sorted(p for p in args.out.rglob("*") if p.is_file() and not p.name.startswith("run_manifest."))
    write_run_manifest(args.out, "gen-data", args, cfg, outs)
    print(f"wrote {n_id * per} samples, manifest {path}")
    return 0


def cmd_train_detector(args, cfg: Config) -> int:
    from .detect import train_detector
    from .serialize import save_model
    seed = _seed(args, cfg)
    manifest = _data_manifest(args, cfg)
    net_cfg, recipe = detector_setup(cfg)
    if args.epochs is not None:
        recipe = replace(recipe, epochs=args.epochs)
    _, samples = _load_samples(manifest)
    channels = samples[0].image.shape[0]
    net_cfg = replace(net_cfg, in_channels=channels)
    model, means, hist = train_detector(samples, net_cfg, recipe, seed, _epoch_logger("detector"))
    path = save_model(args.out / "detector.idln", model, means)
    write_run_manifest(args.out, "train-detector", args, cfg, [path], [manifest])
    print(f"saved {path}")
    return 0


def cmd_train_segmenter(args, cfg: Config) -> int:
    from .segment import train_segmenter
    from .serialize import save_model
    seed = _seed(args, cfg)
    manifest = _data_manifest(args, cfg)
    width, recipe = segmenter_setup(cfg)
    if args.epochs is not None:
        recipe = replace(recipe, epochs=args.epochs)
    _, samples = _load_samples(manifest)
    net, means, hist = train_segmenter(samples, width, recipe, seed, _epoch_logger("segmenter"))
    path = save_model(args.out / "segmenter.idln", net, means)
    write_run_manifest(args.out, "train-segmenter", args, cfg, [path], [manifest])
    print(f"saved {path}")
    return 0


def cmd_train_embedder(args, cfg: Config) -> int:
    from .pipeline import train_embedder_from_samples
    from .serialize import save_model
    seed = _seed(args, cfg)
    manifest = _data_manifest(args, cfg)
    overrides, recipe, variant = embedder_setup(cfg)
    variant = _variants(args.variant or variant or "segmented")
    if args.epochs is not None:
        recipe = replace(recipe, epochs=args.epochs)
    _, samples = _load_samples(manifest)
    net, means, hist, classes = train_embedder_from_samples(
        samples, overrides, recipe, variant, seed, _epoch_logger("embedder"))
    print(f"embedder training-set loss initial {hist.initial_loss:.6f} final {hist.final_loss:.6f}")
    path = save_model(args.out / "embedder.idln", net, means)
    classes_path = args.out / "embedder_classes.txt"
    classes_path.write_text("".join(f"{k} {c}\n" for k, c in enumerate(classes)))
    write_run_manifest(args.out, "train-embedder", args, cfg, [path, classes_path], [manifest])
    print(f"saved {path}")
    return 0


def _variants(text: str) -> tuple:
    """Comma-separated input styles for train-embedder."""
    from .pipeline import VARIANTS
    out = tuple(v.strip() for v in text.split(",") if v.strip())
    bad = [v for v in out if v not in VARIANTS]
    if not out or bad:
        raise UsageError(f"unknown variant(s) {bad or text!r}; choose from {', '.join(VARIANTS)}")
    return out


def _templates(args, cfg: Config, manifest: Path, binary: bool):
    """Run the pipeline over every sample; returns (templates, skipped rows)."""
    from .pipeline import Models, NoDetection, embedder_inputs, templates_from_inputs
    if not args.models:
        raise UsageError("--models DIR is required")
    variant = args.variant or "segmented"
    models = Models.load(args.models, need_segmenter=variant == "segmented")
    rows, samples = _load_samples(manifest)
    inputs = embedder_inputs([s.image for s in samples], models, variant)
    meta = [(r.subject, r.eye, r.spectrum, Path(r.image).stem) for r in rows]
    out = templates_from_inputs(inputs, models, meta, binary)
    kept = [t for t in out if not isinstance(t, NoDetection)]
    skipped = [(r.image, t.reason) for r, t in zip(rows, out) if isinstance(t, NoDetection)]
    for image, reason in skipped:
        print(f"no-detection: {image}: {reason}", file=sys.stderr)
    return kept, skipped


def _write_skipped(out: Path, skipped) -> Path:
    path = out / "no_detection.txt"
    path.write_text("".join(f"{img}\t{reason}\n" for img, reason in skipped))
    return path


def cmd_enroll(args, cfg: Config) -> int:
    from .codec import Gallery
    _seed(args, cfg)
    manifest = _data_manifest(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    kept, skipped = _templates(args, cfg, manifest, args.metric == "hamming")
    if not kept:
        print("nothing to enroll: every image was a no-detection", file=sys.stderr)
        return 3
    gbin, gidx = Gallery(kept).save(args.out / "gallery.bin")
    skip = _write_skipped(args.out, skipped)
    write_run_manifest(args.out, "enroll", args, cfg, [gbin, gidx, skip], [manifest])
    print(f"enrolled {len(kept)} templates ({len(skipped)} no-detections) into {gbin}")
    return 0


def cmd_match(args, cfg: Config) -> int:
    from .codec import Gallery, match_probe, write_scores
    _seed(args, cfg)
    if not args.gallery:
        raise UsageError("--gallery PATH is required")
    gallery = Gallery.load(args.gallery)
    manifest = _data_manifest(args, cfg, key="test")
    args.metric = "hamming" if gallery.representation == "binary" else "cosine"
    args.out.mkdir(parents=True, exist_ok=True)
    probes, skipped = _templates(args, cfg, manifest, args.metric == "hamming")
    score_dir = args.out / "scores"
    score_dir.mkdir(exist_ok=True)
    outs = []
    for p in probes:
        prefix = f"{p.subject}_{p.eye}_"
        # generated image stems already start with subject_eye_
        path = score_dir / f"{p.sample if p.sample.startswith(prefix) else prefix + p.sample}.txt"
        write_scores(path, match_probe(p, gallery))
        outs.append(path)
    outs.append(_write_skipped(args.out, skipped))
    write_run_manifest(args.out, "match", args, cfg, outs, [manifest, Path(args.gallery)])
    print(f"scored {len(probes)} probes against {len(gallery)} gallery templates")
    return 0


def cmd_evaluate(args, cfg: Config) -> int:
    from .evaluate import (ProtocolSpec, eer, protocol, read_scoreset, roc_auc, summarize,
                           write_report, write_roc_csv, write_scoreset)
    seed = _seed(args, cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    inputs = []
    if args.scores:
        scores = read_scoreset(args.scores)
        roc = roc_auc(scores)
        report = {"metric": args.metric, "eer": eer(scores), "auc": roc.auc,
                  "genuine_pairs": len(scores.genuine), "impostor_pairs": len(scores.impostor)}
        inputs.append(Path(args.scores))
    else:
        manifest = _data_manifest(args, cfg, key="test")
        inputs.append(manifest)
        templates, skipped = _templates(args, cfg, manifest, args.metric == "hamming")
        split = float(cfg.get("run", "split", "0.5"))
        res = protocol(templates, ProtocolSpec(split, seed))
        scores = res.scores
        roc = roc_auc(scores)
        report = summarize(res, [t.label for t in templates], args.metric)
        report["variant"] = args.variant or "segmented"
        report["no_detections"] = len(skipped)
        report["code_density"] = _density(templates) if args.metric == "hamming" else "n/a"
    paths = [args.out / "scores.txt", args.out / "report.txt", args.out / "roc.csv"]
    write_scoreset(paths[0], scores)
    write_report(paths[1], report)
    write_roc_csv(paths[2], roc)
    write_run_manifest(args.out, "evaluate", args, cfg, paths, inputs)
    print(paths[1].read_text(), end="")
    return 0


def _density(templates) -> float:
    from .codec import unpack_bits
    return float(np.mean([unpack_bits(t.payload, t.dim).mean() for t in templates]))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-detector": cmd_train_detector,
    "train-segmenter": cmd_train_segmenter,
    "train-embedder": cmd_train_embedder,
    "enroll": cmd_enroll,
    "match": cmd_match,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irisnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND")
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI settings file")
        s.add_argument("--seed", type=int, help="global seed (default: [run] seed or 0)")
        s.add_argument("--out", type=Path, required=True, help="output directory")
        if name == "gen-data":
            s.add_argument("--identities", type=int)
            s.add_argument("--per-identity", type=int)
            s.add_argument("--first-identity", type=int)
            s.add_argument("--first-pose", type=int)
            continue
        s.add_argument("--data", help="dataset manifest.csv (default from [data])")
        if name.startswith("train-"):
            s.add_argument("--epochs", type=int, help="override the recipe's epoch count")
        if name == "train-embedder":
            s.add_argument("--variant", help="input style(s), comma-separated: "
                                              "segmented, bbox-only, polar-remap")
        if name in ("enroll", "match", "evaluate"):
            s.add_argument("--variant", choices=("segmented", "bbox-only", "polar-remap"))
        if name in ("enroll", "match", "evaluate"):
            s.add_argument("--models", help="directory holding the .idln model files")
            s.add_argument("--metric", choices=("cosine", "hamming"), default="cosine")
        if name == "match":
            s.add_argument("--gallery", help="gallery .bin written by enroll")
        if name == "evaluate":
            s.add_argument("--scores", help="evaluate an existing genuine/impostor score file")
    return p


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        parser.print_usage(sys.stderr)
        print(f"irisnet: error: unknown subcommand {argv[0]!r}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = Config.load(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"irisnet: error: {e}", file=sys.stderr)
        return 2
    except (FormatError, FileNotFoundError) as e:
        print(f"irisnet: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
