"""Command-line front end: ``orthopreview <command> [--config FILE] [--set key=value ...]``.

Every command reads one flat ``key = value`` config file (``#`` starts a
comment); ``--set`` overrides single keys. Failures print one line
``error code=<n> kind=<kind> command=<cmd> message=<text>`` to stderr and
exit with 2 (config), 3 (data) or 4 (numeric).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augmentation import AugmentConfig, AugmentError, augment_dataset
from .dataset import DatasetError, DeformityConfig, code_arrays, generate_synthetic_cohort, load_dataset, save_dataset
from .geometry import GeometryError
from .losses import LossError, LossWeights
from .mesh import Mesh, MeshError, load_landmarks, load_obj, save_obj
from .metrics import chamfer_distance, hausdorff_distance
from .morphable import FitConfig, ModelError, build_synthetic_model, decode, fit, load_model, region_mask, save_model
from .network import load_params, predict_codes, save_params
from .predictor import TrainConfig, TrainingError, ablation_study, face_metrics, train
from .preview import PreviewError, build_barycentric_map, export_sequence, interpolate_codes, transfer_prediction

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (parser, default)
SCHEMA = {
    "seed": (int, 0),
    "n_modes": (int, 64),
    "resolution": (int, 16),
    "mode_scale": (float, 3.0),
    "model_path": (str, "model.mm1"),
    "data_dir": (str, "data"),
    "augmented_dir": (str, "augmented"),
    "checkpoint": (str, "predictor.mlp"),
    "out_dir": (str, "out"),
    "cohort_size": (int, 160),
    "protrusion_min": (float, 3.0),
    "protrusion_max": (float, 10.0),
    "asymmetry_min": (float, 2.0),
    "asymmetry_max": (float, 8.0),
    "correction_min": (float, 0.7),
    "correction_max": (float, 1.0),
    "base_std": (float, 0.5),
    "asymmetric_base_scale": (float, 0.05),
    "alpha_p": (float, 5000.0),
    "alpha_a": (float, 5000.0),
    "alpha_f": (float, 1.0),
    "alpha_g": (float, 1.0),
    "w_normal": (float, 1.0),
    "asymmetry_normal": (str, "fitted"),
    "batch_size": (int, 150),
    "epochs": (int, 500),
    "lr": (float, 1e-3),
    "decay": (float, 0.5),
    "decay_every": (int, 100),
    "dropout": (float, 0.5),
    "momentum": (float, 0.1),
    "hidden": (int, 100),
    "optimizer": (str, "adam"),
    "augment": (_bool, True),
    "sigma": (float, 0.5),
    "band": (float, 5.0),
    "tau": (float, 2.0),
    "factor": (int, 10),
    "retries": (int, 3),
    "fit_ridge": (float, 1e-3),
    "fit_surface_iterations": (int, 3),
    "folds": (int, 5),
    "chamfer_root": (_bool, False),
    "frames": (int, 10),
}


@dataclass(frozen=True)
class PipelineConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise AttributeError(key) from None

    def component_seed(self, name):
        """Seed for one pipeline component, a fixed hash of (master seed, name)."""
        digest = hashlib.sha256(f"{self.values['seed']}:{name}".encode()).digest()
        return int.from_bytes(digest[:8], "little") >> 1

    def weights(self):
        return LossWeights(self.alpha_p, self.alpha_a, self.alpha_f, self.alpha_g, self.w_normal)

    def train_config(self):
        return TrainConfig(self.batch_size, self.epochs, self.lr, self.decay, self.decay_every, self.dropout,
                           self.momentum, self.hidden, self.optimizer, self.component_seed("train"),
                           self.weights(), self.asymmetry_normal)

    def augment_config(self):
        return AugmentConfig(sigma=self.sigma, band=self.band, tau=self.tau, factor=self.factor,
                             retries=self.retries, seed=self.component_seed("augment"))

    def deformity_config(self):
        return DeformityConfig((self.protrusion_min, self.protrusion_max), (self.asymmetry_min, self.asymmetry_max),
                               (self.correction_min, self.correction_max), self.base_std,
                               self.asymmetric_base_scale, self.component_seed("cohort"))

    def fit_config(self):
        return FitConfig(ridge=self.fit_ridge, surface_iterations=self.fit_surface_iterations)

    def dump(self):
        return "".join(f"{k} = {self.values[k]}\n" for k in SCHEMA)


def _parse_pairs(items, source):
    out = {}
    for lineno, raw in items:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path=None, overrides=()):
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        values.update(_parse_pairs(enumerate(text.splitlines(), 1), path))
    values.update(_parse_pairs(((i, o) for i, o in enumerate(overrides, 1)), "--set"))
    cfg = PipelineConfig(values)
    try:  # component invariants
        cfg.weights(), cfg.train_config(), cfg.augment_config(), cfg.deformity_config(), cfg.fit_config()
    except (ValueError, LossError, AugmentError, DatasetError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


# ---------------------------------------------------------------- helpers


def _model(cfg):
    path = Path(cfg.model_path)
    if path.exists():
        model = load_model(path)
        if model.n_modes != cfg.n_modes:
            raise ConfigError(f"{path} has K={model.n_modes} but n_modes={cfg.n_modes}")
        return model
    return build_synthetic_model(cfg.component_seed("model"), cfg.n_modes, cfg.resolution, cfg.mode_scale)


def _real_pairs(cfg):
    pairs = [p for p in load_dataset(cfg.data_dir) if p.provenance != "synthetic"]
    if not pairs:
        raise DatasetError(f"{cfg.data_dir}: no non-synthetic pairs")
    return pairs


def _write_code(code, path):
    Path(path).write_text("".join(f"{float(c)!r}\n" for c in code))


def _metric_rows(hd, cd):
    return [("HD", float(np.mean(hd)), float(np.min(hd)), float(np.max(hd))),
            ("CD", float(np.mean(cd)), float(np.min(cd)), float(np.max(cd)))]


# ---------------------------------------------------------------- commands


def cmd_build_model(cfg, args):
    model = build_synthetic_model(cfg.component_seed("model"), cfg.n_modes, cfg.resolution, cfg.mode_scale)
    save_model(model, cfg.model_path)
    print(f"model {cfg.model_path} vertices={model.n_vertices} modes={model.n_modes}")


def cmd_generate_cohort(cfg, args):
    model = _model(cfg)
    pairs = generate_synthetic_cohort(model, cfg.cohort_size, cfg.deformity_config())
    save_dataset(pairs, cfg.data_dir, (model.seed, model.n_modes, model.resolution), cfg.component_seed("cohort"))
    print(f"cohort {cfg.data_dir} pairs={len(pairs)}")


def cmd_fit(cfg, args):
    model = _model(cfg)
    code, xf, report = fit(model, load_obj(args.scan), load_landmarks(args.landmarks), cfg.fit_config())
    _write_code(code, args.out)
    print(f"fit {args.out} mean_landmark_error={report.mean_landmark_error!r}")


def cmd_augment(cfg, args):
    model = _model(cfg)
    synth, rep = augment_dataset(model, _real_pairs(cfg), cfg.augment_config())
    save_dataset(synth, cfg.augmented_dir, (model.seed, model.n_modes, model.resolution), cfg.augment_config().seed)
    print(f"augment {cfg.augmented_dir} generated={rep.generated} rejected={rep.rejected} shortfall={rep.shortfall}")


def cmd_train(cfg, args):
    model = _model(cfg)
    pairs = _real_pairs(cfg)
    if cfg.augment:
        pairs = pairs + augment_dataset(model, pairs, cfg.augment_config())[0]
    x, y = code_arrays(pairs)
    params, history = train(model, x, y, cfg.train_config())
    save_params(params, cfg.checkpoint)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    history.to_csv(out / "history.csv")
    print(f"train {cfg.checkpoint} pairs={len(pairs)} epochs={len(history)}")


def cmd_predict(cfg, args):
    model = _model(cfg)
    params = load_params(cfg.checkpoint)
    scan = load_obj(args.scan)
    code, xf, _ = fit(model, scan, load_landmarks(args.landmarks), cfg.fit_config())
    pred = predict_codes(params, code)[0]
    pre_mesh, post_mesh = decode(model, code), decode(model, pred)
    aligned = scan.with_vertices(xf.apply(scan.vertices))
    moved = transfer_prediction(aligned, build_barycentric_map(aligned, pre_mesh), pre_mesh, post_mesh)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(scan.with_vertices(xf.inverse().apply(moved.vertices)), out / "predicted_scan.obj")
    save_obj(post_mesh, out / "predicted_model.obj")
    _write_code(code, out / "code_pre.txt")
    _write_code(pred, out / "code_pred.txt")
    print(f"predict {out}")


def _evaluate_dirs(pred_dir, gt_dir, root):
    names = sorted(p.name for p in Path(pred_dir).glob("*.obj"))
    if not names:
        raise DatasetError(f"{pred_dir}: no .obj files")
    hd, cd = [], []
    for name in names:
        gt_path = Path(gt_dir) / name
        if not gt_path.exists():
            raise DatasetError(f"missing ground truth {gt_path}")
        a, b = load_obj(Path(pred_dir) / name).vertices, load_obj(gt_path).vertices
        hd.append(hausdorff_distance(a, b))
        cd.append(chamfer_distance(a, b, root=root))
    return np.array(hd), np.array(cd)


def cmd_evaluate(cfg, args):
    if args.pred_dir or args.gt_dir:
        if not (args.pred_dir and args.gt_dir):
            raise ConfigError("--pred-dir and --gt-dir go together")
        hd, cd = _evaluate_dirs(args.pred_dir, args.gt_dir, cfg.chamfer_root)
    else:
        model = _model(cfg)
        pairs = _real_pairs(cfg)
        x, _ = code_arrays(pairs)
        hd, cd = face_metrics(model, predict_codes(load_params(cfg.checkpoint), x),
                              [p.post.mesh.vertices for p in pairs], cfg.chamfer_root)
    rows = _metric_rows(hd, cd)
    print(f"{'metric':<8}{'mean':>14}{'min':>14}{'max':>14}")
    for name, m, lo, hi in rows:
        print(f"{name:<8}{m:>14.6f}{lo:>14.6f}{hi:>14.6f}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "mean", "min", "max"])
        w.writerows([(n, repr(a), repr(b), repr(c)) for n, a, b, c in rows])


def cmd_ablate(cfg, args):
    model = _model(cfg)
    rows = ablation_study(model, _real_pairs(cfg), cfg.folds, cfg.train_config(), cfg.augment_config(),
                          cfg.component_seed("split"), cfg.chamfer_root)
    print(f"{'name':<16}{'HD':>12}{'CD':>12}{'data amount':>14}")
    for r in rows:
        print(f"{r.name:<16}{r.hd:>12.4f}{r.cd:>12.4f}{r.data_amount:>14d}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "HD", "CD", "data_amount"])
        w.writerows([(r.name, repr(r.hd), repr(r.cd), r.data_amount) for r in rows])


def cmd_animate(cfg, args):
    model = _model(cfg)
    pairs = {p.id: p for p in load_dataset(cfg.data_dir)}
    if args.pair not in pairs:
        raise DatasetError(f"no pair {args.pair!r} in {cfg.data_dir}")
    pair = pairs[args.pair]
    pred = predict_codes(load_params(cfg.checkpoint), pair.pre.code)[0]
    frames = interpolate_codes(model, pair.pre.code, pred, cfg.frames)
    out = Path(cfg.out_dir) / f"animation_{args.pair}"
    # distances are measured on the face region, against the recorded outcome
    face = region_mask(model, "face").indices
    crop = [Mesh(f.vertices[face]) for f in frames]
    export_sequence(frames, out)
    export_sequence(crop, out / "face", Mesh(pair.post.mesh.vertices[face]), cfg.chamfer_root)
    print(f"animate {out} frames={len(frames)}")


COMMANDS = {
    "build-model": cmd_build_model,
    "generate-cohort": cmd_generate_cohort,
    "fit": cmd_fit,
    "augment": cmd_augment,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "animate": cmd_animate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="orthopreview", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        if name in ("fit", "predict"):
            p.add_argument("--scan", required=True)
            p.add_argument("--landmarks", required=True)
            p.add_argument("--out", required=True)
        if name == "evaluate":
            p.add_argument("--pred-dir")
            p.add_argument("--gt-dir")
        if name == "animate":
            p.add_argument("--pair", required=True)
    return parser


def _kind(exc):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, (TrainingError, LossError, GeometryError, np.linalg.LinAlgError, FloatingPointError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (DatasetError, MeshError, ModelError, AugmentError, PreviewError, OSError, ValueError)):
        return EXIT_DATA, "data"
    return None


def main(argv=None):
    command = "-"
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        cfg = load_config(args.config, args.set)
        COMMANDS[command](cfg, args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        kind = _kind(exc)
        if kind is None:
            raise
        code, name = kind
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error code={code} kind={name} command={command} message={message}", file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
