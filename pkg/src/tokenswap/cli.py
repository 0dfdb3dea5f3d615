"""Command-line entry point.

Every command reads its settings from an optional INI file (``--config``)
and from flags; flags win. Values are looked up in the command's own section
first, then in ``[common]``. Example::

    [common]
    seed = 0
    out_dir = runs/demo
    checkpoint = runs/demo/model.tdit

    [train]
    steps = 2000

    [personalize]
    reference = ref.png
    mask = ref.pbm
    delta = 0:4
    prompt = circle red bg-black tex3
    tau = 0.8

Lists are comma separated; deltas are ``drow:dcol`` pairs. On failure the
process exits nonzero and prints one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import torch

from . import io as tio
from .dit import tokens_to_image
from .errors import ConfigError, DisjointnessError
from .flow import FlowSchedule, sample
from .personalize import (
    DEFAULT_TAU,
    EDIT_TAU,
    MORPHOLOGY,
    Perturbation,
    PersonalizeRequest,
    compose_layout,
    edit,
    personalize,
    prepare_reference,
)
from .rope import STRATEGIES
from .sprites import PROMPT_LEN, VOCAB, decode_prompt, encode_prompt, generate_sprite_dataset

log = logging.getLogger("tokenswap")


# --- field schema ---------------------------------------------------------------

def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _words(text):
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _deltas(text):
    out = []
    for item in _words(text):
        dr, dc = item.split(":")
        out.append((int(dr), int(dc)))
    return tuple(out)


@dataclass(frozen=True)
class Field:
    parse: object
    default: object = None
    required: bool = False
    help: str = ""


_SAMPLER = {
    "checkpoint": Field(str, required=True, help="model checkpoint (.tdit)"),
    "steps": Field(int, 50, help="sampler steps"),
    "guidance": Field(float, 3.5, help="classifier-free guidance scale"),
}

FIELDS = {
    "dataset": {
        "count": Field(int, 10, help="number of sprites"),
    },
    "train": {
        "steps": Field(int, 2000, help="optimizer steps"),
        "batch_size": Field(int, 16),
        "learning_rate": Field(float, 2e-3),
        "dataset_count": Field(int, 4096, help="training sprites"),
        "depth": Field(int, 6),
        "dim": Field(int, 64),
        "heads": Field(int, 4),
        "resume": Field(str, help="checkpoint of an interrupted run"),
        "log_every": Field(int, 100),
    },
    "generate": {
        **_SAMPLER,
        "prompt": Field(str, required=True, help="four words or ids"),
        "count": Field(int, 1),
        "dump_trajectory": Field(_bool, False, help="write every state as TGRD"),
    },
    "personalize": {
        **_SAMPLER,
        "reference": Field(_words, required=True, help="reference image(s)"),
        "mask": Field(_words, help="PBM subject mask(s); default segments the background"),
        "delta": Field(_deltas, help="drow:dcol per reference"),
        "prompt": Field(str),
        "tau": Field(float, DEFAULT_TAU),
        "shuffle": Field(_bool, False),
        "window": Field(int, 3),
        "morphology": Field(str, "none"),
        "kernel": Field(int, 5),
    },
    "edit": {
        **_SAMPLER,
        "image": Field(str, required=True),
        "keep_mask": Field(str, required=True, help="PBM of tokens to keep"),
        "mode": Field(str, "inpaint"),
        "prompt": Field(str),
        "tau": Field(float, EDIT_TAU),
    },
    "ablate": {
        **_SAMPLER,
        "seeds": Field(int, 16, help="cases per tau"),
        "taus": Field(_floats, (1.0, 0.95, 0.9, 0.8, 0.7)),
        "perturbed_tau": Field(float, 0.8),
        "reference_seed": Field(int, 1000),
        "jobs": Field(int, 1),
    },
    "probe": {
        **_SAMPLER,
        "samples": Field(int, 100),
        "timesteps": Field(_floats, (0.9, 0.7, 0.5, 0.3, 0.1)),
        "strategies": Field(_words, STRATEGIES),
        "chunk": Field(int, 10),
        "jobs": Field(int, 1),
        "min_ratio": Field(float, 5.0, help="original/zero ratio to report against"),
    },
}
COMMON = {
    "seed": Field(int, 0),
    "out_dir": Field(str, "."),
    "image_format": Field(str, "png", help="png or ppm"),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


class _Parser(argparse.ArgumentParser):
    """Reports usage errors as one JSON line like every other failure."""

    def error(self, message):
        sys.exit(_fail("UsageError", message, code=2))


_SHARED_FLAGS = ("steps", "tau", "jobs", "guidance")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenswap", description="Token-replacement personalization lab.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, fields in FIELDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="INI file with [common] and per-command sections")
        for name, spec in {**COMMON, **fields}.items():
            if spec.parse is _bool:
                p.add_argument(_flag(name), action=argparse.BooleanOptionalAction, default=None, help=spec.help)
            else:
                p.add_argument(_flag(name), default=None, help=spec.help or None)
        for name in _SHARED_FLAGS:
            if name not in fields:
                p.add_argument(_flag(name), default=None, help=argparse.SUPPRESS)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Merge file and flags into typed values; raises :class:`ConfigError` naming the field."""
    fields = {**COMMON, **FIELDS[command]}
    raw: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        parser = configparser.ConfigParser()
        parser.read(path)
        known = set(FIELDS) | {"common"}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(section, f"unknown section in {path}")
        for section in ("common", command):
            if not parser.has_section(section):
                continue
            for key, value in parser.items(section, raw=True):
                if key not in fields:
                    if section == "common":
                        continue
                    raise ConfigError(key, f"not a setting of {command}")
                raw[key] = value
    for name in _SHARED_FLAGS:
        if name not in fields and getattr(args, name, None) is not None:
            raise ConfigError(name, f"not a setting of {command}")
    for name in fields:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    cfg = {}
    for name, spec in fields.items():
        if name in raw:
            try:
                cfg[name] = spec.parse(raw[name])
            except (TypeError, ValueError) as exc:
                raise ConfigError(name, f"cannot parse {raw[name]!r}: {exc}") from None
        elif spec.required:
            raise ConfigError(name, "required")
        else:
            cfg[name] = spec.default
    _validate(command, cfg)
    return cfg


def _positive(cfg, *names, allow_zero=False):
    for name in names:
        if name in cfg and cfg[name] is not None:
            if cfg[name] < 0 or (cfg[name] == 0 and not allow_zero):
                raise ConfigError(name, f"must be {'>= 0' if allow_zero else '> 0'}, got {cfg[name]}")


def _existing(cfg, *names):
    for name in names:
        value = cfg.get(name)
        for path in (value if isinstance(value, tuple) else (value,)):
            if path is not None and not Path(path).is_file():
                raise ConfigError(name, f"no such file: {path}")


def _parse_prompt(text, field="prompt"):
    if text is None:
        return None
    parts = text.replace(",", " ").split()
    try:
        ids = [int(p) for p in parts] if all(p.isdigit() for p in parts) else encode_prompt(parts)
    except KeyError as exc:
        raise ConfigError(field, str(exc.args[0])) from None
    if len(ids) != PROMPT_LEN or not all(0 <= i < len(VOCAB) for i in ids):
        raise ConfigError(field, f"need {PROMPT_LEN} vocabulary tokens, got {text!r}")
    return ids


def _validate(command: str, cfg: dict) -> None:
    if cfg["image_format"] not in ("png", "ppm"):
        raise ConfigError("image_format", f"must be png or ppm, got {cfg['image_format']!r}")
    _positive(cfg, "count", "batch_size", "dataset_count", "depth", "dim", "heads", "seeds", "samples", "chunk", "jobs")
    _positive(cfg, "learning_rate", "window", "kernel")
    _positive(cfg, "log_every", "guidance", allow_zero=True)
    if command == "train":
        _positive(cfg, "steps", allow_zero=True)
        _existing(cfg, "resume")
    else:
        _positive(cfg, "steps")
    _existing(cfg, "checkpoint", "reference", "mask", "image", "keep_mask")
    for name in ("tau", "perturbed_tau"):
        if name in cfg and not 0.0 <= cfg[name] <= 1.0:
            raise ConfigError(name, f"must lie in [0, 1], got {cfg[name]}")
    for name in ("taus", "timesteps"):
        if name in cfg and (not cfg[name] or any(not 0.0 <= v <= 1.0 for v in cfg[name])):
            raise ConfigError(name, f"values must lie in [0, 1], got {cfg[name]}")
    if "prompt" in cfg:
        cfg["prompt"] = _parse_prompt(cfg["prompt"])
    if command == "personalize":
        if cfg["morphology"] not in MORPHOLOGY:
            raise ConfigError("morphology", f"must be one of {MORPHOLOGY}")
        for name in ("window", "kernel"):
            if cfg[name] % 2 == 0:
                raise ConfigError(name, f"must be odd, got {cfg[name]}")
        n = len(cfg["reference"])
        if cfg["mask"] is not None and len(cfg["mask"]) != n:
            raise ConfigError("mask", f"{len(cfg['mask'])} masks for {n} references")
        if cfg["delta"] is not None and len(cfg["delta"]) != n:
            raise ConfigError("delta", f"{len(cfg['delta'])} deltas for {n} references")
    if command == "edit" and cfg["mode"] not in ("inpaint", "outpaint"):
        raise ConfigError("mode", f"must be inpaint or outpaint, got {cfg['mode']!r}")
    if command == "probe":
        bad = [s for s in cfg["strategies"] if s not in STRATEGIES]
        if bad:
            raise ConfigError("strategies", f"unknown {bad}; expected {STRATEGIES}")


# --- commands ------------------------------------------------------------------

def _out(cfg) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _image_name(stem: str, cfg) -> str:
    return f"{stem}.{cfg['image_format']}"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load_model(cfg):
    model, *_ = tio.load_checkpoint(cfg["checkpoint"])
    return model


def _schedule(cfg) -> FlowSchedule:
    return FlowSchedule(cfg["steps"], cfg["guidance"])


def cmd_dataset(cfg) -> list[Path]:
    out = _out(cfg)
    (out / "images").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    index, written = [], []
    for k, s in enumerate(generate_sprite_dataset(cfg["count"], cfg["seed"])):
        image = Path("images") / _image_name(f"sprite_{k:05d}", cfg)
        mask = Path("masks") / f"sprite_{k:05d}.pbm"
        tio.write_image(out / image, s.image, cfg["image_format"])
        tio.write_pbm(out / mask, s.mask)
        index.append(
            {
                "id": k,
                "image": image.as_posix(),
                "mask": mask.as_posix(),
                "prompt": [int(i) for i in s.prompt],
                "words": decode_prompt(s.prompt),
                "shape": s.shape,
                "center": [round(float(c), 6) for c in s.center],
                "size": round(float(s.size), 6),
            }
        )
        written += [out / image, out / mask]
    _write_json(out / "index.json", index)
    return written + [out / "index.json"]


def cmd_train(cfg) -> list[Path]:
    from .dit import DiTConfig, ToyDiT
    from .training import DatasetConfig, OptimizerConfig, TrainState, train

    out = _out(cfg)
    optim = OptimizerConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], learning_rate=cfg["learning_rate"], seed=cfg["seed"]
    )
    data = DatasetConfig(cfg["dataset_count"], cfg["seed"])
    if cfg["resume"]:
        model, step, opt_state, losses = tio.load_checkpoint(cfg["resume"])
        state = TrainState(step=step, optimizer=opt_state, losses=list(losses))
    else:
        model = ToyDiT(DiTConfig(depth=cfg["depth"], dim=cfg["dim"], heads=cfg["heads"]))
        model.reset_parameters(torch.Generator().manual_seed(cfg["seed"]))
        state = TrainState()
    model, state = train(model, data, optim, state, log_every=cfg["log_every"])
    ckpt = out / "model.tdit"
    tio.save_checkpoint(ckpt, model, state.step, state.optimizer, state.losses)
    loss_csv = out / "loss.csv"
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for k, value in enumerate(state.losses):
            w.writerow([k, repr(float(value))])
    log.info("trained %d steps in %.1fs", state.step, state.seconds)
    return [ckpt, loss_csv]


def cmd_generate(cfg) -> list[Path]:
    out = _out(cfg)
    model = _load_model(cfg)
    written = []
    prompt = torch.tensor(cfg["prompt"])
    for k in range(cfg["count"]):
        seed = cfg["seed"] + k
        z = torch.randn(16, 16, model.config.token_dim, generator=torch.Generator().manual_seed(seed))
        traj = sample(model, z, prompt, _schedule(cfg))
        stem = "generated" if cfg["count"] == 1 else f"generated_{k:03d}"
        path = out / _image_name(stem, cfg)
        tio.write_image(path, tokens_to_image(traj.endpoint), cfg["image_format"])
        written.append(path)
        if cfg["dump_trajectory"]:
            written.append(tio.write_trajectory(out / f"{stem}_trajectory", traj))
    return written


def _read_mask(path, field):
    try:
        return tio.read_pbm(path)
    except (ValueError, IndexError) as exc:
        raise ConfigError(field, f"{path}: {exc}") from None


def cmd_personalize(cfg) -> list[Path]:
    out = _out(cfg)
    model = _load_model(cfg)
    schedule = _schedule(cfg)
    references = []
    for k, ref_path in enumerate(cfg["reference"]):
        mask = _read_mask(cfg["mask"][k], "mask") if cfg["mask"] else None
        bundle = prepare_reference(model, tio.read_image(ref_path), mask, cfg["prompt"], schedule)
        delta = cfg["delta"][k] if cfg["delta"] else (0, 0)
        if delta != (0, 0):
            bundle, target = compose_layout(bundle, delta)
        else:
            target = bundle.mask
        references.append((bundle, target))
    pert = Perturbation(cfg["shuffle"], cfg["window"], cfg["morphology"], cfg["kernel"], cfg["seed"])
    request = PersonalizeRequest(references, cfg["prompt"], cfg["tau"], pert, schedule)
    image, _ = personalize(model, request, seed=cfg["seed"])
    path = out / _image_name("personalized", cfg)
    tio.write_image(path, image, cfg["image_format"])
    return [path]


def cmd_edit(cfg) -> list[Path]:
    out = _out(cfg)
    model = _load_model(cfg)
    keep = _read_mask(cfg["keep_mask"], "keep_mask")
    image = edit(
        model, tio.read_image(cfg["image"]), keep, cfg["prompt"], _schedule(cfg), cfg["seed"], cfg["tau"], cfg["mode"]
    )
    path = out / _image_name("edited", cfg)
    tio.write_image(path, image, cfg["image_format"])
    return [path]


def cmd_ablate(cfg) -> list[Path]:
    from .evaluation import ablation_cases, run_tau_ablation

    out = _out(cfg)
    model = _load_model(cfg)
    cases = ablation_cases(range(cfg["seed"], cfg["seed"] + cfg["seeds"]), cfg["reference_seed"])
    report = run_tau_ablation(
        model, cases, cfg["taus"], schedule=_schedule(cfg), perturbed_tau=cfg["perturbed_tau"], jobs=cfg["jobs"]
    )
    csv_path, txt_path = out / "ablation.csv", out / "ablation.txt"
    csv_path.write_text(report.to_csv())
    txt_path.write_text(report.summary())
    sys.stdout.write(report.summary())
    return [csv_path, txt_path]


def cmd_probe(cfg) -> list[Path]:
    from .evaluation import run_position_probe

    out = _out(cfg)
    model = _load_model(cfg)
    report = run_position_probe(
        model,
        cfg["strategies"],
        cfg["samples"],
        cfg["timesteps"],
        _schedule(cfg),
        cfg["seed"],
        cfg["chunk"],
        cfg["jobs"],
    )
    written = [out / "probe.csv", out / "probe.txt"]
    written[0].write_text(report.to_csv())
    summary = report.summary()
    if "original" in report.scores and "zero" in report.scores:
        ratio = report.ratio("original", "zero")
        verdict = "meets" if ratio >= cfg["min_ratio"] else "below"
        summary += f"original/zero ratio {ratio:.2f} {verdict} threshold {cfg['min_ratio']:g}\n"
    written[1].write_text(summary)
    sys.stdout.write(summary)
    for name, heat in report.heatmaps.items():
        path = out / f"heatmap_{name}.pgm"
        tio.write_pgm(path, heat)
        written.append(path)
    return written


COMMANDS = {
    "dataset": cmd_dataset,
    "train": cmd_train,
    "generate": cmd_generate,
    "personalize": cmd_personalize,
    "edit": cmd_edit,
    "ablate": cmd_ablate,
    "probe": cmd_probe,
}


def _fail(kind: str, message: str, field: str | None = None, code: int = 1) -> int:
    record = {"error": kind, "message": " ".join(str(message).split())}
    if field is not None:
        record["field"] = field
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TOKENSWAP_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        written = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), exc.field, code=2)
    except DisjointnessError as exc:
        return _fail("DisjointnessError", str(exc))
    except OSError as exc:
        return _fail("IOError", f"{exc.filename}: {exc.strerror}" if exc.filename else str(exc))
    except (ValueError, KeyError, FloatingPointError) as exc:
        return _fail(type(exc).__name__, str(exc))
    missing = [p for p in written if not Path(p).exists()]
    if missing:
        return _fail("IOError", f"outputs not written: {', '.join(map(str, missing))}")
    for path in written:
        log.info("wrote %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
