"""Command-line pipeline: data, pretraining, adapters, layer analysis, test-time combination, sampling, evaluation.

Every command writes into a fresh run directory holding its outputs, the fully
resolved config (``config.txt``) and a ``manifest.json`` with hashes of inputs
and outputs.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__, container
from .data import NoForegroundError, Prompt, load_corpus, save_corpus

log = logging.getLogger("customttt")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# config ----------------------------------------------------------------------

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "schedule.T": 100,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.05,
    "model.base_width": 32,
    "model.seed": 0,
    "data.corpus_seed": 0,
    "data.per_pair": 4,
    "data.background_prob": 0.5,
    "data.n_refs": 5,
    "pretrain.steps": 6000,
    "pretrain.lr": 3e-4,
    "pretrain.lr_decay": "cosine",
    "pretrain.batch": 4,
    "pretrain.optimizer": "lion",
    "pretrain.cond_drop_prob": 0.1,
    "lora.rank": 4,
    "appearance.steps": 500,
    "appearance.lr": 2e-3,
    "appearance.layers": "2,6",
    "motion.steps": 2000,
    "motion.lr": 1e-3,
    "motion.layers": "2,5",
    "lora.batch": 4,
    "lora.cond_drop_prob": 0.0,
    "lora.lr_decay": "cosine",
    "ttt.f": 5,
    "ttt.steps": 30,
    "ttt.lr": 1e-4,
    "ttt.beta_debias": 1.0,
    "ttt.anchor_index": 0,
    "ttt.renoise": "next_grid",
    "sample.steps": 25,
    "sample.cfg_scale": 9.0,
    "eval.seeds": "0-7",
    "analysis.criterion": "appearance",
    "analysis.p": "a sks0 square mot0",
    "analysis.p_star": "a sks4 circle mot0",
    "analysis.seeds": "0-7",
    "analysis.antisymmetry": False,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string("[run]\n" + text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg = cls()
        for key, raw in parser["run"].items():
            cfg.set(key, raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            return cls.from_text(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None

    def set(self, key: str, raw) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, str(raw))

    def __getitem__(self, key: str):
        return self.values[key]

    def to_text(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def layers(self, key: str) -> tuple[int, ...]:
        try:
            return tuple(int(x) for x in str(self[key]).split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key} must be a comma-separated list of layer indices") from None

    def seeds(self, key: str) -> list[int]:
        text = str(self[key]).strip()
        try:
            if "-" in text:
                lo, hi = (int(x) for x in text.split("-"))
                return list(range(lo, hi + 1))
            return [int(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{key} must look like '0-7' or '0,3,5'") from None

    def validate(self) -> None:
        """Build every typed view once so a bad value fails before any work starts."""
        self.schedule()
        self.lab()
        for key in ("eval.seeds", "analysis.seeds"):
            self.seeds(key)
        if self["ttt.renoise"] not in ("next_grid", "random_higher"):
            raise ConfigError(f"ttt.renoise must be next_grid or random_higher, got {self['ttt.renoise']!r}")
        if self["analysis.criterion"] not in ("appearance", "motion"):
            raise ConfigError("analysis.criterion must be appearance or motion")

    # typed views ------------------------------------------------------------

    def schedule(self):
        from .scheduler import make_schedule

        try:
            return make_schedule(self["schedule.T"], self["schedule.beta_start"], self["schedule.beta_end"])
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None

    def lab(self):
        from .pipeline import LabConfig
        from .train import TrainConfig

        try:
            return LabConfig(
                corpus_seed=self["data.corpus_seed"],
                per_pair=self["data.per_pair"],
                background_prob=self["data.background_prob"],
                base_seed=self["model.seed"],
                pretrain=TrainConfig(steps=self["pretrain.steps"], lr=self["pretrain.lr"], batch=self["pretrain.batch"],
                                     optimizer=self["pretrain.optimizer"], cond_drop_prob=self["pretrain.cond_drop_prob"],
                                     lr_decay=self["pretrain.lr_decay"], seed=self["seed"]),
                appearance=TrainConfig(steps=self["appearance.steps"], lr=self["appearance.lr"], batch=self["lora.batch"],
                                       cond_drop_prob=self["lora.cond_drop_prob"], lr_decay=self["lora.lr_decay"],
                                       seed=self["seed"]),
                motion=TrainConfig(steps=self["motion.steps"], lr=self["motion.lr"], batch=self["lora.batch"],
                                   cond_drop_prob=self["lora.cond_drop_prob"], lr_decay=self["lora.lr_decay"],
                                   seed=self["seed"]),
                rank=self["lora.rank"],
                appearance_layers=self.layers("appearance.layers"),
                motion_layers=self.layers("motion.layers"),
                sampling_steps=self["sample.steps"],
                cfg_scale=self["sample.cfg_scale"],
                n_refs=self["data.n_refs"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


# run directories and manifests ----------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    inputs: dict[str, str]
    outputs: dict[str, str]
    wall_clock: float
    build: str

    def write(self, run_dir: Path) -> None:
        _atomic_write(run_dir / "manifest.json", json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, run_dir, verify: bool = True) -> "RunManifest":
        run_dir = Path(run_dir)
        try:
            m = cls(**json.loads((run_dir / "manifest.json").read_text()))
        except (OSError, ValueError, TypeError) as exc:
            raise DataError(f"unreadable manifest in {run_dir}: {exc}") from None
        if verify:
            for rel, digest in m.outputs.items():
                p = run_dir / rel
                if not p.exists() or sha256_file(p) != digest:
                    raise DataError(f"{p} does not match its manifest hash")
        return m


def _build_id() -> str:
    return f"customttt-{__version__} torch-{torch.__version__} numpy-{np.__version__}"


def verify_input(path) -> str:
    """Hash an input artifact, checking it against the manifest of the run that produced it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"input {path} does not exist")
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    h = hashlib.sha256()
    for f in files:
        h.update(sha256_file(f).encode())
    for parent in [path.parent, *path.parent.parents][:3]:
        man = parent / "manifest.json"
        if man.exists():
            m = RunManifest.load(parent, verify=False)
            for rel, digest in m.outputs.items():
                target = parent / rel
                if target == path or path in target.parents:
                    if not target.exists() or sha256_file(target) != digest:
                        raise DataError(f"{target} was modified after its run finished (hash mismatch)")
            break
    return h.hexdigest()


class Run:
    def __init__(self, command: str, cfg: RunConfig, out: Optional[str]):
        self.command, self.cfg = command, cfg
        self.start = time.time()
        if out is None:
            out = Path("runs") / f"{command}-{time.strftime('%Y%m%d-%H%M%S')}-{cfg.digest()[:8]}"
        self.dir = Path(out)
        if self.dir.exists() and any(self.dir.iterdir()):
            raise ConfigError(f"run directory {self.dir} is not empty; choose a fresh --out")
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        (self.dir / "config.txt").write_text(cfg.to_text())

    def input(self, path) -> Path:
        self.inputs[str(path)] = verify_input(path)
        return Path(path)

    def output(self, name: str) -> Path:
        self.outputs.append(name)
        p = self.dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def finish(self) -> None:
        outs = {"config.txt": sha256_file(self.dir / "config.txt")}
        for rel in self.outputs:
            p = self.dir / rel
            if p.is_dir():
                for f in sorted(p.rglob("*")):
                    if f.is_file():
                        outs[str(f.relative_to(self.dir))] = sha256_file(f)
            else:
                outs[rel] = sha256_file(p)
        RunManifest(self.command, self.cfg.digest(), self.inputs, outs, time.time() - self.start, _build_id()).write(self.dir)
        log.info("run complete: %s", self.dir)


# plotting --------------------------------------------------------------------

def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_curves(path: Path, curves: dict[str, list[tuple[int, float]]], title: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, pts in curves.items():
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, label=name, lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_bars(path: Path, labels: list[str], values: list[float], title: str, ylabel: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(values)), values, color="tab:blue")
    ax.set_xticks(range(len(values)), labels, rotation=30 if max(map(len, labels)) > 6 else 0)
    ax.axhline(0, color="k", lw=0.5)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def save_filmstrip(path: Path, video: np.ndarray) -> None:
    """Frames side by side as one PNG, for eyeballing."""
    plt = _plt()
    v = (np.clip(np.asarray(video), -1, 1) + 1) / 2
    strip = np.concatenate([f.transpose(1, 2, 0) for f in v], axis=1)
    plt.imsave(path, np.kron(strip, np.ones((4, 4, 1))), metadata={"Software": None})


# commands --------------------------------------------------------------------

def _progress(every: int):
    def cb(step, *vals):
        if step % every == 0:
            log.info("step %d: %s", step, " ".join(str(v) if isinstance(v, str) else f"{v:.5f}" for v in vals))
    return cb


def _loss_csv(losses) -> str:
    return "step,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(losses))


def _parse_prompt(text: str) -> Prompt:
    try:
        return Prompt.parse(text)
    except ValueError as exc:
        raise ConfigError(f"prompt {text!r}: {exc}") from None


def _load_base(run: Run, path):
    from .model import Denoiser

    return Denoiser.load(run.input(path))


def _load_adapter(run: Run, path):
    from .lora import load_adapter

    return load_adapter(run.input(path))


def cmd_make_data(args, cfg: RunConfig, run: Run) -> None:
    from .pipeline import appearance_prompt, appearance_refs, default_corpus, joint_prompts, motion_prompt, motion_reference

    lab = cfg.lab()
    corpus = default_corpus(lab)
    save_corpus(corpus, run.output("corpus"))
    refs = np.stack(appearance_refs(lab))
    container.save(run.output("appearance_refs.cttt"), {"images": refs}, {"prompt": str(appearance_prompt())})
    container.save(run.output("motion_ref.cttt"), {"video": motion_reference()}, {"prompt": str(motion_prompt())})
    run.output("eval_prompts.txt").write_text("".join(f"{p}\n" for p in joint_prompts()))
    log.info("corpus: %d items, held out %s", len(corpus), sorted(corpus.held_out))


def cmd_pretrain_base(args, cfg: RunConfig, run: Run) -> None:
    from .model import DenoiserConfig, build_denoiser
    from .train import pretrain_base

    if not args.corpus:
        raise ConfigError("pretrain-base needs --corpus")
    corpus = load_corpus(run.input(args.corpus))
    lab = cfg.lab()
    model = build_denoiser(DenoiserConfig(base_width=cfg["model.base_width"]), seed=cfg["model.seed"])
    base, losses = pretrain_base(model, corpus, lab.pretrain, cfg.schedule(), _progress(100))
    base.save(run.output("base.cttt"))
    run.output("loss.csv").write_text(_loss_csv(losses))
    plot_curves(run.output("loss.png"), {"loss": list(enumerate(losses))}, "base pretraining")


def _read_prompt_meta(path) -> Optional[Prompt]:
    _, meta = container.load(path)
    return Prompt.parse(meta["prompt"]) if "prompt" in meta else None


def cmd_train_appearance(args, cfg: RunConfig, run: Run) -> None:
    from .lora import save_adapter
    from .train import train_appearance_lora

    if not (args.base and args.refs):
        raise ConfigError("train-appearance needs --base and --refs")
    base = _load_base(run, args.base)
    arrays, meta = container.load(run.input(args.refs))
    prompt = _parse_prompt(args.prompt) if args.prompt else Prompt.parse(meta["prompt"])
    lab = cfg.lab()
    adapter, losses = train_appearance_lora(base, list(arrays["images"]), prompt, set(lab.appearance_layers), lab.appearance,
                                            rank=lab.rank, sched=cfg.schedule(), progress=_progress(100))
    save_adapter(adapter, run.output("lora_s.cttt"))
    run.output("loss.csv").write_text(_loss_csv(losses))
    plot_curves(run.output("loss.png"), {"loss": list(enumerate(losses))}, f"appearance adapter: {prompt}")


def cmd_train_motion(args, cfg: RunConfig, run: Run) -> None:
    from .lora import save_adapter
    from .train import train_motion_lora

    if not (args.base and args.video):
        raise ConfigError("train-motion needs --base and --video")
    base = _load_base(run, args.base)
    arrays, meta = container.load(run.input(args.video))
    prompt = _parse_prompt(args.prompt) if args.prompt else Prompt.parse(meta["prompt"])
    lab = cfg.lab()
    adapter, losses = train_motion_lora(base, arrays["video"], prompt, set(lab.motion_layers), lab.motion,
                                        rank=lab.rank, sched=cfg.schedule(), progress=_progress(100))
    save_adapter(adapter, run.output("lora_t.cttt"))
    run.output("loss.csv").write_text(_loss_csv(losses))
    plot_curves(run.output("loss.png"), {"loss": list(enumerate(losses))}, f"motion adapter: {prompt}")


def cmd_analyze_layers(args, cfg: RunConfig, run: Run) -> None:
    from .analysis import full_analysis

    if not args.base:
        raise ConfigError("analyze-layers needs --base")
    base = _load_base(run, args.base)
    p = _parse_prompt(args.p or cfg["analysis.p"])
    p_star = _parse_prompt(args.p_star or cfg["analysis.p_star"])
    criterion = args.criterion or cfg["analysis.criterion"]
    try:
        report = full_analysis(base, p, p_star, criterion, cfg.seeds("analysis.seeds"), cfg["sample.steps"],
                               cfg["sample.cfg_scale"], antisymmetry=cfg["analysis.antisymmetry"])
    except ValueError as exc:
        raise ConfigError(f"analysis: {exc}") from None
    run.output(f"importance_{criterion}.csv").write_text(report.to_csv())
    labels = [f"L{i}" for i in report.layer_scores] + ["full"]
    plot_bars(run.output(f"importance_{criterion}.png"), labels, list(report.layer_scores.values()) + [report.full_score],
              f"{criterion}: '{p}' -> '{p_star}'", "score")
    log.info("best single layer %d (%.3f); best pair %s (%.3f); full %.3f", report.best_single,
             report.layer_scores[report.best_single], report.pair, report.pair_score, report.full_score)


def cmd_ttt_combine(args, cfg: RunConfig, run: Run) -> None:
    from .lora import save_adapter
    from .pipeline import default_ttt_config
    from .ttt import prompt_pool, run_ttt

    if not (args.base and args.lora_s and args.lora_t):
        raise ConfigError("ttt-combine needs --base, --lora-s and --lora-t")
    base = _load_base(run, args.base)
    lora_s, lora_t = _load_adapter(run, args.lora_s), _load_adapter(run, args.lora_t)
    a_prompt = Prompt.parse(lora_s.meta["prompt"]) if "prompt" in lora_s.meta else None
    m_prompt = Prompt.parse(lora_t.meta["prompt"]) if "prompt" in lora_t.meta else None
    overrides = dict(f=cfg["ttt.f"], ttt_steps=cfg["ttt.steps"], lr=cfg["ttt.lr"], beta_debias=cfg["ttt.beta_debias"],
                     anchor_index=cfg["ttt.anchor_index"], renoise=cfg["ttt.renoise"], seed=cfg["seed"])
    if a_prompt is not None:
        overrides["appearance_prompt_pool"] = prompt_pool(a_prompt.appearance_id, a_prompt.motion_id)
    if m_prompt is not None:
        overrides["motion_prompt_pool"] = prompt_pool(m_prompt.appearance_id, m_prompt.motion_id)
    try:
        tcfg = default_ttt_config(cfg.lab(), **overrides)
        tcfg.validate(base.config.frames)
    except ValueError as exc:
        raise ConfigError(f"ttt: {exc}") from None
    res = run_ttt(base, lora_s, lora_t, tcfg, cfg.schedule(), _progress(5))
    save_adapter(res.appearance, run.output("lora_s_ttt.cttt"))
    save_adapter(res.motion, run.output("lora_t_ttt.cttt"))
    run.output("ttt_loss.csv").write_text(res.to_csv())
    plot_curves(run.output("ttt_loss.png"), {
        "appearance": [(s, v) for s, w, v in res.curve if w == "appearance"],
        "temporal": [(s, v) for s, w, v in res.curve if w == "temporal"],
    }, "test-time training")


def cmd_sample(args, cfg: RunConfig, run: Run) -> None:
    from .pipeline import sample_video

    if not (args.base and args.prompt):
        raise ConfigError("sample needs --base and --prompt")
    base = _load_base(run, args.base)
    adapters = [_load_adapter(run, p) for p in args.adapter or []]
    prompt = _parse_prompt(args.prompt)
    video = sample_video(base, adapters, prompt, cfg["seed"], cfg["sample.steps"], cfg["sample.cfg_scale"], cfg.schedule())
    container.save(run.output("video.cttt"), {"video": video}, {"prompt": str(prompt), "seed": cfg["seed"]})
    save_filmstrip(run.output("video.png"), video)


def _parse_method(spec: str) -> tuple[str, list[str]]:
    name, sep, paths = spec.partition("=")
    if not sep or not name:
        raise ConfigError(f"--method expects NAME=PATH[,PATH], got {spec!r}")
    return name, [p for p in paths.split(",") if p]


def cmd_evaluate(args, cfg: RunConfig, run: Run) -> None:
    from .evaluation import BenchmarkCase
    from .pipeline import sample_video
    from .evaluation import benchmark

    if not (args.base and args.data and args.method):
        raise ConfigError("evaluate needs --base, --data and at least one --method")
    methods_spec = [_parse_method(m) for m in args.method]
    for _, paths in methods_spec:  # fail before any sampling
        for p in paths:
            if not Path(p).exists():
                raise ConfigError(f"adapter {p} does not exist")
    data = Path(args.data)
    for name in ("appearance_refs.cttt", "motion_ref.cttt", "eval_prompts.txt"):
        if not (data / name).exists():
            raise ConfigError(f"dataset {data} lacks {name}")
    base = _load_base(run, args.base)
    methods = [(name, base, [_load_adapter(run, p) for p in paths]) for name, paths in methods_spec]
    refs, _ = container.load(run.input(data / "appearance_refs.cttt"))
    mref, _ = container.load(run.input(data / "motion_ref.cttt"))
    prompts = [_parse_prompt(line) for line in (data / "eval_prompts.txt").read_text().splitlines() if line.strip()]
    case = BenchmarkCase(list(refs["images"]), mref["video"], prompts, name=data.name)
    sched = cfg.schedule()

    def sample_fn(model, adapters, prompt, seed):
        return sample_video(model, adapters, prompt, seed, cfg["sample.steps"], cfg["sample.cfg_scale"], sched)

    report = benchmark(methods, [case], cfg.seeds("eval.seeds"), sample_fn, dataset=str(data))
    run.output("metrics.csv").write_text(report.to_csv())
    run.output("metrics.txt").write_text(report.to_table() + "\n")
    ok = [r for r in report.rows if not r.error]
    if ok:
        plot_bars(run.output("metrics.png"), [r.name for r in ok], [r.joint for r in ok], "joint score", "joint")
    print(report.to_table())


COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain-base": cmd_pretrain_base,
    "train-appearance": cmd_train_appearance,
    "train-motion": cmd_train_motion,
    "analyze-layers": cmd_analyze_layers,
    "ttt-combine": cmd_ttt_combine,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="customttt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=_build_id())
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value file; unknown keys are rejected")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="fresh run directory (default runs/<command>-<time>-<hash>)")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--corpus")
        sp.add_argument("--base")
        sp.add_argument("--refs")
        sp.add_argument("--video")
        sp.add_argument("--prompt")
        sp.add_argument("--lora-s")
        sp.add_argument("--lora-t")
        sp.add_argument("--adapter", action="append", help="adapter file to attach (repeatable)")
        sp.add_argument("--method", action="append", help="NAME=PATH[,PATH]; NAME= for the bare base (repeatable)")
        sp.add_argument("--data", help="directory written by make-data")
        sp.add_argument("--p")
        sp.add_argument("--p-star")
        sp.add_argument("--criterion", choices=("appearance", "motion"))
    return parser


def _exit_code(exc: BaseException) -> int:
    from .train import DivergenceError

    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, container.ContainerError, NoForegroundError)):
        return EXIT_DATA
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    return EXIT_FAILURE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    threads = os.environ.get("CUSTOMTTT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            cfg.set(key.strip(), value.strip())
        if args.seed is not None:
            cfg.set("seed", args.seed)
        cfg.validate()
        run = Run(args.command, cfg, args.out)
        COMMANDS[args.command](args, cfg, run)
        run.finish()
    except Exception as exc:
        code = _exit_code(exc)
        if code == EXIT_FAILURE:
            log.exception("unexpected failure")
        origin = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"customttt {args.command}: [{origin}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
