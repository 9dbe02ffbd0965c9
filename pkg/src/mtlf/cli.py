"""Command-line entry point: vocab tooling, training, CV, grid, reports.

Batch experiments only; outputs are static files (checkpoint directory,
JSONL training log, results.json, markdown/CSV report).  Exit codes are a
stable contract: 0 success, 2 usage/config error, 3 numeric failure.
Seed precedence: --seed flag > MTLF_SEED env var > config file.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, PROFILES, profile_config
from .engine import MtlEngine, TrainConfig, run_target_finetune
from .errors import ConfigError, MtlfError, NumericError, RegistryError
from .harness import (
    GridDatasets,
    MetricsReport,
    build_experiment_grid,
    evaluate_model,
    run_cross_validation,
    run_grid,
)
from .heads import SharedModel, TaskSpec, attach_head, new_model, save_checkpoint
from .text_pipeline import (
    DatasetManifest,
    build_vocab,
    cap_dataset,
    encode_examples,
    load_dataset,
    make_synthetic_corpus,
)

RESULTS_VERSION = 1
REPORT_COLUMNS = ("macro F1", "micro F1", "binary F1", "Precision", "Recall", "CE Loss")
_REPORT_FIELDS = ("macro_f1", "micro_f1", "binary_f1", "precision", "recall", "ce_loss")

SYNTHETIC_MAX_LEN = 20

# the fixed synthetic manifest set; names and task kinds follow the six
# auxiliary datasets the experiment grid is organized around
SYNTHETIC_TASKS = [
    ("subj", "single_classification", "in_domain"),
    ("imdb", "single_classification", "in_domain"),
    ("reddit", "single_regression", "in_domain"),
    ("wiki", "single_classification", "in_domain"),
    ("sts", "pair_regression", "cross_domain"),
    ("snli", "pair_classification", "cross_domain"),
]
SYNTHETIC_IN_DOMAIN = ("subj", "imdb", "reddit", "wiki")
SYNTHETIC_CROSS_DOMAIN = ("sts", "snli")


@dataclass
class ExperimentConfig:
    """One parsed experiment configuration document."""

    seed: int = 0
    profile: str | None = "desk"
    encoder: dict | None = None
    max_len: int = 128
    vocab_max_size: int = 50_000
    train: TrainConfig = field(default_factory=TrainConfig)
    target_manifest: DatasetManifest | None = None
    auxiliary_manifests: list[DatasetManifest] = field(default_factory=list)
    output_dir: str = "out"

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e.msg}") from e
        if obj.get("version") != 1:
            raise ConfigError(f"unsupported config version {obj.get('version')}")
        base = path.parent

        def load_manifest(ref) -> DatasetManifest:
            if isinstance(ref, str):
                mpath = base / ref
                if not mpath.exists():
                    raise ConfigError(f"manifest file not found: {mpath}")
                mobj = json.loads(mpath.read_text(encoding="utf-8"))
                mbase = mpath.parent
            else:
                mobj, mbase = dict(ref), base
            mobj["path"] = str((mbase / mobj["path"]).resolve())
            manifest = DatasetManifest.from_dict(mobj)
            if not Path(manifest.path).exists():
                raise ConfigError(f"dataset file not found: {manifest.path}")
            return manifest

        train_cfg = TrainConfig(**{"seed": obj.get("seed", 0), **obj.get("train", {})})
        cfg = cls(
            seed=obj.get("seed", 0),
            profile=obj.get("profile") if "encoder" not in obj else None,
            encoder=obj.get("encoder"),
            max_len=obj.get("max_len", 128),
            vocab_max_size=obj.get("vocab_max_size", 50_000),
            train=train_cfg,
            output_dir=obj.get("output_dir", "out"),
        )
        if "target" in obj:
            cfg.target_manifest = load_manifest(obj["target"])
        cfg.auxiliary_manifests = [load_manifest(ref) for ref in obj.get("auxiliaries", [])]
        return cfg

    def with_seed(self, seed: int) -> "ExperimentConfig":
        self.seed = seed
        self.train = TrainConfig(**{**self.train.to_dict(), "seed": seed})
        return self

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        if self.encoder is not None:
            merged = {"vocab_size": vocab_size, "max_len": self.max_len, "seed": self.seed}
            merged.update(self.encoder)
            return EncoderConfig(**merged)
        return profile_config(
            self.profile or "desk", vocab_size=vocab_size, max_len=self.max_len, seed=self.seed
        )


def resolve_seed(flag_seed: int | None, config_seed: int) -> int:
    if flag_seed is not None:
        return flag_seed
    env = os.environ.get("MTLF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"MTLF_SEED must be an integer, got {env!r}") from e
    return config_seed


def spec_from_manifest(manifest: DatasetManifest) -> TaskSpec:
    if manifest.is_classification:
        return TaskSpec(
            name=manifest.name,
            task_kind=manifest.task_kind,
            num_classes=len(manifest.labels),
            domain=manifest.domain,
        )
    # regression labels are normalized to [0, 1] at ingestion
    return TaskSpec(
        name=manifest.name,
        task_kind=manifest.task_kind,
        target_range=(0.0, 1.0),
        loss_kind="MSE",
        domain=manifest.domain,
    )


@dataclass
class LoadedExperiment:
    config: ExperimentConfig
    encoder_config: EncoderConfig
    target_spec: TaskSpec | None
    target_data: list
    auxiliaries: dict[str, tuple[TaskSpec, list]]


def load_experiment(config: ExperimentConfig) -> LoadedExperiment:
    """Load, cap, and encode every configured dataset behind one vocab."""
    manifests = list(config.auxiliary_manifests)
    if config.target_manifest is not None:
        manifests = [config.target_manifest] + manifests
    if not manifests:
        raise ConfigError("no datasets configured")
    raw = {}
    for i, manifest in enumerate(manifests):
        examples = load_dataset(manifest)
        if manifest.cap is not None:
            examples = cap_dataset(
                examples, manifest.cap, np.random.default_rng([config.seed, 17, i])
            )
        raw[manifest.name] = (manifest, examples)
    corpus = []
    for _, examples in raw.values():
        for ex in examples:
            corpus.append(ex.text_a)
            if ex.text_b:
                corpus.append(ex.text_b)
    vocab = build_vocab(corpus, min_freq=1, max_size=config.vocab_max_size)
    encoded = {
        name: (
            spec_from_manifest(manifest),
            encode_examples(vocab, examples, manifest.task_kind, config.max_len),
        )
        for name, (manifest, examples) in raw.items()
    }
    target_spec, target_data = None, []
    if config.target_manifest is not None:
        target_spec, target_data = encoded.pop(config.target_manifest.name)
    return LoadedExperiment(
        config=config,
        encoder_config=config.encoder_config(vocab.size),
        target_spec=target_spec,
        target_data=target_data,
        auxiliaries=encoded,
    )


def synthetic_experiment(
    seed: int,
    train: TrainConfig,
    profile: str,
    target_n: int = 200,
    aux_n: int = 600,
    signal: float = 0.8,
) -> LoadedExperiment:
    """An in-memory experiment over generated corpora, no external data."""
    raw = {}
    for i, (name, kind, domain) in enumerate(SYNTHETIC_TASKS):
        examples, _ = make_synthetic_corpus(
            kind, aux_n, signal_strength=signal, rng=np.random.default_rng([seed, 11, i])
        )
        raw[name] = (kind, domain, examples)
    target_examples, _ = make_synthetic_corpus(
        "single_classification",
        target_n,
        signal_strength=signal,
        rng=np.random.default_rng([seed, 11, len(SYNTHETIC_TASKS)]),
    )
    corpus = []
    for _, _, examples in raw.values():
        for ex in examples:
            corpus.append(ex.text_a)
            if ex.text_b:
                corpus.append(ex.text_b)
    corpus.extend(ex.text_a for ex in target_examples)
    vocab = build_vocab(corpus, min_freq=1, max_size=5_000)

    def make_spec(name, kind, domain):
        if kind == "single_classification":
            return TaskSpec(name=name, task_kind=kind, num_classes=2, domain=domain)
        if kind == "pair_classification":
            return TaskSpec(name=name, task_kind=kind, num_classes=3, domain=domain)
        return TaskSpec(name=name, task_kind=kind, target_range=(0.0, 1.0), loss_kind="MSE", domain=domain)

    auxiliaries = {
        name: (
            make_spec(name, kind, domain),
            encode_examples(vocab, examples, kind, SYNTHETIC_MAX_LEN),
        )
        for name, (kind, domain, examples) in raw.items()
    }
    target_spec = TaskSpec(name="target", task_kind="single_classification", num_classes=2)
    config = ExperimentConfig(seed=seed, profile=profile, max_len=SYNTHETIC_MAX_LEN, train=train)
    return LoadedExperiment(
        config=config,
        encoder_config=config.encoder_config(vocab.size),
        target_spec=target_spec,
        target_data=encode_examples(vocab, target_examples, "single_classification", SYNTHETIC_MAX_LEN),
        auxiliaries=auxiliaries,
    )


class JsonlLog:
    """Line-buffered JSONL sink; records carry no wall-clock timestamps."""

    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = path.open("w", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._fh.close()


def write_results(path: Path, results: dict[str, MetricsReport]) -> None:
    doc = {
        "version": RESULTS_VERSION,
        "runs": {run_id: report.to_dict() for run_id, report in results.items()},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_results(path: Path) -> dict[str, MetricsReport]:
    if not path.exists():
        raise ConfigError(f"results file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"results file is not valid JSON: {e.msg}") from e
    if doc.get("version") != RESULTS_VERSION or "runs" not in doc:
        raise ConfigError("results file does not match the expected schema")
    try:
        return {run_id: MetricsReport.from_dict(obj) for run_id, obj in doc["runs"].items()}
    except (KeyError, TypeError) as e:
        raise ConfigError(f"results file does not match the expected schema: {e}") from e


def render_markdown(results: dict[str, MetricsReport]) -> str:
    """Markdown table in fixed column order with the best value per column bold
    (max everywhere, min for CE loss)."""
    rows = list(results.items())
    best: dict[str, float] = {}
    for fieldname in _REPORT_FIELDS:
        values = [getattr(r, fieldname) for _, r in rows]
        best[fieldname] = min(values) if fieldname == "ce_loss" else max(values)
    lines = ["| Model | " + " | ".join(REPORT_COLUMNS) + " |"]
    lines.append("|" + "---|" * (len(REPORT_COLUMNS) + 1))
    for run_id, report in rows:
        cells = []
        for fieldname in _REPORT_FIELDS:
            value = getattr(report, fieldname)
            text = f"{value:.3f}"
            if value == best[fieldname]:
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {run_id} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_csv(results: dict[str, MetricsReport]) -> str:
    import csv
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(("model",) + REPORT_COLUMNS)
    for run_id, report in results.items():
        writer.writerow([run_id] + [f"{getattr(report, f):.6f}" for f in _REPORT_FIELDS])
    return buf.getvalue()


# -- commands -------------------------------------------------------------------

def _select_tasks(experiment: LoadedExperiment, mode: str, names: list[str]) -> list[str]:
    known = sorted(experiment.auxiliaries)
    for name in names:
        if name not in experiment.auxiliaries:
            raise RegistryError(f"unknown task '{name}'; known tasks: {', '.join(known)}")
    if mode == "none":
        if names:
            raise ConfigError("--tasks has no effect with --mode none")
        return []
    if not names:
        raise ConfigError(f"--mode {mode} needs --tasks")
    if mode == "tl" and len(names) != 1:
        raise ConfigError("--mode tl takes exactly one task")
    return names


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    config.with_seed(resolve_seed(args.seed, config.seed))
    if args.out:
        config.output_dir = args.out
    return config


def _auxiliary_phase(experiment: LoadedExperiment, task_names, log) -> SharedModel:
    model = new_model(
        experiment.encoder_config, np.random.default_rng([experiment.config.seed, 31, 0])
    )
    if task_names:
        engine = MtlEngine(model, experiment.config.train, log=log)
        for name in task_names:
            spec, data = experiment.auxiliaries[name]
            engine.register_task(spec, data)
        engine.run_mtl_phase()
    return model


def cmd_build_vocab(args) -> int:
    corpus = []
    for input_path in args.input:
        path = Path(input_path)
        if not path.exists():
            raise ConfigError(f"input file not found: {path}")
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    corpus.extend(
                        str(obj[k]) for k in ("text", "text_a", "text_b") if obj.get(k)
                    )
                except json.JSONDecodeError:
                    corpus.append(line)  # plain-text corpus line
    vocab = build_vocab(corpus, min_freq=args.min_freq, max_size=args.max_size)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(vocab.to_json() + "\n", encoding="utf-8")
    print(f"vocab: {vocab.size} tokens from {len(args.input)} file(s) -> {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    experiment = load_experiment(config)
    if experiment.target_spec is None:
        raise ConfigError("config has no target dataset")
    names = _select_tasks(experiment, args.mode, _split_names(args.tasks))
    out_dir = Path(config.output_dir)
    log = JsonlLog(out_dir / "train.log.jsonl")
    last_step: dict | None = None

    def logger(record: dict) -> None:
        nonlocal last_step
        if "loss" in record:
            last_step = record
        log(record)

    try:
        model = _auxiliary_phase(experiment, names, logger)
        attach_head(
            model, experiment.target_spec, np.random.default_rng([config.seed, 606, 0])
        )
        model, best_epoch, trace = run_target_finetune(
            model, experiment.target_spec.name, experiment.target_data, config.train, log=logger
        )
    except NumericError as e:
        where = (
            f" (last stable step: {json.dumps(last_step)})" if last_step else ""
        )
        print(f"numeric failure: {e}{where}", file=sys.stderr)
        log.close()
        return 3
    save_checkpoint(model, out_dir / "checkpoint")
    log.close()
    report = evaluate_model(
        model, experiment.target_spec.name, experiment.target_data, config.train.batch_size
    )
    print(
        f"trained [{args.mode}] aux={','.join(names) or '-'} "
        f"best_epoch={best_epoch} val_ce={min(trace):.4f} train_macro_f1={report.macro_f1:.4f} "
        f"-> {out_dir}"
    )
    return 0


def cmd_cv(args) -> int:
    config = _load_config(args)
    experiment = load_experiment(config)
    if experiment.target_spec is None:
        raise ConfigError("config has no target dataset")
    names = _select_tasks(experiment, args.mode, _split_names(args.tasks))
    out_dir = Path(config.output_dir)
    log = JsonlLog(out_dir / "train.log.jsonl")
    try:
        model = _auxiliary_phase(experiment, names, log)
        base_encoder = model.encoder

        def factory(fold):
            return SharedModel(encoder=base_encoder.copy())

        report = run_cross_validation(
            factory,
            experiment.target_spec,
            experiment.target_data,
            config.train,
            k=args.folds,
            log=log,
        )
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        log.close()
        return 3
    log.close()
    write_results(out_dir / "results.json", {"CV": report})
    print(
        f"cv k={args.folds} [{args.mode}] aux={','.join(names) or '-'} "
        f"macro_f1={report.macro_f1:.4f} ce={report.ce_loss:.4f} -> {out_dir / 'results.json'}"
    )
    return 0


def cmd_grid(args) -> int:
    if args.synthetic:
        seed = resolve_seed(args.seed, 0)
        train = TrainConfig(
            seed=seed,
            learning_rate=args.learning_rate,
            batch_size=args.batch_size,
            max_epochs=args.epochs,
            mtl_epochs=args.mtl_epochs,
        )
        experiment = synthetic_experiment(
            seed,
            train,
            args.profile,
            target_n=args.target_n,
            aux_n=args.aux_n,
            signal=args.signal,
        )
        in_domain, cross_domain = SYNTHETIC_IN_DOMAIN, SYNTHETIC_CROSS_DOMAIN
        out_dir = Path(args.out or "out")
    else:
        if not args.config:
            raise ConfigError("grid needs --config or --synthetic")
        config = _load_config(args)
        experiment = load_experiment(config)
        if experiment.target_spec is None:
            raise ConfigError("config has no target dataset")
        in_domain = tuple(
            m.name for m in config.auxiliary_manifests if m.domain == "in_domain"
        )
        cross_domain = tuple(
            m.name for m in config.auxiliary_manifests if m.domain == "cross_domain"
        )
        out_dir = Path(config.output_dir)

    grid = build_experiment_grid(in_domain, cross_domain)
    datasets = GridDatasets(
        encoder_config=experiment.encoder_config,
        target_spec=experiment.target_spec,
        target_data=experiment.target_data,
        auxiliaries=experiment.auxiliaries,
    )
    log = JsonlLog(out_dir / "train.log.jsonl")
    try:
        results = run_grid(
            grid,
            datasets,
            experiment.config.train,
            k=args.folds,
            parallel=args.parallel,
            only=args.only,
            log=log if args.parallel <= 1 else None,  # keep log ordering deterministic
        )
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        log.close()
        return 3
    log.close()
    write_results(out_dir / "results.json", results)
    for run_id, report in results.items():
        print(f"{run_id}: macro_f1={report.macro_f1:.4f} ce={report.ce_loss:.4f}")
    print(f"results -> {out_dir / 'results.json'}")
    return 0


def cmd_report(args) -> int:
    results = read_results(Path(args.results))
    markdown = render_markdown(results)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(markdown, encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(render_csv(results), encoding="utf-8")
    print(markdown, end="")
    return 0


def _split_names(raw: str | None) -> list[str]:
    return [t for t in (raw or "").replace(",", " ").split() if t]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtlf",
        description="Multitask training, cross-validation, and experiment grids for sentence-level text tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="build a vocabulary from corpus files")
    p.add_argument("--input", nargs="+", required=True, help="JSONL or plain-text corpus files")
    p.add_argument("--output", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=50_000)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="auxiliary phase + single-split target fine-tune")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("none", "tl", "mtl"), default="none")
    p.add_argument("--tasks", help="comma-separated auxiliary task names")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="k-fold cross-validation of the target task")
    p.add_argument("--config", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--mode", choices=("none", "tl", "mtl"), default="none")
    p.add_argument("--tasks")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("grid", help="run the 15-cell experiment grid")
    p.add_argument("--config")
    p.add_argument("--synthetic", action="store_true", help="generate synthetic datasets")
    p.add_argument("--profile", choices=tuple(PROFILES), default="desk")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--only", help="run a single grid cell, e.g. M4")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--target-n", type=int, default=200, help="synthetic target size")
    p.add_argument("--aux-n", type=int, default=600, help="synthetic auxiliary size")
    p.add_argument("--signal", type=float, default=0.8, help="synthetic signal strength")
    p.add_argument("--learning-rate", type=float, default=2e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--mtl-epochs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("report", help="render results.json as a markdown table")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except MtlfError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
