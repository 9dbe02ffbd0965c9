"""Metrics, k-fold cross-validation, and the experiment grid.

Reported "precision"/"recall" are the positive-class binary values (the
positive class is the higher-index label, i.e. "biased" for the target
task); macro-averaged variants ship under separate keys.  F1 values are
computed as 2*TP / (2*TP + FP + FN), which makes micro F1 equal accuracy
exactly for single-label classification.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .encoder import EncoderConfig
from .engine import MtlEngine, TrainConfig, collate, run_target_finetune
from .errors import ConfigError, ContractError, DataError, ParameterError
from .heads import SharedModel, TaskSpec, attach_head, forward_task, new_model, task_loss
from .text_pipeline import EncodedExample

_SALT_FOLD_HEAD = 606


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class 2x2 tables: tp/fp/fn/tn arrays indexed by class."""

    num_classes: int
    tp: tuple[int, ...]
    fp: tuple[int, ...]
    fn: tuple[int, ...]
    tn: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]


def confusion_matrix(predictions, labels, num_classes: int) -> ConfusionCounts:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ContractError(
            f"predictions and labels differ in length: {predictions.shape} vs {labels.shape}"
        )
    if predictions.size and (
        predictions.max() >= num_classes or labels.max() >= num_classes
        or predictions.min() < 0 or labels.min() < 0
    ):
        raise ContractError(f"entries must lie in [0, {num_classes})")
    joint = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(joint, (labels, predictions), 1)
    n = int(joint.sum())
    tp = np.diag(joint)
    fn = joint.sum(axis=1) - tp
    fp = joint.sum(axis=0) - tp
    tn = n - tp - fn - fp
    return ConfusionCounts(
        num_classes=num_classes,
        tp=tuple(int(v) for v in tp),
        fp=tuple(int(v) for v in fp),
        fn=tuple(int(v) for v in fn),
        tn=tuple(int(v) for v in tn),
    )


def _safe_div(num: float, den: float) -> float:
    return num / den if den else 0.0


def binary_prf(counts: ConfusionCounts, positive_class: int) -> tuple[float, float, float]:
    """(precision, recall, F1) of one class; zero denominators yield 0."""
    if not 0 <= positive_class < counts.num_classes:
        raise ParameterError(f"positive_class {positive_class} out of range")
    tp = counts.tp[positive_class]
    fp = counts.fp[positive_class]
    fn = counts.fn[positive_class]
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    return precision, recall, f1


def aggregate_f1(counts: ConfusionCounts) -> tuple[float, float]:
    """(macro F1, micro F1): unweighted class mean, and globally pooled."""
    if counts.num_classes < 2:
        raise ParameterError("aggregate_f1 needs >= 2 classes")
    per_class = [binary_prf(counts, c)[2] for c in range(counts.num_classes)]
    macro = sum(per_class) / counts.num_classes
    tp = sum(counts.tp)
    fp = sum(counts.fp)
    fn = sum(counts.fn)
    micro = _safe_div(2 * tp, 2 * tp + fp + fn)
    return macro, micro


@dataclass
class MetricsReport:
    macro_f1: float
    micro_f1: float
    binary_f1: float
    precision: float
    recall: float
    ce_loss: float
    n: int
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    folds: list["MetricsReport"] | None = None

    def to_dict(self) -> dict:
        out = {
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "binary_f1": self.binary_f1,
            "precision": self.precision,
            "recall": self.recall,
            "ce_loss": self.ce_loss,
            "n": self.n,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
        }
        if self.folds is not None:
            out["folds"] = [f.to_dict() for f in self.folds]
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        folds = [cls.from_dict(f) for f in obj["folds"]] if obj.get("folds") else None
        return cls(
            macro_f1=obj["macro_f1"],
            micro_f1=obj["micro_f1"],
            binary_f1=obj["binary_f1"],
            precision=obj["precision"],
            recall=obj["recall"],
            ce_loss=obj["ce_loss"],
            n=obj["n"],
            macro_precision=obj.get("macro_precision", 0.0),
            macro_recall=obj.get("macro_recall", 0.0),
            folds=folds,
        )


def metrics_from_counts(
    counts: ConfusionCounts, ce_loss: float, positive_class: int
) -> MetricsReport:
    precision, recall, binary_f1 = binary_prf(counts, positive_class)
    macro_f1, micro_f1 = aggregate_f1(counts)
    per_class = [binary_prf(counts, c) for c in range(counts.num_classes)]
    return MetricsReport(
        macro_f1=macro_f1,
        micro_f1=micro_f1,
        binary_f1=binary_f1,
        precision=precision,
        recall=recall,
        ce_loss=ce_loss,
        n=counts.n,
        macro_precision=sum(p for p, _, _ in per_class) / counts.num_classes,
        macro_recall=sum(r for _, r, _ in per_class) / counts.num_classes,
    )


def evaluate_model(
    model: SharedModel,
    target_task: str,
    test_data,
    batch_size: int = 32,
    positive_class: int | None = None,
) -> MetricsReport:
    """Eval-mode argmax metrics plus mean CE loss over a held-out set.

    Argmax ties break toward the lowest class index.  The positive class
    defaults to the highest label index (the "biased" class for binary
    targets).
    """
    test_data = list(test_data)
    if not test_data:
        raise DataError("evaluate_model needs a nonempty test set")
    spec = model.tasks[target_task]
    if not spec.is_classification:
        raise ContractError("evaluate_model scores classification tasks only")
    if positive_class is None:
        positive_class = spec.num_classes - 1
    predictions: list[int] = []
    labels: list[int] = []
    ce_total = 0.0
    with ag.no_grad():
        for start in range(0, len(test_data), batch_size):
            chunk = test_data[start : start + batch_size]
            ids, mask, y = collate(chunk)
            logits = forward_task(model, target_task, ids, mask, training=False)
            ce_total += task_loss(spec, logits, y).item() * len(chunk)
            predictions.extend(int(i) for i in np.argmax(logits.data, axis=1))
            labels.extend(int(v) for v in y)
    counts = confusion_matrix(predictions, labels, spec.num_classes)
    return metrics_from_counts(counts, ce_total / len(test_data), positive_class)


# -- cross-validation ----------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    """k disjoint index sequences covering 0..n-1 with sizes differing <= 1."""

    folds: tuple[tuple[int, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def test_indices(self, i: int) -> tuple[int, ...]:
        return self.folds[i]

    def train_indices(self, i: int) -> tuple[int, ...]:
        return tuple(idx for j, fold in enumerate(self.folds) if j != i for idx in fold)


def kfold_split(n: int, k: int, seed: int, stratify_labels=None) -> FoldSplit:
    """Seeded shuffle, then round-robin deal (per class when stratified)."""
    if k < 2:
        raise ParameterError("k must be >= 2")
    if n < k:
        raise ParameterError(f"cannot split {n} items into {k} folds")
    rng = np.random.default_rng([seed, 77])
    if stratify_labels is None:
        order = rng.permutation(n)
    else:
        labels = np.asarray(stratify_labels)
        if len(labels) != n:
            raise ParameterError("stratify_labels length must equal n")
        order = np.concatenate(
            [rng.permutation(np.nonzero(labels == cls)[0]) for cls in np.unique(labels)]
        )
    folds: list[list[int]] = [[] for _ in range(k)]
    for position, index in enumerate(order):
        folds[position % k].append(int(index))
    return FoldSplit(folds=tuple(tuple(sorted(f)) for f in folds))


def mean_report(reports: list[MetricsReport]) -> MetricsReport:
    """Unweighted mean of fold reports, keeping the per-fold breakdown."""
    k = len(reports)
    return MetricsReport(
        macro_f1=sum(r.macro_f1 for r in reports) / k,
        micro_f1=sum(r.micro_f1 for r in reports) / k,
        binary_f1=sum(r.binary_f1 for r in reports) / k,
        precision=sum(r.precision for r in reports) / k,
        recall=sum(r.recall for r in reports) / k,
        ce_loss=sum(r.ce_loss for r in reports) / k,
        n=sum(r.n for r in reports),
        macro_precision=sum(r.macro_precision for r in reports) / k,
        macro_recall=sum(r.macro_recall for r in reports) / k,
        folds=list(reports),
    )


def run_cross_validation(
    model_factory,
    target_spec: TaskSpec,
    target_data,
    config: TrainConfig,
    k: int = 5,
    stratified: bool = True,
    rng_salt: int = 0,
    log=None,
) -> MetricsReport:
    """k-fold CV of target fine-tuning; aggregate is the fold mean.

    ``model_factory(fold_index)`` must return a fresh SharedModel without
    the target head (its encoder may carry auxiliary training); a new head
    is attached per fold.
    """
    target_data = list(target_data)
    if not target_data:
        raise DataError("run_cross_validation needs target data")
    labels = [ex.label for ex in target_data] if stratified else None
    split = kfold_split(len(target_data), k, config.seed, stratify_labels=labels)
    reports = []
    for fold in range(k):
        model = model_factory(fold)
        attach_head(
            model,
            target_spec,
            np.random.default_rng([config.seed, _SALT_FOLD_HEAD, rng_salt, fold]),
        )
        train_part = [target_data[i] for i in split.train_indices(fold)]
        test_part = [target_data[i] for i in split.test_indices(fold)]
        run_target_finetune(
            model,
            target_spec.name,
            train_part,
            config,
            rng_salt=rng_salt * 1000 + fold,
            log=log,
        )
        reports.append(evaluate_model(model, target_spec.name, test_part, config.batch_size))
    return mean_report(reports)


# -- the experiment grid -------------------------------------------------------

GRID_MODES = ("none", "tl", "mtl_in_domain", "mtl_cross_domain")


@dataclass(frozen=True)
class GridEntry:
    run_id: str
    mode: str
    auxiliary: tuple[str, ...]

    def __post_init__(self):
        if self.mode not in GRID_MODES:
            raise ParameterError(f"unknown grid mode '{self.mode}'")


def build_experiment_grid(in_domain_tasks, cross_domain_tasks) -> list[GridEntry]:
    """The 15-run layout: B1 (none), B2-B5 (TL), M1-M5 (triples then all
    four in-domain), M6-M10 (the same sets plus both cross-domain tasks)."""
    in_domain = tuple(in_domain_tasks)
    cross_domain = tuple(cross_domain_tasks)
    if len(in_domain) != 4 or len(set(in_domain)) != 4:
        raise ParameterError("need exactly 4 distinct in-domain task names")
    if len(cross_domain) != 2 or len(set(cross_domain)) != 2:
        raise ParameterError("need exactly 2 distinct cross-domain task names")
    entries = [GridEntry("B1", "none", ())]
    for i, name in enumerate(in_domain):
        entries.append(GridEntry(f"B{i + 2}", "tl", (name,)))
    sets = [
        tuple(t for t in in_domain if t != excluded) for excluded in reversed(in_domain)
    ] + [in_domain]
    for i, aux in enumerate(sets):
        entries.append(GridEntry(f"M{i + 1}", "mtl_in_domain", aux))
    for i, aux in enumerate(sets):
        entries.append(GridEntry(f"M{i + 6}", "mtl_cross_domain", aux + cross_domain))
    return entries


@dataclass
class GridDatasets:
    """Everything a grid run needs: the target plus named auxiliary tasks."""

    encoder_config: EncoderConfig
    target_spec: TaskSpec
    target_data: list[EncodedExample]
    auxiliaries: dict[str, tuple[TaskSpec, list[EncodedExample]]] = field(default_factory=dict)


def run_grid(
    grid: list[GridEntry],
    datasets: GridDatasets,
    config: TrainConfig,
    k: int = 5,
    parallel: int = 1,
    only: str | None = None,
    log=None,
) -> dict[str, MetricsReport]:
    """Run every grid entry: fresh model, auxiliary phase per mode, then CV."""
    if only is not None:
        grid = [e for e in grid if e.run_id == only]
        if not grid:
            raise ConfigError(f"no grid entry named '{only}'")
    for entry in grid:
        missing = [name for name in entry.auxiliary if name not in datasets.auxiliaries]
        if missing:
            raise ConfigError(f"entry {entry.run_id} references unknown datasets: {missing}")

    def run_entry(item):
        index, entry = item
        model = new_model(
            datasets.encoder_config, np.random.default_rng([config.seed, 31, index])
        )
        if entry.auxiliary:
            engine = MtlEngine(model, config, log=log)
            for name in entry.auxiliary:
                spec, data = datasets.auxiliaries[name]
                engine.register_task(spec, data)
            engine.run_mtl_phase()
        base_encoder = model.encoder

        def factory(fold):
            return SharedModel(encoder=base_encoder.copy())

        return entry.run_id, run_cross_validation(
            factory,
            datasets.target_spec,
            datasets.target_data,
            config,
            k=k,
            rng_salt=index,
            log=log,
        )

    items = list(enumerate(grid))
    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            pairs = list(pool.map(run_entry, items))
    else:
        pairs = [run_entry(item) for item in items]
    return dict(pairs)
