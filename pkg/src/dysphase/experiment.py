"""Speaker-independent cross-validation: fold planning, training
orchestration, soft-voted speaker scores, metrics and report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .corpus import DYSARTHRIC, NEUROTYPICAL, CorpusManifest
from .featurizer import REPRESENTATIONS, cache_path, cache_read
from .neuralnet import (
    ModelCheckpoint,
    Network,
    TrainConfig,
    build_dual_cnn,
    build_single_cnn,
    fit,
)

log = logging.getLogger(__name__)

DEFAULT_CONFIGS = ("mag", "phase", "mgd", "if", "mag+phase", "mag+mgd", "mag+if", "env+tfs")

# Published results on the PC-GITA Spanish corpus (accuracy %, AUC), kept for
# comparison only: the corpus is licence-restricted and not shipped.
REFERENCE_TARGETS = {
    "mag": ((69.72, 15.62), (0.77, 0.16)),
    "phase": ((62.76, 14.52), (0.70, 0.15)),
    "mgd": ((70.78, 12.22), (0.79, 0.12)),
    "if": ((72.64, 13.37), (0.79, 0.13)),
    "mag+phase": ((87.32, 9.69), (0.93, 0.10)),
    "mag+mgd": ((80.92, 10.11), (0.90, 0.10)),
    "mag+if": ((93.68, 5.32), (0.97, 0.05)),
    "env+tfs": ((86.04, 8.03), (0.94, 0.08)),
}


class FoldPlanError(ValueError):
    pass


class MissingCacheError(FileNotFoundError):
    pass


def parse_config(name: str) -> tuple[str, ...]:
    """``"mag+if"`` -> ``("mag", "if")``; one or two known representations."""
    reps = tuple(r.strip() for r in name.split("+"))
    if not 1 <= len(reps) <= 2 or any(r not in REPRESENTATIONS for r in reps):
        raise ValueError(f"bad configuration {name!r}: use one or two of {REPRESENTATIONS} joined by '+'")
    if len(reps) == 2 and reps[0] == reps[1]:
        raise ValueError(f"bad configuration {name!r}: the two inputs must differ")
    return reps


# --------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class Fold:
    index: int
    test: tuple[str, ...]
    dev: tuple[str, ...]
    train: tuple[str, ...]


@dataclass
class FoldPlan:
    k: int
    seed: int
    folds: list[Fold]
    labels: dict[str, int]

    def validate(self):
        """Raise :class:`FoldPlanError` if any fold mixes roles or the test
        folds do not partition the speakers."""
        everyone = set(self.labels)
        tested: list[str] = []
        for f in self.folds:
            t, d, r = set(f.test), set(f.dev), set(f.train)
            if t & d or t & r or d & r:
                raise FoldPlanError(f"fold {f.index}: a speaker has two roles")
            if t | d | r != everyone:
                raise FoldPlanError(f"fold {f.index}: roles do not cover every speaker")
            tested.extend(f.test)
        if len(tested) != len(set(tested)) or set(tested) != everyone:
            raise FoldPlanError("test folds do not partition the speakers")


def make_folds(manifest, k: int, seed: int = 0) -> FoldPlan:
    """Stratified speaker folds.

    Speakers of each class are shuffled with ``seed`` and dealt round-robin
    into ``k`` test folds. For each fold the development speakers are drawn
    per class from that fold's non-test speakers, as many as there are test
    speakers of the class, but never more than half of the remaining ones so
    that training keeps speakers of both classes. ``manifest`` is a
    :class:`CorpusManifest` or a ``{speaker: label}`` mapping.
    """
    labels = manifest.speaker_labels() if isinstance(manifest, CorpusManifest) else dict(manifest)
    if k < 2:
        raise FoldPlanError("k must be at least 2")
    by_class = {c: sorted(s for s, lab in labels.items() if lab == c) for c in (NEUROTYPICAL, DYSARTHRIC)}
    for c, spk in by_class.items():
        if len(spk) < k:
            raise FoldPlanError(f"class {c} has {len(spk)} speakers, fewer than k={k}")
    test = [{c: [] for c in by_class} for _ in range(k)]
    for c, spk in by_class.items():
        order = np.random.default_rng([seed, c]).permutation(len(spk))
        for pos, i in enumerate(order):
            test[pos % k][c].append(spk[i])
    folds = []
    for f in range(k):
        dev_all, test_all = [], []
        for c, spk in by_class.items():
            held = set(test[f][c])
            rest = [s for s in spk if s not in held]
            n_dev = min(len(held), len(rest) // 2)
            rng = np.random.default_rng([seed, f, c, 1])
            dev_all += sorted(rest[i] for i in rng.choice(len(rest), n_dev, replace=False))
            test_all += sorted(held)
        taken = set(dev_all) | set(test_all)
        train = sorted(s for s in labels if s not in taken)
        folds.append(Fold(f, tuple(sorted(test_all)), tuple(sorted(dev_all)), tuple(train)))
    plan = FoldPlan(k, seed, folds, labels)
    plan.validate()
    return plan


# --------------------------------------------------------------------------
# data


@dataclass
class SegmentSet:
    """Stacked model inputs with one row per segment."""

    inputs: list[np.ndarray]  # one (N, K, B) array per representation
    labels: np.ndarray
    speakers: list[str]
    keys: list[tuple[str, int]]  # (utterance_id, segment index)

    def __len__(self):
        return len(self.labels)

    @property
    def x(self):
        return self.inputs[0] if len(self.inputs) == 1 else self.inputs


FeatureData = dict  # rep -> speaker -> utterance_id -> {index: values}


def load_feature_data(manifest: CorpusManifest, reps, cache_dir) -> FeatureData:
    """Read every cache file needed for ``reps``; labels come from the manifest."""
    data: FeatureData = {}
    for rep in reps:
        per_spk: dict = {}
        for e in manifest.entries:
            path = cache_path(cache_dir, rep, e.utterance_id)
            if not path.exists():
                raise MissingCacheError(f"no {rep!r} features for {e.path} (expected {path}); run extract first")
            per_spk.setdefault(e.speaker_id, {})[e.utterance_id] = {s.index: s.values for s in cache_read(path)}
        data[rep] = per_spk
    return data


def build_segment_set(data: FeatureData, reps, speakers, labels: dict[str, int]) -> SegmentSet:
    """Segments of ``speakers`` in canonical order (speaker, utterance,
    index). With two representations only segments present in both are
    used, paired by utterance and index."""
    cols: list[list[np.ndarray]] = [[] for _ in reps]
    y, spk_col, keys = [], [], []
    for spk in sorted(speakers):
        utts = data[reps[0]].get(spk, {})
        for utt in sorted(utts):
            common = set(utts[utt])
            for rep in reps[1:]:
                common &= set(data[rep].get(spk, {}).get(utt, {}))
            for idx in sorted(common):
                for j, rep in enumerate(reps):
                    cols[j].append(data[rep][spk][utt][idx])
                y.append(labels[spk])
                spk_col.append(spk)
                keys.append((utt, idx))
    inputs = [np.stack(c).astype(np.float32) if c else np.zeros((0, 0, 0), np.float32) for c in cols]
    return SegmentSet(inputs, np.asarray(y, dtype=np.int64), spk_col, keys)


# --------------------------------------------------------------------------
# training and scoring


def train_model(config: TrainConfig, model, train: SegmentSet, dev: SegmentSet,
                progress=None) -> ModelCheckpoint:
    """Train ``model`` (a :class:`Network`, or a ``ModelSpec`` initialised
    with ``config.seed``) and return its final-epoch checkpoint."""
    if len(train) == 0 or len(dev) == 0:
        raise ValueError("training and development segment sets must be non-empty")
    overlap = set(train.speakers) & set(dev.speakers)
    if overlap:
        raise FoldPlanError(f"speakers in both train and dev: {sorted(overlap)[:5]}")
    net = model if isinstance(model, Network) else Network(model, seed=config.seed)
    return fit(net, train.x, train.labels, dev.x, dev.labels, config, progress)


def _as_network(model) -> Network:
    return model.to_network() if isinstance(model, ModelCheckpoint) else model


def speaker_score(model, x) -> float:
    """Soft vote: mean probability of the dysarthric class over one
    speaker's segments (eval mode)."""
    probs = _as_network(model).predict_proba(x)[:, DYSARTHRIC]
    if len(probs) == 0:
        raise ValueError("speaker has no segments to score")
    # fsum is exactly rounded, so the vote does not depend on segment order
    return math.fsum(float(p) for p in probs) / len(probs)


def speaker_scores(model, segs: SegmentSet) -> dict[str, float]:
    """Soft-voted score of every speaker in ``segs``."""
    probs = _as_network(model).predict_proba(segs.x)[:, DYSARTHRIC]
    groups: dict[str, list[float]] = {}
    for spk, p in zip(segs.speakers, probs):
        groups.setdefault(spk, []).append(float(p))
    return {spk: math.fsum(v) / len(v) for spk, v in sorted(groups.items())}


def auc(scores, labels) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic
    (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = int(np.sum(labels == DYSARTHRIC)), int(np.sum(labels == NEUROTYPICAL))
    if pos + neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if pos == 0 or neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)  # midranks for ties
    u = float(ranks[labels == DYSARTHRIC].sum()) - pos * (pos + 1) / 2
    return u / (pos * neg)


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Percent correct when a score >= ``threshold`` predicts dysarthric."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    if len(scores) == 0:
        raise ValueError("accuracy of an empty set")
    pred = np.where(scores >= threshold, DYSARTHRIC, NEUROTYPICAL)
    return 100.0 * float(np.mean(pred == labels))


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class ModelConfig:
    channels: int = 64
    dropout: float = 0.5
    hidden: int = 128


@dataclass
class CVConfig:
    configs: list[str] = field(default_factory=lambda: list(DEFAULT_CONFIGS))
    k: int = 10
    n_seeds: int = 5
    n_splits: int = 5
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        for c in self.configs:
            parse_config(c)
        if self.k < 2 or self.n_seeds < 1 or self.n_splits < 1 or self.workers < 1:
            raise ValueError("k >= 2, n_seeds >= 1, n_splits >= 1 and workers >= 1 are required")


@dataclass(frozen=True)
class ScoreRow:
    config: str
    seed: int
    split: int
    fold: int
    speaker_id: str
    label: int
    score: float


@dataclass
class ModelResult:
    config: str
    seed: int
    split: int
    accuracy: float
    auc: float


@dataclass
class EvaluationReport:
    configs: list[str]
    rows: list[ScoreRow]
    results: list[ModelResult]
    settings: dict

    def summary(self) -> dict[str, dict[str, float]]:
        """Mean and population std of accuracy and AUC per configuration."""
        out = {}
        for c in self.configs:
            acc = np.array([r.accuracy for r in self.results if r.config == c])
            au = np.array([r.auc for r in self.results if r.config == c])
            out[c] = {
                "accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
                "auc_mean": float(au.mean()), "auc_std": float(au.std()),
            }
        return out


def _model_seed(base: int, seed_index: int) -> int:
    return base + seed_index


def _run_job(job, plan: FoldPlan, data: FeatureData, cv: CVConfig, train_cfg: TrainConfig,
             model_cfg: ModelConfig) -> list[ScoreRow]:
    seed_index, split, fold_index = job
    fold = plan.folds[fold_index]
    labels = plan.labels
    mseed = _model_seed(cv.seed, seed_index)
    tcfg = TrainConfig(**{**asdict(train_cfg), "seed": mseed})
    singles: dict[str, ModelCheckpoint] = {}

    def sets(reps):
        return tuple(build_segment_set(data, reps, spk, labels) for spk in (fold.train, fold.dev, fold.test))

    def single(rep):
        if rep not in singles:
            tr, dv, _ = sets((rep,))
            k, b = tr.inputs[0].shape[1:]
            spec = build_single_cnn(k, b, model_cfg.channels, model_cfg.dropout)
            log.info("seed %d split %d fold %d: training %s", seed_index, split, fold_index, rep)
            singles[rep] = train_model(tcfg, spec, tr, dv)
        return singles[rep]

    rows = []
    for name in cv.configs:
        reps = parse_config(name)
        if len(reps) == 1:
            model = single(reps[0])
        else:
            a, b = single(reps[0]), single(reps[1])
            tr, dv, _ = sets(reps)
            net = build_dual_cnn(a, b, seed=mseed, hidden=model_cfg.hidden)
            log.info("seed %d split %d fold %d: training %s", seed_index, split, fold_index, name)
            model = train_model(tcfg, net, tr, dv)
        test = build_segment_set(data, reps, fold.test, labels)
        for spk, score in speaker_scores(model, test).items():
            rows.append(ScoreRow(name, seed_index, split, fold_index, spk, labels[spk], score))
    return rows


_WORKER_STATE: dict = {}


def _worker_init(state):
    _WORKER_STATE.update(state)


def _worker_job(job):
    s = _WORKER_STATE
    return job, _run_job(job, s["plans"][job[1]], s["data"], s["cv"], s["train"], s["model"])


def run_cross_validation(manifest: CorpusManifest, cache_dir, cv: CVConfig | None = None,
                         train_cfg: TrainConfig | None = None,
                         model_cfg: ModelConfig | None = None) -> EvaluationReport:
    """Train and score every configuration on every (seed, split, fold).

    Split ``p`` uses fold seed ``cv.seed + p``; seed index ``t`` initialises
    and shuffles with ``cv.seed + t``. Within a (seed, split, fold) job the
    single-input models are trained once and reused as branch
    initialisations for every dual configuration. Accuracy and AUC are
    computed per (seed, split) over the pooled test speakers of all folds,
    then averaged. The result does not depend on ``cv.workers``.
    """
    cv = cv or CVConfig()
    train_cfg = train_cfg or TrainConfig()
    model_cfg = model_cfg or ModelConfig()
    reps = sorted({r for c in cv.configs for r in parse_config(c)})
    data = load_feature_data(manifest, reps, cache_dir)
    plans = [make_folds(manifest, cv.k, cv.seed + p) for p in range(cv.n_splits)]
    jobs = [(t, p, f) for t in range(cv.n_seeds) for p in range(cv.n_splits) for f in range(cv.k)]
    out: dict = {}
    if cv.workers <= 1 or len(jobs) < 2:
        for job in jobs:
            out[job] = _run_job(job, plans[job[1]], data, cv, train_cfg, model_cfg)
    else:
        state = {"plans": plans, "data": data, "cv": cv, "train": train_cfg, "model": model_cfg}
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(cv.workers, mp_context=ctx, initializer=_worker_init,
                                 initargs=(state,)) as pool:
            for job, rows in pool.map(_worker_job, jobs):
                out[job] = rows
    rows = [r for job in sorted(out) for r in out[job]]
    results = []
    for name in cv.configs:
        for t in range(cv.n_seeds):
            for p in range(cv.n_splits):
                sel = [r for r in rows if r.config == name and r.seed == t and r.split == p]
                sc, lb = [r.score for r in sel], [r.label for r in sel]
                results.append(ModelResult(name, t, p, accuracy(sc, lb), auc(sc, lb)))
    settings = {
        "cv": asdict(cv) | {"workers": None},
        "train": asdict(train_cfg),
        "model": asdict(model_cfg),
        "n_speakers": len(plans[0].labels),
    }
    return EvaluationReport(list(cv.configs), rows, results, settings)


# --------------------------------------------------------------------------
# report files


def _fmt(x: float, digits=2) -> str:
    return f"{x:.{digits}f}"


def format_summary(report: EvaluationReport) -> str:
    """Plain-text table: accuracy (%) and AUC as mean ± std per configuration,
    beside the published PC-GITA numbers where they exist."""
    summ = report.summary()
    s = report.settings["cv"]
    lines = [
        f"{s['n_seeds']} seed(s) x {s['n_splits']} split(s), {s['k']}-fold speaker-independent CV",
        "",
        f"{'Configuration':<16}{'Accuracy (%)':<18}{'AUC':<14}{'PC-GITA accuracy':<20}PC-GITA AUC",
    ]
    for c in report.configs:
        m = summ[c]
        acc = f"{_fmt(m['accuracy_mean'])} ± {_fmt(m['accuracy_std'])}"
        au = f"{_fmt(m['auc_mean'])} ± {_fmt(m['auc_std'])}"
        ref = REFERENCE_TARGETS.get(c)
        racc = f"{_fmt(ref[0][0])} ± {_fmt(ref[0][1])}" if ref else "-"
        rauc = f"{_fmt(ref[1][0])} ± {_fmt(ref[1][1])}" if ref else "-"
        lines.append(f"{c:<16}{acc:<18}{au:<14}{racc:<20}{rauc}")
    return "\n".join(lines) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def emit_report(report: EvaluationReport, out_dir) -> list[Path]:
    """Write ``results.csv`` (per-speaker scores), ``models.csv`` (per
    seed/split metrics), ``summary.csv``, ``summary.txt`` and
    ``report.json``. Identical reports give byte-identical files."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    summ = report.summary()
    files = {
        "results.csv": _csv_text(
            ["config", "representations", "seed", "split", "fold", "speaker_id", "label", "score"],
            [[r.config, " ".join(parse_config(r.config)), r.seed, r.split, r.fold, r.speaker_id,
              r.label, repr(r.score)] for r in report.rows],
        ),
        "models.csv": _csv_text(
            ["config", "seed", "split", "accuracy", "auc"],
            [[m.config, m.seed, m.split, repr(m.accuracy), repr(m.auc)] for m in report.results],
        ),
        "summary.csv": _csv_text(
            ["config", "accuracy_mean", "accuracy_std", "auc_mean", "auc_std"],
            [[c, *(repr(summ[c][k]) for k in ("accuracy_mean", "accuracy_std", "auc_mean", "auc_std"))]
             for c in report.configs],
        ),
        "summary.txt": format_summary(report),
        "report.json": json.dumps(
            {"settings": report.settings, "summary": summ,
             "reference_pc_gita": {c: {"accuracy": list(a), "auc": list(u)}
                                   for c, (a, u) in REFERENCE_TARGETS.items()}},
            indent=2, sort_keys=True) + "\n",
    }
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text, encoding="utf-8", newline="\n")
        paths.append(p)
    return paths


def load_report(out_dir) -> EvaluationReport:
    """Rebuild a report from the files written by :func:`emit_report`."""
    out = Path(out_dir)
    meta = json.loads((out / "report.json").read_text(encoding="utf-8"))
    with open(out / "results.csv", newline="", encoding="utf-8") as fh:
        rows = [ScoreRow(r["config"], int(r["seed"]), int(r["split"]), int(r["fold"]), r["speaker_id"],
                         int(r["label"]), float(r["score"])) for r in csv.DictReader(fh)]
    with open(out / "models.csv", newline="", encoding="utf-8") as fh:
        results = [ModelResult(r["config"], int(r["seed"]), int(r["split"]), float(r["accuracy"]),
                               float(r["auc"])) for r in csv.DictReader(fh)]
    configs = list(dict.fromkeys(m.config for m in results))
    return EvaluationReport(configs, rows, results, meta["settings"])
