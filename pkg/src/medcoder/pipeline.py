"""Run configuration and the pipeline stages behind the command line.

Every stage reads inputs from, and writes outputs to, fixed subdirectories of
``output_dir``:

============== ==============================================================
stage          writes
============== ==============================================================
gen-synthetic  ``corpus/``      CSV tables, ``planted.json``, ``generator.json``
ingest         ``data/``        ``records.jsonl``, ``split.json``, ``catalog.json``
train-text     ``text/``        checkpoint, vocabulary, TF-IDF terms, epoch log
train-ranker   ``ranker/``      checkpoint, synonym corpus with negatives, log
train-tabular  ``tabular/``     one JSON tree model per tabular predictor
tune-ensemble  ``ensemble/``    ``ensemble.json``, ``validation.json``
predict        ``predictions/`` ``<split>.jsonl``
explain        ``evidence/``    ``evidence.json``, optional ``jaccard.json``
evaluate       ``reports/``     ``metrics.json``, ``metrics.txt``
report         ``reports/``     ``summary.txt``, optional ``per_code.png``
============== ==============================================================
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from medcoder.corpus import (CodeCatalog, DatasetSplit, label_matrix, load_records, load_tables,
                             save_records, split_by_patient, write_tables)
from medcoder.ensemble import (EnsembleModel, EnsembleWeights, ModalityPrediction, decide, fuse,
                               micro_f1_at, tune_thresholds, tune_weights)
from medcoder.errors import DependencyError, UsageError
from medcoder.explain import (SurrogateConfig, evidence_entry, explain_tabular, explain_text,
                              score_annotations, write_report, _float64_net)
from medcoder.metrics import MetricReport
from medcoder.ranker import (DiagnosisRanker, RankerConfig, SynonymCorpus, build_synonym_corpus, rank_codes,
                             train_ranker)
from medcoder.synthetic import GeneratorConfig, default_generator_config, generate_synthetic
from medcoder.tabular import TreeEnsembleModel, TabularConfig, BLOCKS, train_tabular, vectorize
from medcoder.text import combine_notes, extract_guideline_keywords, load_guidelines, load_terms, save_terms
from medcoder.textcnn import TextModel, TextModelConfig, train_text_model, write_log

logger = logging.getLogger(__name__)

COMMANDS = ("gen-synthetic", "ingest", "train-text", "train-ranker", "train-tabular", "tune-ensemble",
            "predict", "explain", "evaluate", "report")
SCHEMA_VERSION = 1
TEXT, RANKER = "text", "ranker"


@dataclass
class RunConfig:
    """Everything one run needs. ``seed`` overrides every module seed.

    Relative paths are resolved against the directory of the config file.
    """

    output_dir: str = "run"
    seed: int = 0
    corpus_dir: str | None = None
    catalog: str | None = None
    codes: list[str] | None = None
    generator: dict | None = None
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    ingest_schema: dict | None = None
    guidelines_dir: str | None = None
    synonyms: str | None = None
    text: dict = field(default_factory=dict)
    ranker: dict = field(default_factory=dict)
    tabular: dict = field(default_factory=lambda: {"tabular": {}})
    ensemble: dict = field(default_factory=dict)
    explain: dict = field(default_factory=dict)
    annotations: str | None = None
    predict_split: str = "test"
    plot: bool = False
    schema_version: int = SCHEMA_VERSION

    PATH_FIELDS = ("corpus_dir", "catalog", "guidelines_dir", "synonyms", "annotations")

    def __post_init__(self):
        self.split_ratios = tuple(self.split_ratios)
        if self.predict_split not in ("train", "validation", "test"):
            raise UsageError(f"predict_split must be train, validation or test, got {self.predict_split!r}")
        if not self.tabular:
            raise UsageError("tabular needs at least one predictor entry")
        for name, spec in self.tabular.items():
            if name in (TEXT, RANKER):
                raise UsageError(f"tabular predictor name {name!r} is reserved")
            TabularConfig.from_dict(spec)
        self.text_config
        self.ranker_config
        self.surrogate_config

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    @property
    def text_config(self) -> TextModelConfig:
        return TextModelConfig.from_dict({**self.text, "seed": self.seed})

    @property
    def ranker_config(self) -> RankerConfig:
        return RankerConfig.from_dict({**self.ranker, "seed": self.seed})

    @property
    def surrogate_config(self) -> SurrogateConfig:
        return SurrogateConfig(**{**self.explain.get("surrogate", {}), "seed": self.seed})

    def tabular_configs(self) -> dict[str, TabularConfig]:
        return {name: TabularConfig.from_dict(spec) for name, spec in self.tabular.items()}

    @property
    def predictors(self) -> list[str]:
        return list(self.ensemble.get("predictors", [TEXT, RANKER, *self.tabular]))

    @property
    def generator_config(self) -> GeneratorConfig:
        if self.generator is None:
            return default_generator_config()
        return GeneratorConfig.from_dict(copy.deepcopy(self.generator))

    def resolve_catalog(self) -> CodeCatalog:
        base = CodeCatalog.load(self.catalog) if self.catalog else CodeCatalog.default()
        codes = self.codes or [c.code for c in self.generator_config.codes]
        missing = [c for c in codes if c not in base.ids]
        if missing:
            raise DependencyError(f"codes {missing} are not in the catalog {self.catalog or '(bundled)'}")
        return base.subset(codes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "RunConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise UsageError(f"unknown run-config keys {unknown}")
        d = dict(d)
        if base_dir is not None:
            for key in cls.PATH_FIELDS + ("output_dir",):
                if d.get(key):
                    p = Path(d[key])
                    d[key] = str(p if p.is_absolute() else Path(base_dir) / p)
        try:
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid run config: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc, base_dir=path.parent)

    def check_paths(self) -> None:
        for key in self.PATH_FIELDS:
            value = getattr(self, key)
            if value and not Path(value).exists():
                raise DependencyError(f"{key} path does not exist: {value}")


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DependencyError(f"missing {path}; run `medcoder {producer}` first")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# stage inputs


def load_dataset(cfg: RunConfig):
    data = cfg.stage_dir("data")
    records = load_records(_require(data / "records.jsonl", "ingest"))
    split = DatasetSplit.from_dict(json.loads(_require(data / "split.json", "ingest").read_text()))
    catalog = CodeCatalog.load(_require(data / "catalog.json", "ingest"))
    return records, split, catalog


def texts_of(records) -> list[str]:
    return [combine_notes(r.notes) for r in records]


# stages


def gen_synthetic(cfg: RunConfig) -> dict:
    gen = cfg.generator_config
    records, catalog, planted = generate_synthetic(gen, seed=cfg.seed)
    out = cfg.stage_dir("corpus")
    write_tables(records, out, catalog, cfg.ingest_schema)
    _write_json(out / "planted.json", planted)
    _write_json(out / "generator.json", gen.to_dict())
    logger.info("wrote %d synthetic admissions to %s", len(records), out)
    return {"admissions": len(records)}


def ingest(cfg: RunConfig) -> dict:
    corpus = Path(cfg.corpus_dir) if cfg.corpus_dir else cfg.stage_dir("corpus")
    if not corpus.is_dir():
        raise DependencyError(f"corpus directory {corpus} does not exist; set corpus_dir or run gen-synthetic")
    catalog = cfg.resolve_catalog()
    records, summary = load_tables(corpus, catalog, cfg.ingest_schema, return_summary=True)
    try:
        split = split_by_patient(records, cfg.split_ratios, cfg.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = cfg.stage_dir("data")
    out.mkdir(parents=True, exist_ok=True)
    save_records(records, out / "records.jsonl")
    _write_json(out / "split.json", split.to_dict())
    catalog.save(out / "catalog.json")
    _write_json(out / "ingest_summary.json", summary.to_dict())
    logger.info("ingested %d admissions: %d train / %d validation / %d test", len(records),
                len(split.train), len(split.validation), len(split.test))
    return summary.to_dict()


def train_text(cfg: RunConfig) -> dict:
    records, split, catalog = load_dataset(cfg)
    tc = cfg.text_config
    train, val = split.select(records, "train"), split.select(records, "validation")
    terms = None
    if tc.tfidf_side_channel:
        guidelines = load_guidelines(catalog.ids, cfg.guidelines_dir)
        terms = extract_guideline_keywords(guidelines, tc.guideline_top_k, code_order=catalog.ids)
        if not terms:
            raise DependencyError("TF-IDF side channel enabled but no guideline keywords were found")
    model, log = train_text_model(tc, catalog.ids, texts_of(train), label_matrix(train),
                                  texts_of(val) or None, label_matrix(val) if val else None, terms=terms)
    out = cfg.stage_dir("text")
    model.save(out)
    if terms:
        save_terms(terms, out / "terms.txt")
    write_log(log, out / "train_log.jsonl")
    return {"epochs": len(log), "terms": len(terms or [])}


def synonym_corpus(cfg: RunConfig, catalog: CodeCatalog) -> SynonymCorpus:
    """Training strings per code: catalog synonyms plus the bundled fixture, or a configured file."""
    if cfg.synonyms:
        source = SynonymCorpus.load(cfg.synonyms)
        positives = {c: source.positives.get(c, []) for c in catalog.ids}
    else:
        fixture = SynonymCorpus.bundled()
        positives = {c.code: list(dict.fromkeys(list(c.synonyms) + fixture.positives.get(c.code, [])))
                     for c in catalog.codes}
    empty = [c for c, p in positives.items() if not p]
    if empty:
        raise DependencyError(f"no synonym strings for codes {empty}")
    return build_synonym_corpus({c.code: c.description for c in catalog.codes}, positives, cfg.ranker_config)


def train_ranker_stage(cfg: RunConfig) -> dict:
    _, _, catalog = load_dataset(cfg)
    corpus = synonym_corpus(cfg, catalog)
    model, log = train_ranker(cfg.ranker_config, corpus)
    out = cfg.stage_dir("ranker")
    model.save(out)
    corpus.save(out / "synonyms.json")
    write_log(log, out / "train_log.jsonl")
    return {"epochs": len(log), "val_top1": max(e["val_top1"] for e in log)}


def train_tabular_stage(cfg: RunConfig) -> dict:
    records, split, catalog = load_dataset(cfg)
    train = split.select(records, "train")
    out = cfg.stage_dir("tabular")
    out.mkdir(parents=True, exist_ok=True)
    widths = {}
    for name, tc in cfg.tabular_configs().items():
        model = train_tabular(train, catalog.ids, tc)
        model.save(out / f"{name}.json")
        widths[name] = model.schema.width
    return {"features": widths}


def load_text_model(cfg: RunConfig) -> TextModel:
    _require(cfg.stage_dir("text") / "text_model.ckpt", "train-text")
    return TextModel.load(cfg.stage_dir("text"))


def modality_predictions(cfg: RunConfig, records, catalog: CodeCatalog, strict: bool = False):
    """One :class:`ModalityPrediction` per predictor whose checkpoint exists.

    Missing text checkpoint is an error. Other missing checkpoints raise when
    ``strict`` and are otherwise skipped with a log line.
    """
    preds = []
    for name in cfg.predictors:
        if name == TEXT:
            model = load_text_model(cfg)
            if model.codes != catalog.ids:
                raise DependencyError(f"text model codes {model.codes} do not match the catalog {catalog.ids}")
            preds.append(ModalityPrediction(TEXT, model.predict_proba(texts_of(records))))
            continue
        if name == RANKER:
            path, producer = cfg.stage_dir("ranker") / "ranker.ckpt", "train-ranker"
        elif name in cfg.tabular:
            path, producer = cfg.stage_dir("tabular") / f"{name}.json", "train-tabular"
        else:
            raise UsageError(f"unknown predictor {name!r}")
        if not path.exists():
            if strict:
                _require(path, producer)
            logger.warning("predictor %s has no checkpoint at %s; its weight goes to the %s fallback",
                           name, path, TEXT)
            continue
        if name == RANKER:
            ranker = DiagnosisRanker.load(cfg.stage_dir("ranker"))
            if ranker.codes != catalog.ids:
                raise DependencyError(f"ranker codes {ranker.codes} do not match the catalog {catalog.ids}")
            probs = np.full((len(records), catalog.C), 0.0)
            available = np.zeros(len(records), dtype=bool)
            for i, r in enumerate(records):
                try:
                    probs[i] = rank_codes(ranker, r.diagnosis_phrases)
                    available[i] = True
                except ValueError:
                    pass
            preds.append(ModalityPrediction(RANKER, probs, available))
        else:
            tab = TreeEnsembleModel.load(path)
            if tab.codes != catalog.ids:
                raise DependencyError(f"tabular model {name} codes {tab.codes} do not match the catalog")
            available = np.array([r.has_tabular for r in records], dtype=bool)
            preds.append(ModalityPrediction(name, tab.predict_records(records), available))
    if TEXT not in [p.predictor for p in preds]:
        raise UsageError(f"predictor list must include the {TEXT!r} fallback")
    return preds


def tune_ensemble(cfg: RunConfig) -> dict:
    records, split, catalog = load_dataset(cfg)
    val = split.select(records, "validation")
    if not val:
        raise UsageError("validation split is empty; cannot tune ensemble weights")
    preds = modality_predictions(cfg, val, catalog, strict=True)
    Y = label_matrix(val)
    step = float(cfg.ensemble.get("grid_step", 0.05))
    weights = tune_weights(preds, Y, TEXT, step)
    fused = fuse(preds, weights)
    thresholds = tune_thresholds(fused, Y) if cfg.ensemble.get("tune_thresholds", True) else None
    model = EnsembleModel(weights, catalog.ids, [] if thresholds is None else thresholds.tolist(), step)
    out = cfg.stage_dir("ensemble")
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "ensemble.json")
    corners = {}
    for p in preds:
        corner = EnsembleWeights(weights.predictors,
                                 tuple(1.0 if q == p.predictor else 0.0 for q in weights.predictors), TEXT)
        corners[p.predictor] = micro_f1_at(fuse(preds, corner), Y)
    summary = {"schema_version": SCHEMA_VERSION, "weights": dict(zip(weights.predictors, weights.alphas)),
               "ensemble_micro_f1": micro_f1_at(fused, Y),
               "tuned_threshold_micro_f1": micro_f1_at(fused, Y, np.asarray(model.thresholds)),
               "modality_micro_f1": corners, "n_validation": len(val)}
    _write_json(out / "validation.json", summary)
    return summary


def predict(cfg: RunConfig) -> dict:
    records, split, catalog = load_dataset(cfg)
    ens_path = _require(cfg.stage_dir("ensemble") / "ensemble.json", "tune-ensemble")
    ensemble = EnsembleModel.load(ens_path)
    if ensemble.codes != catalog.ids:
        raise DependencyError(f"ensemble codes {ensemble.codes} do not match the catalog {catalog.ids}")
    part = split.select(records, cfg.predict_split)
    preds = modality_predictions(cfg, part, catalog)
    present = {p.predictor for p in preds}
    for name in ensemble.weights.predictors:
        if name not in present:
            logger.warning("reallocating weight %.2f of missing predictor %s to %s",
                           ensemble.weights[name], name, TEXT)
    fused = fuse(preds, ensemble.weights)
    decisions = decide(fused, np.asarray(ensemble.thresholds))
    by_id = {p.predictor: p for p in preds}
    out = cfg.stage_dir("predictions")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{cfg.predict_split}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for i, r in enumerate(part):
            available = {name: bool(name in by_id and by_id[name].available[i]) for name in ensemble.weights.predictors}
            line = {"schema_version": SCHEMA_VERSION, "admission_id": r.admission_id,
                    "probabilities": dict(zip(catalog.ids, fused[i].tolist())),
                    "decision": [c for c, d in zip(catalog.ids, decisions[i]) if d],
                    "predictors": ensemble.weights.effective(available)}
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    return {"admissions": len(part), "reallocated": sorted(set(ensemble.weights.predictors) - present)}


def read_predictions(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def explain(cfg: RunConfig) -> dict:
    records, _, catalog = load_dataset(cfg)
    pred_path = _require(cfg.stage_dir("predictions") / f"{cfg.predict_split}.jsonl", "predict")
    predictions = read_predictions(pred_path)
    text_model = load_text_model(cfg)
    net = _float64_net(text_model.net)
    tabs = {name: TreeEnsembleModel.load(cfg.stage_dir("tabular") / f"{name}.json")
            for name in cfg.tabular if (cfg.stage_dir("tabular") / f"{name}.json").exists()}
    by_id = {r.admission_id: r for r in records}
    top_k = int(cfg.explain.get("top_k_phrases", 3))
    floor = float(cfg.explain.get("relative_floor", 0.1))
    surrogate = cfg.surrogate_config
    limit = cfg.explain.get("max_admissions")
    entries = []
    for line in predictions[:limit]:
        r = by_id.get(line["admission_id"])
        if r is None:
            raise DependencyError(f"prediction for unknown admission {line['admission_id']}; re-run ingest/predict")
        text = combine_notes(r.notes)
        for code in line["decision"]:
            j = catalog.index(code)
            phrases = explain_text(text_model, text, j, top_k, floor, net=net)
            features = []
            for tab in tabs.values():
                x = vectorize(r, tab.schema)
                features += explain_tabular(lambda X, t=tab, j=j: t.predict_proba(X)[:, j], x, tab.schema, surrogate)
            features.sort(key=lambda f: -abs(f.weight))
            entries.append(evidence_entry(r.admission_id, code, line["probabilities"][code], phrases, features))
    out = cfg.stage_dir("evidence")
    out.mkdir(parents=True, exist_ok=True)
    write_report(entries, out / "evidence.json")
    result = {"entries": len(entries)}
    if cfg.annotations:
        annotations = json.loads(Path(cfg.annotations).read_text(encoding="utf-8"))
        scores = score_annotations(entries, annotations, float(cfg.explain.get("overlap_threshold", 0.5)))
        _write_json(out / "jaccard.json", scores)
        result.update(scores)
    return result


def evaluate(cfg: RunConfig) -> MetricReport:
    records, split, catalog = load_dataset(cfg)
    pred_path = _require(cfg.stage_dir("predictions") / f"{cfg.predict_split}.jsonl", "predict")
    predictions = read_predictions(pred_path)
    by_id = {r.admission_id: r for r in records}
    widths = {len(p["probabilities"]) for p in predictions}
    if widths != {catalog.C} or any(set(p["probabilities"]) != set(catalog.ids) for p in predictions):
        raise DependencyError(f"prediction label width {sorted(widths)} does not match the catalog "
                              f"{cfg.stage_dir('data') / 'catalog.json'} with {catalog.C} codes")
    P = np.array([[p["probabilities"][c] for c in catalog.ids] for p in predictions])
    D = np.array([[c in p["decision"] for c in catalog.ids] for p in predictions])
    Y = np.array([by_id[p["admission_id"]].labels for p in predictions])
    if Y.shape[1] != catalog.C:
        raise DependencyError(f"record label width {Y.shape[1]} does not match the catalog with {catalog.C} codes")
    train_pos = label_matrix(split.select(records, "train")).sum(axis=0)
    report = MetricReport.compute(P, D, Y, catalog.ids, train_pos)
    out = cfg.stage_dir("reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json(), encoding="utf-8")
    (out / "metrics.txt").write_text(report.table(), encoding="utf-8")
    return report


def report(cfg: RunConfig) -> dict:
    out = cfg.stage_dir("reports")
    metrics = MetricReport.from_json(_require(out / "metrics.json", "evaluate").read_text(encoding="utf-8"))
    lines = ["Per-code results (codes by training count, descending)", "", metrics.table()]
    ens = cfg.stage_dir("ensemble") / "validation.json"
    if ens.exists():
        v = json.loads(ens.read_text(encoding="utf-8"))
        lines += ["Ensemble weights: " + ", ".join(f"{k}={a:.2f}" for k, a in sorted(v["weights"].items())),
                  "Validation micro-F1: ensemble {:.4f}; ".format(v["ensemble_micro_f1"])
                  + ", ".join(f"{k} {s:.4f}" for k, s in sorted(v["modality_micro_f1"].items())), ""]
    jac = cfg.stage_dir("evidence") / "jaccard.json"
    if jac.exists():
        j = json.loads(jac.read_text(encoding="utf-8"))
        lines += [f"Evidence Jaccard over {j['n']} annotations: text {j['text_jaccard']:.4f}, "
                  f"tabular {j['tabular_jaccard']:.4f}", ""]
    (out / "summary.txt").write_text("\n".join(lines), encoding="utf-8")
    result = {"summary": str(out / "summary.txt")}
    if cfg.plot:
        result["plot"] = str(plot_per_code(metrics, out / "per_code.png"))
    return result


def plot_per_code(metrics: MetricReport, path: Path) -> Path:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise DependencyError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    order = sorted(range(len(metrics.codes)), key=lambda j: (-(metrics.train_positives or [0] * len(metrics.codes))[j], j))
    x = np.arange(len(order))
    fig, ax = plt.subplots(figsize=(max(6, 0.35 * len(order)), 4))
    ax.bar(x - 0.2, [metrics.per_code_auc[j] or 0.0 for j in order], 0.4, label="AUC")
    ax.bar(x + 0.2, [metrics.per_code_f1[j] for j in order], 0.4, label="F1")
    ax.set_xticks(x, [metrics.codes[j] for j in order], rotation=90)
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


STAGES = {
    "gen-synthetic": gen_synthetic,
    "ingest": ingest,
    "train-text": train_text,
    "train-ranker": train_ranker_stage,
    "train-tabular": train_tabular_stage,
    "tune-ensemble": tune_ensemble,
    "predict": predict,
    "explain": explain,
    "evaluate": evaluate,
    "report": report,
}


def run_pipeline(cfg: RunConfig, command: str):
    if command not in STAGES:
        raise UsageError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    cfg.check_paths()
    return STAGES[command](cfg)


def run_all(cfg: RunConfig, commands: Sequence[str] = COMMANDS, skip: Sequence[str] = ()):
    """Run stages in order; returns each stage's result keyed by command."""
    return {c: run_pipeline(cfg, c) for c in commands if c not in skip}
