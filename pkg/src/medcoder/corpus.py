"""Admission records, MIMIC-III-schema CSV ingestion and patient-grouped splits.

Tables are streamed with the stdlib ``csv`` module so that very large event
tables never have to be held in a dataframe. Only the columns listed in
``DEFAULT_SCHEMA`` are read; everything else in the files is ignored.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from collections import OrderedDict, defaultdict
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from medcoder.errors import IngestError

logger = logging.getLogger(__name__)

# Counts observed on the full MIMIC-III extract; logged for comparison only.
REFERENCE_FEATURE_COUNTS = {"lab": 753, "med": 1135, "bio": 363}

DEFAULT_SCHEMA = {
    "tables": {
        "ADMISSIONS": {
            "file": "ADMISSIONS.csv",
            "columns": {"admission_id": "HADM_ID", "patient_id": "SUBJECT_ID", "diagnosis": "DIAGNOSIS"},
        },
        "NOTEEVENTS": {
            "file": "NOTEEVENTS.csv",
            "columns": {"admission_id": "HADM_ID", "category": "CATEGORY", "text": "TEXT"},
        },
        "LABEVENTS": {
            "file": "LABEVENTS.csv",
            "columns": {"admission_id": "HADM_ID", "item_id": "ITEMID", "flag": "FLAG"},
        },
        "PRESCRIPTIONS": {
            "file": "PRESCRIPTIONS.csv",
            "columns": {"admission_id": "HADM_ID", "drug": "DRUG"},
        },
        "MICROBIOLOGYEVENTS": {
            "file": "MICROBIOLOGYEVENTS.csv",
            "columns": {"admission_id": "HADM_ID", "organism_id": "ORG_ITEMID", "interpretation": "INTERPRETATION"},
        },
        "CHARTEVENTS": {
            "file": "CHARTEVENTS.csv",
            "columns": {"admission_id": "HADM_ID", "item_id": "ITEMID", "value": "VALUENUM"},
        },
        "LABELS": {
            "file": "LABELS.csv",
            "columns": {"admission_id": "HADM_ID", "code": "ICD10"},
        },
    },
    "diagnosis_separator": ";",
    "require_note": True,
    "note_categories": None,
}

_ABNORMAL_FLAGS = {"abnormal", "abn", "a", "delta"}
_NORMAL_FLAGS = {"", "normal", "n"}
_POSITIVE = {"positive", "pos", "p"}
_NEGATIVE = {"negative", "neg", "n"}


@dataclass(frozen=True)
class Code:
    code: str
    description: str
    synonyms: tuple[str, ...] = ()


@dataclass(frozen=True)
class CodeCatalog:
    """Ordered target codes; position in ``codes`` is the label-vector index."""

    codes: tuple[Code, ...]

    def __post_init__(self):
        ids = [c.code for c in self.codes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate code ids in catalog")
        if not ids:
            raise ValueError("catalog is empty")
        for c in self.codes:
            if not c.description.strip():
                raise ValueError(f"code {c.code} has no description")

    @property
    def C(self) -> int:
        return len(self.codes)

    @property
    def ids(self) -> list[str]:
        return [c.code for c in self.codes]

    def index(self, code: str) -> int:
        return self.ids.index(code)

    def __getitem__(self, code: str) -> Code:
        for c in self.codes:
            if c.code == code:
                return c
        raise KeyError(code)

    def subset(self, code_ids: Sequence[str]) -> "CodeCatalog":
        return CodeCatalog(tuple(self[c] for c in code_ids))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "codes": [{"code": c.code, "description": c.description, "synonyms": list(c.synonyms)} for c in self.codes],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CodeCatalog":
        return cls(tuple(Code(d["code"], d["description"], tuple(d.get("synonyms", ()))) for d in doc["codes"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "CodeCatalog":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls, subset: Sequence[str] | None = None) -> "CodeCatalog":
        """The bundled 32-code catalog, optionally restricted to ``subset``."""
        text = resources.files("medcoder.data").joinpath("icd10_catalog.json").read_text(encoding="utf-8")
        catalog = cls.from_dict(json.loads(text))
        return catalog.subset(subset) if subset is not None else catalog


@dataclass(frozen=True)
class AdmissionRecord:
    admission_id: str
    patient_id: str
    notes: tuple[str, ...]
    diagnosis_phrases: tuple[str, ...]
    lab_events: tuple[tuple[str, str], ...]
    chart_events: tuple[tuple[str, float], ...]
    medications: tuple[str, ...]
    micro_events: tuple[tuple[str, str], ...]
    labels: tuple[int, ...]

    @property
    def has_tabular(self) -> bool:
        return bool(self.lab_events or self.chart_events or self.medications or self.micro_events)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdmissionRecord":
        return cls(
            admission_id=d["admission_id"],
            patient_id=d["patient_id"],
            notes=tuple(d["notes"]),
            diagnosis_phrases=tuple(d["diagnosis_phrases"]),
            lab_events=tuple((str(a), str(b)) for a, b in d["lab_events"]),
            chart_events=tuple((str(a), float(b)) for a, b in d["chart_events"]),
            medications=tuple(d["medications"]),
            micro_events=tuple((str(a), str(b)) for a, b in d["micro_events"]),
            labels=tuple(int(x) for x in d["labels"]),
        )


def label_matrix(records: Sequence[AdmissionRecord]) -> np.ndarray:
    return np.array([r.labels for r in records], dtype=np.int64).reshape(len(records), -1)


def save_records(records: Iterable[AdmissionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_records(path: str | Path) -> list[AdmissionRecord]:
    with open(path, encoding="utf-8") as fh:
        return [AdmissionRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass
class IngestSummary:
    admissions_rows: int = 0
    admissions_loaded: int = 0
    admissions_dropped: int = 0
    malformed_rows: dict = field(default_factory=dict)
    orphan_rows: dict = field(default_factory=dict)
    unknown_label_codes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _merge_schema(schema: dict | None) -> dict:
    merged = copy.deepcopy(DEFAULT_SCHEMA)
    if not schema:
        return merged
    for key, value in schema.items():
        if key == "tables":
            for table, spec in value.items():
                target = merged["tables"].setdefault(table, {"columns": {}})
                if "file" in spec:
                    target["file"] = spec["file"]
                target["columns"].update(spec.get("columns", {}))
        else:
            merged[key] = value
    return merged


def _read_table(directory: Path, table: str, schema: dict):
    """Yield (line_number, {logical: value}) rows; raise if file or columns are missing."""
    spec = schema["tables"][table]
    path = directory / spec["file"]
    if not path.is_file():
        raise IngestError(f"missing required table {table}: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [col for col in spec["columns"].values() if col not in header]
        if missing:
            raise IngestError(f"{spec['file']} lacks required columns {missing}")
        for n, row in enumerate(reader, start=2):
            yield n, {logical: row.get(col) for logical, col in spec["columns"].items()}


def load_tables(directory: str | Path, catalog: CodeCatalog, schema: dict | None = None,
                return_summary: bool = False):
    """Build one :class:`AdmissionRecord` per usable ADMISSIONS row.

    Rows in the event tables that reference unknown admissions are dropped
    and counted, as are malformed rows. Labels come from the LABELS sidecar
    and are restricted to ``catalog``.
    """
    directory = Path(directory)
    schema = _merge_schema(schema)
    summary = IngestSummary()
    sep = schema["diagnosis_separator"]

    def bad(table):
        summary.malformed_rows[table] = summary.malformed_rows.get(table, 0) + 1

    def orphan(table):
        summary.orphan_rows[table] = summary.orphan_rows.get(table, 0) + 1

    admissions: "OrderedDict[str, dict]" = OrderedDict()
    for _, row in _read_table(directory, "ADMISSIONS", schema):
        summary.admissions_rows += 1
        hadm, subj = (row["admission_id"] or "").strip(), (row["patient_id"] or "").strip()
        if not hadm or not subj or hadm in admissions:
            bad("ADMISSIONS")
            continue
        phrases = [p.strip() for p in (row["diagnosis"] or "").split(sep) if p.strip()]
        admissions[hadm] = {
            "patient_id": subj, "phrases": phrases, "notes": [], "labs": [], "chart": [],
            "meds": [], "micro": [], "labels": set(),
        }

    categories = schema.get("note_categories")
    categories = {c.lower() for c in categories} if categories else None
    for _, row in _read_table(directory, "NOTEEVENTS", schema):
        hadm = (row["admission_id"] or "").strip()
        if row["text"] is None:
            bad("NOTEEVENTS")
            continue
        if hadm not in admissions:
            orphan("NOTEEVENTS")
            continue
        if categories is not None and (row["category"] or "").strip().lower() not in categories:
            continue
        admissions[hadm]["notes"].append(row["text"])

    for _, row in _read_table(directory, "LABEVENTS", schema):
        hadm, item = (row["admission_id"] or "").strip(), (row["item_id"] or "").strip()
        flag = (row["flag"] or "").strip().lower()
        if not item or flag not in _ABNORMAL_FLAGS | _NORMAL_FLAGS:
            bad("LABEVENTS")
            continue
        if hadm not in admissions:
            orphan("LABEVENTS")
            continue
        admissions[hadm]["labs"].append((item, "abnormal" if flag in _ABNORMAL_FLAGS else "normal"))

    for _, row in _read_table(directory, "CHARTEVENTS", schema):
        hadm, item = (row["admission_id"] or "").strip(), (row["item_id"] or "").strip()
        try:
            value = float(row["value"])
        except (TypeError, ValueError):
            bad("CHARTEVENTS")
            continue
        if not item or not math.isfinite(value):
            bad("CHARTEVENTS")
            continue
        if hadm not in admissions:
            orphan("CHARTEVENTS")
            continue
        admissions[hadm]["chart"].append((item, value))

    for _, row in _read_table(directory, "PRESCRIPTIONS", schema):
        hadm, drug = (row["admission_id"] or "").strip(), (row["drug"] or "").strip()
        if not drug:
            bad("PRESCRIPTIONS")
            continue
        if hadm not in admissions:
            orphan("PRESCRIPTIONS")
            continue
        admissions[hadm]["meds"].append(drug)

    for _, row in _read_table(directory, "MICROBIOLOGYEVENTS", schema):
        hadm, org = (row["admission_id"] or "").strip(), (row["organism_id"] or "").strip()
        interp = (row["interpretation"] or "").strip().lower()
        if not org or interp not in _POSITIVE | _NEGATIVE:
            bad("MICROBIOLOGYEVENTS")
            continue
        if hadm not in admissions:
            orphan("MICROBIOLOGYEVENTS")
            continue
        admissions[hadm]["micro"].append((org, "positive" if interp in _POSITIVE else "negative"))

    known = set(catalog.ids)
    for _, row in _read_table(directory, "LABELS", schema):
        hadm, code = (row["admission_id"] or "").strip(), (row["code"] or "").strip()
        if not code:
            bad("LABELS")
            continue
        if hadm not in admissions:
            orphan("LABELS")
            continue
        if code not in known:
            summary.unknown_label_codes += 1
            continue
        admissions[hadm]["labels"].add(code)

    records = []
    for hadm, a in admissions.items():
        if schema.get("require_note", True) and not a["notes"]:
            continue
        records.append(AdmissionRecord(
            admission_id=hadm,
            patient_id=a["patient_id"],
            notes=tuple(a["notes"]),
            diagnosis_phrases=tuple(a["phrases"]),
            lab_events=tuple(a["labs"]),
            chart_events=tuple(a["chart"]),
            medications=tuple(a["meds"]),
            micro_events=tuple(a["micro"]),
            labels=tuple(int(c in a["labels"]) for c in catalog.ids),
        ))
    summary.admissions_loaded = len(records)
    summary.admissions_dropped = summary.admissions_rows - len(records)
    for table, n in summary.orphan_rows.items():
        logger.info("dropped %d %s rows referencing unknown admissions", n, table)
    for table, n in summary.malformed_rows.items():
        logger.warning("skipped %d malformed %s rows", n, table)
    if not records:
        raise IngestError(f"no admissions loaded from {directory}")
    return (records, summary) if return_summary else records


def write_tables(records: Sequence[AdmissionRecord], directory: str | Path, catalog: CodeCatalog,
                 schema: dict | None = None) -> None:
    """Write records as the CSV tables that :func:`load_tables` reads."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    schema = _merge_schema(schema)
    sep = schema["diagnosis_separator"]

    def writer(table):
        spec = schema["tables"][table]
        fh = open(directory / spec["file"], "w", newline="", encoding="utf-8")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(spec["columns"].values()))
        return fh, w

    handles = {t: writer(t) for t in schema["tables"]}
    try:
        for r in records:
            handles["ADMISSIONS"][1].writerow([r.admission_id, r.patient_id, sep.join(r.diagnosis_phrases)])
            for i, note in enumerate(r.notes):
                handles["NOTEEVENTS"][1].writerow(
                    [r.admission_id, "Discharge summary" if i == 0 else "Nursing", note])
            for item, flag in r.lab_events:
                handles["LABEVENTS"][1].writerow([r.admission_id, item, "abnormal" if flag == "abnormal" else ""])
            for item, value in r.chart_events:
                handles["CHARTEVENTS"][1].writerow([r.admission_id, item, repr(float(value))])
            for drug in r.medications:
                handles["PRESCRIPTIONS"][1].writerow([r.admission_id, drug])
            for org, result in r.micro_events:
                handles["MICROBIOLOGYEVENTS"][1].writerow([r.admission_id, org, result])
            for code, bit in zip(catalog.ids, r.labels):
                if bit:
                    handles["LABELS"][1].writerow([r.admission_id, code])
    finally:
        for fh, _ in handles.values():
            fh.close()


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    seed: int

    def to_dict(self) -> dict:
        return {"schema_version": 1, "seed": self.seed, "train": list(self.train),
                "validation": list(self.validation), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(tuple(d["train"]), tuple(d["validation"]), tuple(d["test"]), int(d["seed"]))

    def select(self, records: Sequence[AdmissionRecord], part: str) -> list[AdmissionRecord]:
        wanted = set(getattr(self, part))
        return [r for r in records if r.admission_id in wanted]


def split_by_patient(records: Sequence[AdmissionRecord], ratios=(0.7, 0.1, 0.2), seed: int = 0) -> DatasetSplit:
    """Shuffle patients and hand each to the split furthest below its admission target.

    All admissions of a patient land in the same split.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_patient: dict[str, list[str]] = defaultdict(list)
    for r in records:
        by_patient[r.patient_id].append(r.admission_id)
    patients = sorted(by_patient)
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    targets = [r * len(records) for r in ratios]
    parts: list[list[str]] = [[], [], []]
    for idx in order:
        adms = by_patient[patients[idx]]
        deficits = [t - len(p) for t, p in zip(targets, parts)]
        parts[int(np.argmax(deficits))].extend(adms)
    return DatasetSplit(tuple(parts[0]), tuple(parts[1]), tuple(parts[2]), seed)
