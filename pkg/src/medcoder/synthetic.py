"""Schema-faithful synthetic admissions with planted, known signal.

Every positive code plants its keyword phrases in the notes, one of its
synonyms in the diagnosis list (with probability ``p_diag``) and its
informative tabular features (each with probability ``p_signal``).
Informative features are otherwise drawn from the same background process
for every admission, so with ``p_signal = 0`` they carry no label signal.

Feature keys use the ``<block>:<id>`` form of :mod:`medcoder.tabular`,
e.g. ``lab:50931`` or ``med:Insulin``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from medcoder.corpus import AdmissionRecord, CodeCatalog
from medcoder.text import raw_tokens

BACKGROUND_WORDS = """
patient admitted presented noted reports denies stable overnight today morning evening
afebrile alert oriented comfortable ambulating tolerating diet plan continue monitor follow
review discussed family team nursing physician clinic discharge home rehab transferred
floor unit bed rest mild moderate mild intermittent resolved improving unchanged baseline
exam normal soft nontender abdomen lungs clear bilaterally auscultation sounds regular rhythm
extremities warm skin intact neuro grossly nonfocal pupils equal reactive
history social lives alone wife daughter son occasional alcohol denies drugs retired
medications reviewed allergies known started held resumed adjusted dose daily twice
imaging xray ct scan ultrasound unremarkable findings consistent labs drawn pending
sodium potassium chloride bicarbonate calcium magnesium phosphate albumin
pain controlled oral analgesia sleeping walking appetite fair good poor nausea vomiting
cough fever chills headache dizziness weakness fatigue swelling legs back shoulder knee
vitals checked oxygen saturation room air nasal cannula ordered consulted surgery orthopedics
""".split()

DEFAULT_CODES = [
    {"code": "I10", "keywords": ["essential hypertension"],
     "features": ["lab:50983", "med:Atenolol"]},
    {"code": "I50.9", "keywords": ["congestive heart failure"],
     "features": ["lab:51003", "med:Furosemide"]},
    {"code": "N17.9", "keywords": ["acute kidney injury"],
     "features": ["lab:51006", "med:Sodium Bicarbonate"]},
    {"code": "E11.9", "keywords": ["diabetes on metformin"],
     "features": ["lab:50931", "med:Insulin"]},
    {"code": "D64.9", "keywords": ["chronic anemia"],
     "features": ["lab:51221", "med:Ferrous Sulfate"]},
]

BACKGROUND_DRUGS = [
    "Acetaminophen", "Heparin", "Docusate Sodium", "Senna", "Pantoprazole", "Ondansetron",
    "Potassium Chloride", "Magnesium Sulfate", "Sodium Chloride 0.9% Flush", "Vancomycin",
    "Metoprolol", "Aspirin", "Atorvastatin", "Lorazepam", "Morphine Sulfate", "Oxycodone",
    "Famotidine", "Bisacodyl", "Ceftriaxone", "Albuterol", "Dextrose 50%", "Lisinopril",
    "Warfarin", "Levothyroxine", "Simvastatin", "Haloperidol", "Zolpidem", "Tramadol",
]
CHART_MEASURES = {"heart_rate": (60.0, 100.0), "sbp": (90.0, 120.0), "dbp": (60.0, 80.0), "bmi": (18.5, 25.0)}


@dataclass
class PlantedCode:
    code: str
    keywords: list[str]
    features: list[str] = field(default_factory=list)
    synonyms: list[str] = field(default_factory=list)
    prevalence: float = 0.3
    keyword_repeats: int = 1


@dataclass
class GeneratorConfig:
    codes: list[PlantedCode]
    n_admissions: int = 500
    patients_ratio: float = 0.8
    p_diag: float = 0.8
    p_signal: float = 0.95
    p_flip: float = 0.05
    min_codes: int = 1
    notes_per_admission: tuple[int, int] = (1, 2)
    sentences_per_note: tuple[int, int] = (4, 8)
    n_lab_tests: int = 40
    n_organisms: int = 8
    catalog: str | None = None

    def __post_init__(self):
        self.codes = [c if isinstance(c, PlantedCode) else PlantedCode(**c) for c in self.codes]
        self.notes_per_admission = tuple(self.notes_per_admission)
        self.sentences_per_note = tuple(self.sentences_per_note)
        if not self.codes:
            raise ValueError("generator config needs at least one code")
        if self.n_admissions <= 0:
            raise ValueError("n_admissions must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def resolve_catalog(self) -> CodeCatalog:
        base = CodeCatalog.load(self.catalog) if self.catalog else CodeCatalog.default()
        return base.subset([c.code for c in self.codes])


def default_generator_config(**overrides) -> GeneratorConfig:
    """Five planted codes with synonyms taken from the bundled ranker fixture."""
    from medcoder.ranker import SynonymCorpus

    fixture = SynonymCorpus.bundled()
    codes = []
    for spec in DEFAULT_CODES:
        codes.append(PlantedCode(synonyms=list(fixture.positives[spec["code"]]), **spec))
    return GeneratorConfig(codes=codes, **overrides)


def _sentence(rng: np.random.Generator, words: list[str]) -> list[str]:
    n = int(rng.integers(6, 15))
    out = [words[i] for i in rng.integers(0, len(words), size=n)]
    roll = rng.random()
    if roll < 0.15:
        out += ["hr", str(int(rng.integers(55, 120)))]
    elif roll < 0.3:
        out += ["bp", f"{int(rng.integers(95, 160))}/{int(rng.integers(55, 95))}"]
    return out


def _render(sentences: list[list[str]]) -> str:
    return " ".join(" ".join(s).capitalize() + "." for s in sentences)


def generate_synthetic(config: GeneratorConfig, seed: int = 0):
    """Return ``(records, catalog, planted)``; identical inputs give identical output."""
    rng = np.random.default_rng(seed)
    catalog = config.resolve_catalog()
    codes = config.codes
    C = len(codes)
    keyword_tokens = {t for c in codes for kw in c.keywords for t in raw_tokens(kw)}
    words = [w for w in dict.fromkeys(BACKGROUND_WORDS) if w not in keyword_tokens]

    informative = sorted({f for c in codes for f in c.features})
    lab_pool = [str(50800 + i) for i in range(config.n_lab_tests)]
    lab_pool = [x for x in lab_pool if f"lab:{x}" not in informative]
    drug_rates = {d: float(r) for d, r in zip(BACKGROUND_DRUGS, rng.uniform(0.02, 0.35, len(BACKGROUND_DRUGS)))}
    drug_rates = {d: r for d, r in drug_rates.items() if f"med:{d}" not in informative}
    organisms = [str(80001 + i) for i in range(config.n_organisms)]

    n_patients = max(3, min(config.n_admissions, int(round(config.n_admissions * config.patients_ratio))))
    prevalence = np.array([c.prevalence for c in codes])

    records = []
    for i in range(config.n_admissions):
        patient = i if i < n_patients else int(rng.integers(0, n_patients))
        labels = (rng.random(C) < prevalence).astype(int)
        while labels.sum() < min(config.min_codes, C):
            # top up in proportion to prevalence so rare codes stay rare
            free = np.flatnonzero(labels == 0)
            weights = prevalence[free] / prevalence[free].sum()
            labels[free[int(rng.choice(len(free), p=weights))]] = 1

        n_notes = int(rng.integers(config.notes_per_admission[0], config.notes_per_admission[1] + 1))
        notes = []
        for _ in range(n_notes):
            lo, hi = config.sentences_per_note
            notes.append([_sentence(rng, words) for _ in range(int(rng.integers(lo, hi + 1)))])
        phrases = []
        signalled: set[str] = set()
        for j, spec in enumerate(codes):
            if not labels[j]:
                continue
            for kw in spec.keywords:
                for _ in range(spec.keyword_repeats):
                    note = notes[int(rng.integers(0, n_notes))]
                    sent = note[int(rng.integers(0, len(note)))]
                    # one list item, so later keywords cannot split it
                    sent.insert(int(rng.integers(0, len(sent) + 1)), kw)
            if spec.synonyms and rng.random() < config.p_diag:
                phrases.append(spec.synonyms[int(rng.integers(0, len(spec.synonyms)))])
            for feat in spec.features:
                if rng.random() < config.p_signal:
                    signalled.add(feat)

        labs: list[tuple[str, str]] = []
        for item in lab_pool:
            if rng.random() < 0.4:
                for _ in range(int(rng.integers(1, 4))):
                    labs.append((item, "abnormal" if rng.random() < 0.15 else "normal"))
        meds = [d for d, r in drug_rates.items() if rng.random() < r]
        micro = []
        for _ in range(int(rng.integers(0, 3))):
            micro.append((organisms[int(rng.integers(0, len(organisms)))],
                          "positive" if rng.random() < 0.3 else "negative"))
        chart = []
        for measure, (low, high) in CHART_MEASURES.items():
            for _ in range(int(rng.integers(1, 4))):
                if rng.random() < 0.1:
                    value = high + float(rng.uniform(1, 20))
                else:
                    value = float(rng.uniform(low, high))
                chart.append((measure, round(value, 1)))

        for feat in informative:
            block, ident = feat.split(":", 1)
            active = feat in signalled or rng.random() < config.p_flip
            if block == "lab":
                if active:
                    labs += [(ident, "abnormal"), (ident, "abnormal")]
                elif rng.random() < 0.5:
                    labs.append((ident, "normal"))
            elif block == "med" and active:
                meds.append(ident)
            elif block == "bio" and active:
                micro.append((ident, "positive"))
            elif block == "chart":
                low, high = CHART_MEASURES.get(ident, (0.0, 1.0))
                chart.append((ident, round(high + 10.0, 1) if active else round((low + high) / 2, 1)))

        records.append(AdmissionRecord(
            admission_id=str(100000 + i),
            patient_id=str(10000 + patient),
            notes=tuple(_render(n) for n in notes),
            diagnosis_phrases=tuple(phrases),
            lab_events=tuple(labs),
            chart_events=tuple(chart),
            medications=tuple(meds),
            micro_events=tuple(micro),
            labels=tuple(int(x) for x in labels),
        ))

    planted = {
        "schema_version": 1,
        "seed": seed,
        "codes": {c.code: {"keywords": list(c.keywords), "synonyms": list(c.synonyms),
                           "features": list(c.features)} for c in codes},
    }
    return records, catalog, planted
