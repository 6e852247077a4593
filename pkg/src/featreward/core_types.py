"""Feature schema, preference/pool records and JSONL ingestion.

Feature values are stored raw, on the rubric scale of the schema (0-5 for the
default opinion-summarization schema). Normalization happens inside the
networks.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_FEATURES = (
    "aspect-coverage",
    "opinion-faithfulness",
    "opinion-coverage",
    "conciseness",
    "relevance",
    "hallucination",
    "language-correctness",
)


class DataError(ValueError):
    """Invalid input data. ``line`` is the 1-based source line when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f"{':' if where else 'line '}{line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.reason = message


class NumericalError(RuntimeError):
    """Non-finite loss or parameters during optimization."""

    def __init__(self, message: str, step: int | None = None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    min: float = 0.0
    max: float = 5.0


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[FeatureSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if not names:
            raise ValueError("schema needs at least one feature")
        if any(not n for n in names):
            raise ValueError("feature names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        for f in self.features:
            if not (math.isfinite(f.min) and math.isfinite(f.max)) or not f.min < f.max:
                raise ValueError(f"feature {f.name!r}: need finite min < max")

    @classmethod
    def default(cls) -> "FeatureSchema":
        return cls(tuple(FeatureSpec(n, 0.0, 5.0) for n in DEFAULT_FEATURES))

    @classmethod
    def uniform(cls, names: Sequence[str], lo: float, hi: float) -> "FeatureSchema":
        return cls(tuple(FeatureSpec(n, lo, hi) for n in names))

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureSchema":
        return cls(
            tuple(
                FeatureSpec(str(f["name"]), float(f.get("min", 0.0)), float(f.get("max", 5.0)))
                for f in data["features"]
            )
        )

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"features": [{"name": f.name, "min": f.min, "max": f.max} for f in self.features]}

    def __len__(self) -> int:
        return len(self.features)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    @property
    def lows(self) -> np.ndarray:
        return np.array([f.min for f in self.features], dtype=float)

    @property
    def highs(self) -> np.ndarray:
        return np.array([f.max for f in self.features], dtype=float)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """Affine map from feature bounds to [0, 1], row-wise."""
        lo, hi = self.lows, self.highs
        return (np.asarray(x, dtype=float) - lo) / (hi - lo)


@dataclass(frozen=True)
class FeatureVector:
    values: tuple[float, ...]

    def __init__(self, values: Iterable[float]):
        object.__setattr__(self, "values", tuple(float(v) for v in values))

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=float)


@dataclass(frozen=True)
class Violation:
    index: int | None
    reason: str

    def __str__(self) -> str:
        if self.index is None:
            return self.reason
        return f"feature {self.index}: {self.reason}"


def validate_feature_vector(v: FeatureVector | Sequence[float], schema: FeatureSchema) -> list[Violation]:
    """Return the list of violations; an empty list means the vector is valid."""
    values = list(v)
    if len(values) != len(schema):
        return [Violation(None, f"length mismatch: expected {len(schema)}, got {len(values)}")]
    out = []
    for i, (x, spec) in enumerate(zip(values, schema.features)):
        if not isinstance(x, (int, float)) or isinstance(x, bool):
            out.append(Violation(i, f"not a number: {x!r}"))
        elif not math.isfinite(x):
            out.append(Violation(i, "non-finite value"))
        elif x > spec.max:
            out.append(Violation(i, f"exceeds max {spec.max:g}"))
        elif x < spec.min:
            out.append(Violation(i, f"below min {spec.min:g}"))
    return out


def checked_features(values, schema: FeatureSchema, what: str = "features") -> FeatureVector:
    if not isinstance(values, (list, tuple)):
        raise DataError(f"{what}: expected a list of numbers")
    problems = validate_feature_vector(values, schema)
    if problems:
        raise DataError(f"{what}: " + "; ".join(str(p) for p in problems))
    return FeatureVector(values)


@dataclass(frozen=True)
class CandidateRef:
    candidate_id: str
    text: str | None = None

    def __post_init__(self) -> None:
        if not self.candidate_id:
            raise ValueError("candidate_id must be non-empty")

    def to_dict(self) -> dict:
        d = {"candidate_id": self.candidate_id}
        if self.text is not None:
            d["text"] = self.text
        return d


@dataclass(frozen=True)
class PreferencePair:
    context_id: str
    winner: CandidateRef
    loser: CandidateRef
    winner_features: FeatureVector
    loser_features: FeatureVector
    annotator_id: str | None = None

    def __post_init__(self) -> None:
        if self.winner.candidate_id == self.loser.candidate_id:
            raise ValueError("winner and loser must differ")

    def to_dict(self) -> dict:
        d = {
            "context_id": self.context_id,
            "winner": self.winner.to_dict(),
            "loser": self.loser.to_dict(),
            "winner_features": list(self.winner_features.values),
            "loser_features": list(self.loser_features.values),
        }
        if self.annotator_id is not None:
            d["annotator_id"] = self.annotator_id
        return d


class Tier(enum.Enum):
    GOOD = "GOOD"
    SBAD = "SBAD"
    VBAD = "VBAD"

    @classmethod
    def parse(cls, label) -> "Tier":
        if not isinstance(label, str):
            raise ValueError(f"unknown tier label: {label!r}")
        try:
            return cls[label.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown tier label: {label!r}") from None

    @property
    def rank(self) -> int:
        """Higher is better."""
        return {"GOOD": 2, "SBAD": 1, "VBAD": 0}[self.value]


@dataclass(frozen=True)
class Candidate:
    candidate_id: str
    tier: Tier
    features: FeatureVector
    sft_logprob: float = 0.0
    text: str | None = None

    def ref(self) -> CandidateRef:
        return CandidateRef(self.candidate_id, self.text)

    def to_dict(self) -> dict:
        d = {
            "candidate_id": self.candidate_id,
            "tier": self.tier.value,
            "features": list(self.features.values),
            "sft_logprob": self.sft_logprob,
        }
        if self.text is not None:
            d["text"] = self.text
        return d


@dataclass(frozen=True)
class CandidatePool:
    context_id: str
    candidates: tuple[Candidate, ...]
    context: str | None = None

    def __post_init__(self) -> None:
        if len(self.candidates) < 2:
            raise ValueError("pool too small: need at least 2 candidates")
        ids = [c.candidate_id for c in self.candidates]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate candidate_id {dup!r}")

    def feature_matrix(self) -> np.ndarray:
        return np.array([c.features.values for c in self.candidates], dtype=float)

    def sft_logprobs(self) -> np.ndarray:
        return np.array([c.sft_logprob for c in self.candidates], dtype=float)

    def reference_distribution(self) -> np.ndarray:
        z = self.sft_logprobs()
        z = z - z.max()
        p = np.exp(z)
        return p / p.sum()

    def to_dict(self) -> dict:
        d = {"context_id": self.context_id, "candidates": [c.to_dict() for c in self.candidates]}
        if self.context is not None:
            d["context"] = self.context
        return d


# -- JSONL ingestion -------------------------------------------------------


def _read_jsonl(path: str | Path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"parse failure: {e.msg}", lineno, str(path)) from None
            if not isinstance(rec, dict):
                raise DataError("record must be a JSON object", lineno, str(path))
            yield lineno, rec


def _ref(obj, what: str) -> CandidateRef:
    if not isinstance(obj, dict) or not obj.get("candidate_id"):
        raise DataError(f"{what}: missing candidate_id")
    text = obj.get("text")
    return CandidateRef(str(obj["candidate_id"]), None if text is None else str(text))


def preference_from_dict(rec: dict, schema: FeatureSchema) -> PreferencePair:
    if "context_id" not in rec:
        raise DataError("missing context_id")
    winner = _ref(rec.get("winner"), "winner")
    loser = _ref(rec.get("loser"), "loser")
    if winner.candidate_id == loser.candidate_id:
        raise DataError("winner and loser must differ")
    ann = rec.get("annotator_id")
    return PreferencePair(
        context_id=str(rec["context_id"]),
        winner=winner,
        loser=loser,
        winner_features=checked_features(rec.get("winner_features"), schema, "winner_features"),
        loser_features=checked_features(rec.get("loser_features"), schema, "loser_features"),
        annotator_id=None if ann is None else str(ann),
    )


def load_preference_dataset(path: str | Path, schema: FeatureSchema | None = None) -> list[PreferencePair]:
    """Load and validate a preference JSONL file, preserving file order."""
    schema = schema or FeatureSchema.default()
    pairs = []
    for lineno, rec in _read_jsonl(path):
        try:
            pairs.append(preference_from_dict(rec, schema))
        except DataError as e:
            raise DataError(e.reason, lineno, str(path)) from None
    if not pairs:
        raise DataError("empty dataset", path=str(path))
    return pairs


def pool_from_dict(rec: dict, schema: FeatureSchema, require_features: bool = True) -> CandidatePool:
    if "context_id" not in rec:
        raise DataError("missing context_id")
    raw = rec.get("candidates")
    if not isinstance(raw, list):
        raise DataError("candidates must be a list")
    if len(raw) < 2:
        raise DataError("pool too small")
    cands = []
    seen = set()
    for j, c in enumerate(raw):
        if not isinstance(c, dict) or not c.get("candidate_id"):
            raise DataError(f"candidate {j}: missing candidate_id")
        cid = str(c["candidate_id"])
        if cid in seen:
            raise DataError(f"duplicate candidate_id {cid!r}")
        seen.add(cid)
        try:
            tier = Tier.parse(c.get("tier"))
        except ValueError as e:
            raise DataError(f"candidate {cid!r}: {e}") from None
        if "features" in c or require_features:
            feats = checked_features(c.get("features"), schema, f"candidate {cid!r} features")
        else:
            feats = FeatureVector([])
        lp = c.get("sft_logprob", 0.0)
        if not isinstance(lp, (int, float)) or isinstance(lp, bool) or not math.isfinite(lp):
            raise DataError(f"candidate {cid!r}: sft_logprob must be a finite number")
        text = c.get("text")
        cands.append(Candidate(cid, tier, feats, float(lp), None if text is None else str(text)))
    ctx = rec.get("context")
    return CandidatePool(str(rec["context_id"]), tuple(cands), None if ctx is None else str(ctx))


def load_candidate_pools(path: str | Path, schema: FeatureSchema | None = None) -> list[CandidatePool]:
    schema = schema or FeatureSchema.default()
    pools = []
    for lineno, rec in _read_jsonl(path):
        try:
            pools.append(pool_from_dict(rec, schema))
        except DataError as e:
            raise DataError(e.reason, lineno, str(path)) from None
    return pools


def dump_jsonl(records: Iterable, path: str | Path) -> int:
    """Write records (objects with ``to_dict`` or plain dicts) one per line."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            d = r.to_dict() if hasattr(r, "to_dict") else r
            fh.write(json.dumps(d, sort_keys=False) + "\n")
            n += 1
    return n


def pair_arrays(pairs: Sequence[PreferencePair]) -> tuple[np.ndarray, np.ndarray]:
    """Stack winner and loser feature vectors as (n, d) arrays."""
    w = np.array([p.winner_features.values for p in pairs], dtype=float)
    l = np.array([p.loser_features.values for p in pairs], dtype=float)
    return w, l
