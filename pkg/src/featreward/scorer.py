"""Map (reviews, summary) text to a feature vector.

Two backends:

* ``rule_based``: deterministic keyword/overlap heuristics, one per feature.
  Cheap, pure and hand-checkable; useful for tests and for bootstrapping
  pools without a judge model.
* ``remote``: one POST per feature to an LLM judge endpoint. Replies are
  free text; the first number found is clamped into the feature bounds.
  Scores are cached in an append-only JSONL file keyed by a content hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

from .core_types import FeatureSchema, FeatureVector

RULE_BASED = "rule_based"
REMOTE = "remote"

TOKEN_ENV = "FEATREWARD_JUDGE_TOKEN"
TARGET_WORDS = 80

ASPECTS = frozenset(
    """battery screen display price value quality size fit comfort sound audio camera
    design color colour material leather fabric durability delivery shipping packaging
    performance speed service support warranty weight strength taste smell charger
    charging sole build finish instructions assembly noise lens keyboard""".split()
)
POSITIVE = frozenset(
    """good great excellent amazing awesome love loved lovely nice perfect happy comfortable
    durable sturdy beautiful fast best recommend recommended solid reliable pleased
    satisfied impressive bright clear worth cheap affordable easy soft stylish""".split()
)
NEGATIVE = frozenset(
    """bad poor terrible awful hate hated broken broke flimsy uncomfortable slow
    worst disappointed disappointing unhappy defective faulty noisy expensive overpriced
    narrow small tight stiff dull difficult hard weak problem problems issue issues""".split()
)
NEGATORS = frozenset("not no never isn't wasn't doesn't don't didn't hardly".split())
STOPWORDS = frozenset(
    """the a an and or but if then so of to in on at by for with from as is are was were be
    been being it its this that these those they them their there here he she his her we
    our you your i me my mine has have had do does did can could would should will just
    very also too some any all more most much many than which who whom what when where
    while about into over under after before again only own same such not no nor out up
    down off each few other both how why because until against between through during
    users user people customers product products item one ones get got""".split()
)

RUBRICS = {
    "aspect-coverage": "5 when every product aspect discussed in the reviews appears in the summary; 0 when none does.",
    "opinion-faithfulness": "5 when each sentiment stated in the summary matches what the reviews say about that aspect; 0 when none does.",
    "opinion-coverage": "5 when the summary carries every opinion voiced in the reviews; 0 when it carries none.",
    "conciseness": "5 for a complete summary with nothing droppable; 0 for an incomplete or bloated one.",
    "relevance": "5 when the summary is entirely about this product and its reviews; 0 when it is off-topic.",
    "hallucination": "5 when every claim is supported by the reviews; 0 when much is invented. Higher means less hallucination.",
    "language-correctness": "5 for fluent, grammatical text; 0 for badly broken language.",
}

_WORD = re.compile(r"[a-z]+(?:'[a-z]+)?|\d+(?:\.\d+)?")
_CLAUSE = re.compile(r"[.!?;,\n]+|\bbut\b|\bhowever\b|\bwhile\b")
_NUMBER = re.compile(r"[-+]?\d*\.?\d+(?:[eE][-+]?\d+)?")


class ScorerError(RuntimeError):
    def __init__(self, message: str, item_index: int | None = None):
        self.item_index = item_index
        super().__init__(message if item_index is None else f"item {item_index}: {message}")


def default_template() -> str:
    return resources.files("featreward").joinpath("templates/judge.txt").read_text(encoding="utf-8")


def load_templates(directory: str | Path, names: Sequence[str]) -> dict[str, str]:
    """Read ``<feature>.txt`` for each feature, falling back to ``default.txt``."""
    directory = Path(directory)
    out = {}
    fallback = directory / "default.txt"
    for n in names:
        p = directory / f"{n}.txt"
        src = p if p.exists() else fallback
        if not src.exists():
            raise FileNotFoundError(f"file not found: {p}")
        out[n] = src.read_text(encoding="utf-8")
    return out


@dataclass
class ScorerConfig:
    backend: str = RULE_BASED
    remote_endpoint: str | None = None
    prompt_templates: dict[str, str] = field(default_factory=dict)
    cache_path: str | None = None
    max_parallel_requests: int = 4
    retry_limit: int = 2
    template_version: str = "v1"
    timeout: float = 60.0
    # (endpoint, json_body, headers) -> reply text; defaults to an httpx POST
    transport: Callable[[str, dict, dict], str] | None = None

    def validate(self, schema: FeatureSchema) -> None:
        if self.backend not in (RULE_BASED, REMOTE):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.max_parallel_requests < 1:
            raise ValueError("max_parallel_requests must be >= 1")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be >= 0")
        if self.backend == REMOTE:
            if not self.remote_endpoint:
                raise ValueError("remote backend requires remote_endpoint")
            missing = [n for n in schema.names if n not in self.prompt_templates]
            if missing:
                raise ValueError(f"remote backend requires a prompt template per feature; missing {missing}")

    @classmethod
    def remote(cls, endpoint: str, schema: FeatureSchema | None = None, **kw) -> "ScorerConfig":
        schema = schema or FeatureSchema.default()
        tpl = default_template()
        return cls(backend=REMOTE, remote_endpoint=endpoint,
                   prompt_templates={n: tpl for n in schema.names}, **kw)


# -- rule-based features ---------------------------------------------------


def _tokens(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def _canon(word: str) -> str:
    if word in ASPECTS:
        return word
    if len(word) > 3 and word.endswith("s") and word[:-1] in ASPECTS:
        return word[:-1]
    return word


def _content_words(tokens: Sequence[str]) -> list[str]:
    return [_canon(t) for t in tokens if t.isalpha() and len(t) >= 3 and t not in STOPWORDS]


def _aspects(text: str) -> set[str]:
    return {a for a in map(_canon, _tokens(text)) if a in ASPECTS}


def _polarity(tokens: Sequence[str]) -> int:
    score = 0
    flip_left = 0
    for t in tokens:
        if t in NEGATORS:
            flip_left = 3
            continue
        s = 1 if t in POSITIVE else -1 if t in NEGATIVE else 0
        if s and flip_left:
            s = -s
        score += s
        flip_left = max(0, flip_left - 1)
    return (score > 0) - (score < 0)


def _opinions(text: str) -> set[tuple[str, int]]:
    """(aspect, polarity) pairs, one polarity per clause."""
    out = set()
    for clause in _CLAUSE.split(text.lower()):
        toks = _tokens(clause)
        pol = _polarity(toks)
        if pol:
            out |= {(a, pol) for a in map(_canon, toks) if a in ASPECTS}
    return out


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def _language_penalty(text: str, tokens: Sequence[str]) -> float:
    penalty = 0.0
    for open_, close in ("()", "[]", "{}"):
        depth = 0
        unmatched = 0
        for ch in text:
            if ch == open_:
                depth += 1
            elif ch == close:
                if depth:
                    depth -= 1
                else:
                    unmatched += 1
        penalty += depth + unmatched
    penalty += text.count('"') % 2
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b and a.isalpha())
    return penalty + 0.5 * repeats


def rule_based_scores(context: str, candidate: str) -> dict[str, float]:
    """Heuristic 0-5 scores for the seven default features."""
    ctx_tokens = _tokens(context)
    cand_tokens = _tokens(candidate)

    ctx_aspects = _aspects(context)
    cand_aspects = _aspects(candidate)
    aspect_cov = 5.0 * _ratio(len(cand_aspects & ctx_aspects), len(ctx_aspects))

    ctx_ops = _opinions(context)
    cand_ops = _opinions(candidate)
    matched = len(cand_ops & ctx_ops)
    faithfulness = 5.0 * _ratio(matched, len(cand_ops))
    opinion_cov = 5.0 * _ratio(matched, len(ctx_ops))

    n_words = sum(1 for t in cand_tokens if t[0].isalpha())
    conciseness = 5.0 * min(1.0, max(0.0, 1.0 - abs(n_words - TARGET_WORDS) / TARGET_WORDS))

    ctx_vocab = set(_content_words(ctx_tokens))
    cand_content = _content_words(cand_tokens)
    cand_types = set(cand_content)
    relevance = 5.0 * (len(cand_types & ctx_vocab) / len(cand_types) if cand_types else 0.0)

    # token level, and numbers count: a figure absent from the reviews is invented
    checked = cand_content + [t for t in cand_tokens if not t[0].isalpha()]
    ctx_all = ctx_vocab | {t for t in ctx_tokens if not t[0].isalpha()}
    absent = sum(1 for t in checked if t not in ctx_all)
    hallucination = 5.0 * (1.0 - absent / len(checked)) if checked else 5.0

    language = max(0.0, 5.0 - _language_penalty(candidate, cand_tokens))

    return {
        "aspect-coverage": aspect_cov,
        "opinion-faithfulness": faithfulness,
        "opinion-coverage": opinion_cov,
        "conciseness": conciseness,
        "relevance": relevance,
        "hallucination": hallucination,
        "language-correctness": language,
    }


def _rule_vector(context: str, candidate: str, schema: FeatureSchema) -> FeatureVector:
    scores = rule_based_scores(context, candidate)
    unknown = [n for n in schema.names if n not in scores]
    if unknown:
        raise ValueError(f"rule-based scorer has no rule for features {unknown}")
    # rules produce 0-5; map affinely onto each feature's bounds
    return FeatureVector(f.min + (f.max - f.min) * scores[f.name] / 5.0 for f in schema.features)


# -- remote judge ------------------------------------------------------------


def parse_reply(text: str, lo: float, hi: float) -> float:
    """First number in a free-text reply, clamped to [lo, hi]."""
    m = _NUMBER.search(text or "")
    if m is None:
        raise ScorerError(f"unparseable remote reply: {text[:80]!r}")
    return min(hi, max(lo, float(m.group())))


def render_prompt(template: str, context: str, candidate: str, rubric: str) -> str:
    return template.replace("{reviews}", context).replace("{summary}", candidate).replace("{feature_rubric}", rubric)


def cache_key(feature: str, context: str, candidate: str, template_version: str) -> str:
    blob = json.dumps([feature, context, candidate, template_version], ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class ScoreCache:
    """In-memory map backed by an append-only JSONL file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._data: dict[str, float] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[rec["key"]] = float(rec["value"])

    def get(self, key: str) -> float | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, value: float) -> None:
        with self._lock:
            if key in self._data:
                return
            self._data[key] = value
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "value": value, "timestamp": time.time()}) + "\n")

    def __len__(self) -> int:
        return len(self._data)


def _httpx_post(endpoint: str, body: dict, headers: dict, timeout: float = 60.0) -> str:
    import httpx

    r = httpx.post(endpoint, json=body, headers=headers, timeout=timeout)
    r.raise_for_status()
    return r.text


class Scorer:
    """Feature scorer bound to a config and schema; holds the score cache."""

    def __init__(self, config: ScorerConfig | None = None, schema: FeatureSchema | None = None):
        self.config = config or ScorerConfig()
        self.schema = schema or FeatureSchema.default()
        self.config.validate(self.schema)
        self.cache = ScoreCache(self.config.cache_path)
        self.remote_calls = 0
        self._count_lock = threading.Lock()

    def _call(self, feature: str, context: str, candidate: str) -> float:
        cfg = self.config
        spec = next(f for f in self.schema.features if f.name == feature)
        prompt = render_prompt(cfg.prompt_templates[feature], context, candidate, RUBRICS.get(feature, feature))
        headers = {}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        post = cfg.transport or (lambda url, body, hdr: _httpx_post(url, body, hdr, cfg.timeout))
        last = None
        for _ in range(cfg.retry_limit + 1):
            with self._count_lock:
                self.remote_calls += 1
            try:
                reply = post(cfg.remote_endpoint, {"prompt": prompt}, headers)
            except Exception as e:  # transport errors are retried
                last = e
                continue
            return parse_reply(reply, spec.min, spec.max)
        raise ScorerError(f"remote failure after {cfg.retry_limit + 1} attempts: {type(last).__name__}: {last}")

    def score(self, context: str, candidate: str) -> FeatureVector:
        return self.score_batch([(context, candidate)])[0]

    def score_batch(self, items: Sequence[tuple[str, str]]) -> list[FeatureVector]:
        for i, (_, cand) in enumerate(items):
            if not cand or not cand.strip():
                raise ScorerError("empty candidate", i)
        if self.config.backend == RULE_BASED:
            return [_rule_vector(c, s, self.schema) for c, s in items]

        names = self.schema.names
        keys = [[cache_key(n, c, s, self.config.template_version) for n in names] for c, s in items]
        pending: dict[str, tuple[int, str, str, str]] = {}
        for i, ((c, s), row) in enumerate(zip(items, keys)):
            for n, k in zip(names, row):
                if k not in pending and self.cache.get(k) is None:
                    pending[k] = (i, n, c, s)

        def job(k):
            i, n, c, s = pending[k]
            try:
                self.cache.put(k, self._call(n, c, s))
            except ScorerError as e:
                raise ScorerError(str(e), i) from e

        if pending:
            with ThreadPoolExecutor(self.config.max_parallel_requests) as ex:
                futures = [ex.submit(job, k) for k in pending]
            errors = [f.exception() for f in futures if f.exception() is not None]
            if errors:
                raise min(errors, key=lambda e: getattr(e, "item_index", 0) or 0)
        return [FeatureVector(self.cache.get(k) for k in row) for row in keys]


def score(context: str, candidate: str, config: ScorerConfig | None = None, schema: FeatureSchema | None = None) -> FeatureVector:
    return Scorer(config, schema).score(context, candidate)


def score_batch(items, config: ScorerConfig | None = None, schema: FeatureSchema | None = None) -> list[FeatureVector]:
    return Scorer(config, schema).score_batch(items)
