"""Self-supervised field-feature corpus.

Each example asks an encoder to name the field a feature belongs to: the
prompt shows one feature description plus every candidate field description,
and the target response is the correct field description.  The corpus is the
hand-off to external fine-tuning; encodings produced afterwards can be scored
with :func:`contrastive_loss`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import FeatureVocab, FieldSchema
from .enhancement import log_softmax

TEMPLATES = {
    "default-v1": (
        "You are given a feature from a recommender dataset. Decide which field it belongs to. "
        "Feature: {feature}. Candidate fields: {candidates}. Answer with the field description."
    ),
}


@dataclass(frozen=True)
class CorpusConfig:
    samples_per_field: int = 1000
    seed: int = 0
    template_id: str = "default-v1"

    def __post_init__(self):
        if self.samples_per_field < 1:
            raise ValueError(f"samples_per_field must be >= 1, got {self.samples_per_field}")
        if self.template_id not in TEMPLATES:
            raise ValueError(f"unknown template {self.template_id!r}")


@dataclass(frozen=True)
class CorpusExample:
    prompt: str
    response: str
    field_index: int
    feature_index: int


def sample_features(vocab: FeatureVocab, schema: FieldSchema, cfg: CorpusConfig) -> list[tuple[int, int]]:
    """Up to ``samples_per_field`` distinct non-OOV features per field, without replacement."""
    out = []
    for k, f in enumerate(schema.fields):
        n = len(vocab.tables[k]) if f.kind == "categorical" else 0
        if n == 0:
            warnings.warn(f"field {f.name!r} has no categorical features to sample; skipped", stacklevel=2)
            continue
        rng = np.random.default_rng([cfg.seed, k])
        picks = rng.choice(n, size=min(cfg.samples_per_field, n), replace=False) + 1
        out.extend((k, int(j)) for j in picks)
    return out


def render_candidates(descriptions: Sequence[str]) -> str:
    return "; ".join(f"({i}) {d}" for i, d in enumerate(descriptions, start=1))


def build_prompt(feature_desc: str, schema, template_id: str = "default-v1") -> str:
    """Fill the template with a feature description and all candidate field descriptions.

    ``schema`` may be a :class:`FieldSchema` or a plain sequence of field
    descriptions; candidates keep schema order.
    """
    if template_id not in TEMPLATES:
        raise ValueError(f"unknown template {template_id!r}")
    if not feature_desc:
        raise ValueError("feature description must be non-empty")
    descriptions = schema.descriptions if isinstance(schema, FieldSchema) else list(schema)
    if not descriptions:
        raise ValueError("at least one candidate field is required")
    return TEMPLATES[template_id].format(feature=feature_desc, candidates=render_candidates(descriptions))


def make_examples(vocab: FeatureVocab, schema: FieldSchema, cfg: CorpusConfig) -> list[CorpusExample]:
    return [
        CorpusExample(build_prompt(vocab.feature_description(k, j), schema, cfg.template_id),
                      schema.fields[k].description, k, j)
        for k, j in sample_features(vocab, schema, cfg)
    ]


def emit_corpus(examples: Sequence[CorpusExample], path, schema: FieldSchema | None = None) -> int:
    """Write JSON lines ``{"prompt", "response", "field"}``; returns the line count."""
    if not examples:
        raise ValueError("refusing to write an empty corpus")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            name = schema.fields[ex.field_index].name if schema is not None else ex.field_index
            fh.write(json.dumps({"prompt": ex.prompt, "response": ex.response, "field": name},
                                ensure_ascii=False) + "\n")
    return len(examples)


@dataclass(frozen=True, eq=False)
class EncodingSet:
    prompt_ids: tuple
    prompts: np.ndarray
    fields: np.ndarray
    temperature: float = 0.02


def load_encoding_set(path, schema: FieldSchema, temperature: float = 0.02) -> EncodingSet:
    """Read field records ``{"field", "embedding"}`` and prompt records ``{"prompt_id", "embedding"}``."""
    fields, ids, prompts = {}, [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            vec = np.asarray(rec["embedding"], dtype=np.float64)
            if "field" in rec:
                fields[rec["field"]] = vec
            elif "prompt_id" in rec:
                ids.append(rec["prompt_id"])
                prompts.append(vec)
            else:
                raise ValueError(f"{path}:{lineno}: record has neither 'field' nor 'prompt_id'")
    missing = [n for n in schema.names if n not in fields]
    if missing:
        raise ValueError(f"{path}: no encoding for field(s) {missing}")
    F = np.stack([fields[n] for n in schema.names])
    P = np.stack(prompts) if prompts else np.zeros((0, F.shape[1]))
    if P.shape[1] != F.shape[1]:
        raise ValueError(f"{path}: prompt and field encodings differ in dimension")
    return EncodingSet(tuple(ids), P, F, temperature)


def contrastive_loss(enc: EncodingSet, assignments) -> float:
    """Mean cross-entropy of each prompt against all fields under cosine/temperature logits."""
    P, F = np.asarray(enc.prompts, dtype=np.float64), np.asarray(enc.fields, dtype=np.float64)
    a = np.asarray(assignments, dtype=np.int64)
    if P.shape[0] == 0 or a.shape != (P.shape[0],):
        raise ValueError("need one field assignment per prompt encoding")
    if a.min() < 0 or a.max() >= F.shape[0]:
        raise ValueError(f"field assignments out of range [0, {F.shape[0]})")
    pn, fn = np.linalg.norm(P, axis=1), np.linalg.norm(F, axis=1)
    if np.any(pn == 0) or np.any(fn == 0):
        raise ValueError("cosine similarity is undefined for zero encodings")
    cos = (P / pn[:, None]) @ (F / fn[:, None]).T
    logp = log_softmax(cos / enc.temperature, axis=1)
    return float(-logp[np.arange(a.size), a].mean())
