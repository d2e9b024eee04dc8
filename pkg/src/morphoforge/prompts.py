"""Synthesis-text rendering and few-shot prompt assembly.

Records render either as a procedure narrative (template with named
placeholders, protocol volumes in mkl) or as a semicolon-separated
tabular line in schema order. Prompts carry a fixed system preamble,
N worked examples with their true answers, and the query; answers obey
the grammar Answer: '<Name>(, <Name>)*'.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .data_model import (
    CONTINUOUS_COLUMNS,
    Dataset,
    MorphologyLabel,
    ShapeCategory,
    SynthesisRecord,
    default_feature_names,
    one_hot,
)


class TemplateError(Exception):
    pass


class SamplingError(Exception):
    pass


SYSTEM_PREAMBLE = (
    "You are an expert in the synthesis of nanomaterials. You analyze the conditions "
    "for obtaining a nanomaterial and predict what particle shapes will be present in "
    "the synthesized material. There are five particle shapes: 'Cube', 'Stick', "
    "'Sphere', 'Flat' and 'Amorphous'. A nanomaterial can contain particles of "
    "different shapes. If you cannot say exactly what it is, list the forms that have "
    "the highest probability in those conditions."
)

ANSWER_PATTERN = re.compile(r"Answer:\s*'([^']*)'")

ALLOWED_PLACEHOLDERS = frozenset(
    {
        "ca_conc",
        "pol_vol",
        "pol_conc",
        "polymer",
        "pol_mass",
        "solvent_volume",
        "solvent",
        "co3_conc",
        "hco3_conc",
        "surf_vol",
        "surf_conc",
        "surfactant",
        "r_temp",
        "stir_ratio",
        "r_time",
    }
)

_PLACEHOLDER_RE = re.compile(r"\{(\w+)\}")

# Fixed dosing volumes of the polymer and surfactant stock solutions in
# the synthesis protocol (mkl); they are not per-record parameters.
POLYMER_STOCK_VOLUME_MKL = 20
SURFACTANT_STOCK_VOLUME_MKL = 20


@dataclass(frozen=True)
class Template:
    id: str
    body: str

    def __post_init__(self):
        unknown = set(_PLACEHOLDER_RE.findall(self.body)) - ALLOWED_PLACEHOLDERS
        if unknown:
            raise TemplateError(f"template {self.id!r} uses unknown placeholders: {sorted(unknown)}")

    def placeholders(self) -> set:
        return set(_PLACEHOLDER_RE.findall(self.body))


TEMPLATE_1 = Template(
    id="coprecipitation-stepwise",
    body=(
        "Synthesis was carried out using the co-precipitation technique. Initially, "
        "{ca_conc} mkl of 1 M CaCl2 was combined with {pol_vol} mkl of {pol_conc} % wt. "
        "{polymer} polymer having a molecular weight of {pol_mass} kDa. Subsequently, "
        "{solvent_volume} mkl of {solvent} was introduced, and the volume adjusted to "
        "500 mkl using distilled water. Following that, {co3_conc} mkl of 0.1 M Na2CO3 "
        "was mixed with {hco3_conc} mkl of 0.1 M NaHCO3, along with {surf_vol} mkl of "
        "{surf_conc} % wt. {surfactant} serving as the surfactant. Another "
        "{solvent_volume} mkl of {solvent} was added, and the volume adjusted to 500 "
        "mkl using distilled water. Two resulting solutions, both heated to {r_temp} C "
        "prior to the reaction, were combined under continuous stirring at {stir_ratio} "
        "rpm while maintaining the temperature. The reaction proceeded for {r_time} "
        "min, followed by centrifugation."
    ),
)

TEMPLATE_2 = Template(
    id="coprecipitation-twostep",
    body=(
        "All materials were synthesized via the co-precipitation technique. In the "
        "first step, {ca_conc} mkl of 1 M CaCl2 was combined with {pol_vol} mkl of "
        "{pol_conc} % wt. {polymer} polymer, characterized by a molecular weight of "
        "{pol_mass} kDa. This was followed by the addition of {solvent_volume} mkl of "
        "{solvent}, and the volume was adjusted to 500 mkl using distilled water. In "
        "the subsequent step, {co3_conc} mkl of 0.1 M Na2CO3, {hco3_conc} mkl of 0.1 M "
        "NaHCO3, and {surf_vol} mkl of {surf_conc} % wt. {surfactant} surfactant were "
        "combined. Once more, {solvent_volume} mkl of {solvent} was added, and the "
        "volume was adjusted to 500 mkl using distilled water. Finally, two solutions, "
        "both heated to {r_temp} C before the reaction, were mixed under stirring at "
        "{stir_ratio} rpm while maintaining the temperature. The reaction proceeded "
        "for {r_time} min, followed by centrifugation."
    ),
)

TEMPLATE_3 = Template(
    id="coprecipitation-burette",
    body=(
        "CaCO3 nanoparticles were synthesized by the co-precipitation approach "
        "according to the following manner. In separate burettes two solutions were "
        "made, {ca_conc} mkl of 1 M CaCl2 and {pol_vol} mkl of {pol_conc} % wt. "
        "{polymer} with molecular weight of {pol_mass} kDa were mixed in "
        "{solvent_volume} mkl of {solvent} before dilution with distilled water up to "
        "500 mkl. Similarly, {co3_conc} mkl of 0.1 M Na2CO3 and {hco3_conc} mkl of 0.1 "
        "M of NaHCO3 were combined with {surf_vol} mkl of {surf_conc} % wt. "
        "{surfactant} and {solvent_volume} mkl of {solvent}. Then, the solution was "
        "also diluted in 500 mkl of water. Both solutions were heated up to {r_temp} C "
        "right before mixing under stirring at {stir_ratio} rpm for {r_time} min "
        "following centrifugation."
    ),
)

DEFAULT_TEMPLATES = (TEMPLATE_1, TEMPLATE_2, TEMPLATE_3)


def load_template(path) -> Template:
    with open(path, encoding="utf-8") as fh:
        return Template(id=str(path), body=fh.read().strip())


def _format_int_or_general(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return repr(float(v))


def _format_one_decimal(v: float) -> str:
    if float(v).is_integer():
        return f"{float(v):.1f}"
    return repr(float(v))


def _format_duration(minutes: float) -> str:
    total_seconds = int(round(float(minutes) * 60.0))
    mm, ss = divmod(total_seconds, 60)
    return f"{mm} min {ss} sec"


def placeholder_values(record: SynthesisRecord) -> dict:
    """Map template placeholders to formatted strings for one record.

    Dosing volumes are derived from the 1000 mkl combined reaction volume:
    ion concentrations in mM equal stock mkl x molarity, and the solvent
    is split evenly between the two 500 mkl precursors (5 mkl per % vol.).
    """
    return {
        "ca_conc": _format_int_or_general(record.ca_ion),
        "co3_conc": _format_int_or_general(10.0 * record.co3_ion),
        "hco3_conc": _format_int_or_general(10.0 * record.hco3_ion),
        "pol_vol": str(POLYMER_STOCK_VOLUME_MKL),
        "pol_conc": _format_int_or_general(record.polymer_wt),
        "polymer": record.polymer,
        "pol_mass": _format_one_decimal(record.polymer_mwt),
        "solvent_volume": _format_one_decimal(5.0 * record.solvent_vol),
        "solvent": record.solvent,
        "surf_vol": str(SURFACTANT_STOCK_VOLUME_MKL),
        "surf_conc": _format_int_or_general(record.surfactant_wt),
        "surfactant": record.surfactant,
        "r_temp": _format_int_or_general(record.temperature),
        "stir_ratio": _format_int_or_general(record.stirring),
        "r_time": _format_duration(record.synthesis_time),
    }


def render_textual(record: SynthesisRecord, template: Template = TEMPLATE_1) -> str:
    """Fill a narrative template with the record's formatted values."""
    values = placeholder_values(record)

    def substitute(match):
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"placeholder {{{name}}} has no source field")
        return values[name]

    rendered = _PLACEHOLDER_RE.sub(substitute, template.body)
    leftover = _PLACEHOLDER_RE.findall(rendered)
    if leftover:
        raise TemplateError(f"unfilled placeholders after rendering: {leftover}")
    return rendered


_TABULAR_INT_COLUMNS = {
    "Ca ion, mM",
    "CO3 ion, mM",
    "HCO3 ion, mM",
    "Stirring, rpm",
    "Temperature, C",
    "Synthesis time",
}


def render_tabular(record: SynthesisRecord, feature_names=None) -> str:
    """Semicolon-separated `name: value` pairs in schema order."""
    if feature_names is None:
        feature_names = default_feature_names()
    vector = one_hot(record, feature_names)
    parts = []
    for name, value in zip(feature_names, vector):
        if name in _TABULAR_INT_COLUMNS:
            text = _format_int_or_general(value)
        elif name in CONTINUOUS_COLUMNS:
            text = repr(float(value))
        else:
            text = str(int(value))
        parts.append(f"{name}: {text}")
    return "; ".join(parts)


def answer_line(shapes) -> str:
    """Canonical answer string, shapes in taxonomy order."""
    ordered = [s.value for s in ShapeCategory if s in set(shapes)]
    return "Answer: '" + ", ".join(ordered) + "'"


@dataclass(frozen=True)
class FewShotConfig:
    target: ShapeCategory
    n_examples: int = 8
    sampling: str = "at_least_one_target"
    format: str = "textual"
    seed: int = 0
    enforce_sweep_range: bool = True

    def __post_init__(self):
        if self.sampling not in ("at_least_one_target", "only_target_class"):
            raise SamplingError(f"unknown sampling strategy {self.sampling!r}")
        if self.format not in ("textual", "tabular"):
            raise SamplingError(f"unknown prompt format {self.format!r}")
        if self.n_examples < 1:
            raise SamplingError("n_examples must be >= 1")
        if self.enforce_sweep_range and not 2 <= self.n_examples <= 10:
            raise SamplingError("n_examples outside the swept range [2, 10]; pass enforce_sweep_range=False to override")


@dataclass(frozen=True)
class FewShotPrompt:
    system_preamble: str
    examples: tuple
    query: str
    target: ShapeCategory
    format: str = "textual"

    def prompt_text(self) -> str:
        blocks = [self.system_preamble]
        for text, answer in self.examples:
            blocks.append(text)
            blocks.append(answer)
        blocks.append(self.query)
        blocks.append("Answer:")
        return "\n\n".join(blocks)

    def messages(self) -> list:
        user_blocks = []
        for text, answer in self.examples:
            user_blocks.append(text)
            user_blocks.append(answer)
        user_blocks.append(self.query)
        user_blocks.append("Answer:")
        return [
            {"role": "system", "content": self.system_preamble},
            {"role": "user", "content": "\n\n".join(user_blocks)},
        ]

    def to_json(self) -> str:
        return json.dumps(self.messages(), ensure_ascii=False, indent=2)


def estimate_tokens(text: str) -> int:
    """Crude token estimate: one token per 4 characters, rounded up."""
    return int(math.ceil(len(text) / 4.0))


def _render_example(record, label: MorphologyLabel, fmt: str, template) -> tuple:
    if fmt == "textual":
        text = render_textual(record, template)
    else:
        text = render_tabular(record)
    return text, answer_line(label.shapes)


def build_prompt(
    config: FewShotConfig,
    train: Dataset,
    query: SynthesisRecord,
    templates=DEFAULT_TEMPLATES,
) -> FewShotPrompt:
    """Assemble a few-shot prompt under the configured sampling strategy.

    at_least_one_target guarantees at least one example whose label holds
    the target shape; only_target_class draws exclusively from such
    records (ground-truth-aware, so the harness restricts its use to
    confirmation experiments). Sampling is without replacement and fully
    determined by config.seed.
    """
    rng = np.random.default_rng(config.seed)
    n = config.n_examples
    target_idx = [i for i, lab in enumerate(train.labels) if config.target in lab.shapes]

    if config.sampling == "only_target_class":
        if len(target_idx) < n:
            raise SamplingError(
                f"only_target_class needs {n} examples containing {config.target.value}, "
                f"but the training set has {len(target_idx)}"
            )
        chosen = list(rng.choice(np.array(target_idx), size=n, replace=False))
    else:
        if len(train) < n:
            raise SamplingError(f"need {n} examples, but the training set has {len(train)}")
        if not target_idx:
            raise SamplingError(f"no training example contains {config.target.value}")
        anchor = int(rng.choice(np.array(target_idx)))
        rest = np.array([i for i in range(len(train)) if i != anchor])
        chosen = [anchor] + list(rng.choice(rest, size=n - 1, replace=False))
        rng.shuffle(chosen)

    examples = []
    for i in chosen:
        template = templates[int(rng.integers(0, len(templates)))] if config.format == "textual" else None
        examples.append(_render_example(train.records[int(i)], train.labels[int(i)], config.format, template))

    if config.format == "textual":
        query_template = templates[int(rng.integers(0, len(templates)))]
        query_text = render_textual(query, query_template)
    else:
        query_text = render_tabular(query)

    return FewShotPrompt(
        system_preamble=SYSTEM_PREAMBLE,
        examples=tuple(examples),
        query=query_text,
        target=config.target,
        format=config.format,
    )


def parse_answer_detailed(text: str) -> tuple:
    """Extract shape names from a model response.

    Prefers the last Answer line (quoted or not); otherwise scans the
    whole text for shape-name tokens. Returns (shapes, unknown_tokens).
    """
    by_name = {s.value.lower(): s for s in ShapeCategory}
    shapes = set()
    unknown = []

    matches = ANSWER_PATTERN.findall(text)
    candidate = None
    if matches:
        candidate = matches[-1]
    else:
        lines = [ln for ln in text.splitlines() if "answer:" in ln.lower()]
        if lines:
            candidate = lines[-1].split(":", 1)[1]

    if candidate is not None:
        for token in candidate.split(","):
            cleaned = token.strip().strip("'\".! ")
            if not cleaned:
                continue
            shape = by_name.get(cleaned.lower())
            if shape is not None:
                shapes.add(shape)
            else:
                unknown.append(cleaned)
        return shapes, unknown

    for token in re.findall(r"[A-Za-z]+", text):
        shape = by_name.get(token.lower())
        if shape is not None:
            shapes.add(shape)
    if not shapes:
        unknown.append("no recognizable answer")
    return shapes, unknown


def parse_answer(text: str) -> set:
    shapes, _ = parse_answer_detailed(text)
    return shapes
