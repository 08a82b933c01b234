"""Metric registry, improvement reports, ablation runs, and richness sweeps.

The scorer interface is the seam for real image-quality models; the stubs
shipped here (Laplacian-variance sharpness, one-minus-normalized-MSE
fidelity) are deterministic and fast but NOT aligned with human perception.
They exist so ordering and plumbing properties are testable offline.

Improvement percentages follow the published sign convention: positive
always means the enhanced method is better, regardless of whether the
metric rewards high or low values.
"""

from __future__ import annotations

import csv
import importlib.resources
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .cot_captioner import CaptionerClient, cot_prompt, render_length_prompt, stub_token_length
from .errors import (
    DuplicateRegistrationError,
    InvalidInputError,
    NotFoundError,
    ScorerFaultError,
    UndefinedImprovementError,
)
from .imaging import png_to_array
from .pipeline import DEGRADATION_LEVELS, PairRecord
from .restoration import RestorationClient, RestorationRequest, effective_token_length
from .text_conditioning import (
    CaptionRecord,
    HarmfulLexicon,
    default_harmful_lexicon,
    filter_harmful,
    perturb_relevance,
    richness_schedule,
)
from .util import atomic_write_text, stable_seed

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"
NO_REFERENCE = "no_reference"
FULL_REFERENCE = "full_reference"

IMPROVEMENT_FIXTURE_NAME = "multi_degradation_improvements.json"


# -- scoring ----------------------------------------------------------------


def laplacian_variance(image: np.ndarray) -> float:
    """Variance of the Laplacian response; zero for any constant image."""
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        image = image.mean(axis=2)
    return float(np.var(ndimage.laplace(image)))


def inverse_mse(image: np.ndarray, reference: np.ndarray) -> float:
    """1 - mean squared error over [0,1] images; identical inputs score 1.0."""
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise InvalidInputError(
            f"image shape {image.shape} does not match reference {reference.shape}"
        )
    return float(1.0 - np.mean((image - reference) ** 2))


@dataclass(frozen=True)
class MetricSpec:
    """A named metric with direction, reference requirement, and scorer.

    ``scorer`` may be None for report-only specs (direction bookkeeping for
    scores computed elsewhere).
    """

    name: str
    direction: str
    kind: str
    scorer: Callable[..., float] | None = None

    def __post_init__(self) -> None:
        if self.direction not in (HIGHER_BETTER, LOWER_BETTER):
            raise InvalidInputError(f"unknown direction {self.direction!r}")
        if self.kind not in (NO_REFERENCE, FULL_REFERENCE):
            raise InvalidInputError(f"unknown metric kind {self.kind!r}")
        if not self.name:
            raise InvalidInputError("metric name must be non-empty")


class MetricRegistry:
    """Uniquely named metrics; scoring dispatches to the registered scorer."""

    def __init__(self) -> None:
        self._specs: dict[str, MetricSpec] = {}

    def register(self, spec: MetricSpec) -> None:
        if spec.name in self._specs:
            raise DuplicateRegistrationError(f"metric {spec.name!r} already registered")
        self._specs[spec.name] = spec

    def get(self, name: str) -> MetricSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise NotFoundError(f"metric {name!r} not registered") from None

    def names(self, kind: str | None = None) -> list[str]:
        return [n for n, s in self._specs.items() if kind is None or s.kind == kind]

    def score(
        self, name: str, image: np.ndarray, reference: np.ndarray | None = None
    ) -> float:
        spec = self.get(name)
        if spec.scorer is None:
            raise ScorerFaultError(name, "metric has no scorer attached")
        if spec.kind == FULL_REFERENCE:
            if reference is None:
                raise InvalidInputError(f"metric {name!r} requires a reference image")
            value = spec.scorer(image, reference)
        else:
            if reference is not None:
                raise InvalidInputError(f"metric {name!r} takes no reference image")
            value = spec.scorer(image)
        if not np.isfinite(value):
            raise ScorerFaultError(name, f"scorer returned non-finite value {value!r}")
        return float(value)


def default_registry() -> MetricRegistry:
    """Registry with the two stub scorers: 'sharpness' and 'fidelity'."""
    registry = MetricRegistry()
    registry.register(
        MetricSpec("sharpness", HIGHER_BETTER, NO_REFERENCE, laplacian_variance)
    )
    registry.register(MetricSpec("fidelity", HIGHER_BETTER, FULL_REFERENCE, inverse_mse))
    return registry


# -- improvement percentages -------------------------------------------------


def improvement_pct(base: float, ours: float, direction: str) -> float:
    """Signed percentage gain of ``ours`` over ``base``.

    lower_better: (base - ours) / base * 100
    higher_better: (ours - base) / base * 100
    """
    if direction not in (HIGHER_BETTER, LOWER_BETTER):
        raise InvalidInputError(f"unknown direction {direction!r}")
    if base == 0:
        raise UndefinedImprovementError("improvement undefined for base score 0")
    if direction == LOWER_BETTER:
        return (base - ours) / base * 100.0
    return (ours - base) / base * 100.0


# -- reports ------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    """Per-method per-bucket means plus improvements against a baseline.

    ``means``/``sample_counts``/``improvements`` are nested as
    method -> bucket -> metric. Empty cells hold None (rendered "n/a"),
    never zero.
    """

    baseline: str
    methods: tuple[str, ...]
    buckets: tuple[str, ...]
    metrics: tuple[str, ...]
    means: dict
    sample_counts: dict
    improvements: dict

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "methods": list(self.methods),
            "buckets": list(self.buckets),
            "metrics": list(self.metrics),
            "means": self.means,
            "sample_counts": self.sample_counts,
            "improvements": self.improvements,
        }

    def to_text(self) -> str:
        """Aligned per-bucket table with an improvement row per method."""
        name_w = max([len(m) for m in self.methods] + [24]) + 2
        col_w = max([len(m) for m in self.metrics] + [10]) + 2
        lines = []
        for bucket in self.buckets:
            lines.append(f"[{bucket}]")
            header = " " * name_w + "".join(m.rjust(col_w) for m in self.metrics)
            lines.append(header)
            for method in self.methods:
                cells = []
                for metric in self.metrics:
                    mean = self.means[method][bucket][metric]
                    cells.append(("n/a" if mean is None else f"{mean:.4f}").rjust(col_w))
                lines.append(method.ljust(name_w) + "".join(cells))
                if method == self.baseline:
                    continue
                cells = []
                for metric in self.metrics:
                    pct = self.improvements[method][bucket][metric]
                    cells.append(("n/a" if pct is None else f"{pct:.1f}%").rjust(col_w))
                lines.append(f"  vs {self.baseline}".ljust(name_w) + "".join(cells))
            lines.append("")
        return "\n".join(lines)


def _load_manifest_rows(manifest) -> list[dict]:
    if isinstance(manifest, (str, Path)):
        rows = []
        with Path(manifest).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rows.append(json.loads(line))
        return rows
    return list(manifest)


def build_report(
    manifest,
    baseline_id: str,
    metrics: list[MetricSpec],
) -> MetricReport:
    """Aggregate a results manifest into means and improvement percentages.

    ``manifest`` is a JSONL path or an iterable of rows shaped
    {"method", "image_id", "bucket", "metric_name", "score"}.
    """
    rows = [r for r in _load_manifest_rows(manifest) if "metric_name" in r]
    if not rows:
        raise InvalidInputError("results manifest holds no score rows")
    specs = {m.name: m for m in metrics}
    metric_names = tuple(specs)

    methods_seen = []
    buckets_seen = []
    sums: dict[tuple, float] = {}
    counts: dict[tuple, int] = {}
    for row in rows:
        name = row["metric_name"]
        if name not in specs:
            continue
        score = float(row["score"])
        if not np.isfinite(score):
            raise ScorerFaultError(name, f"non-finite score for image {row.get('image_id')}")
        method, bucket = row["method"], row["bucket"]
        if method not in methods_seen:
            methods_seen.append(method)
        if bucket not in buckets_seen:
            buckets_seen.append(bucket)
        key = (method, bucket, name)
        sums[key] = sums.get(key, 0.0) + score
        counts[key] = counts.get(key, 0) + 1

    if baseline_id not in methods_seen:
        raise NotFoundError(f"baseline {baseline_id!r} absent from manifest")
    methods = tuple([baseline_id] + [m for m in methods_seen if m != baseline_id])
    level_order = {level: i for i, level in enumerate(DEGRADATION_LEVELS)}
    buckets = tuple(sorted(buckets_seen, key=lambda b: (level_order.get(b, 99), b)))

    means: dict = {}
    sample_counts: dict = {}
    for method in methods:
        means[method] = {}
        sample_counts[method] = {}
        for bucket in buckets:
            means[method][bucket] = {}
            sample_counts[method][bucket] = {}
            for name in metric_names:
                key = (method, bucket, name)
                n = counts.get(key, 0)
                means[method][bucket][name] = sums[key] / n if n else None
                sample_counts[method][bucket][name] = n

    improvements: dict = {}
    for method in methods:
        if method == baseline_id:
            continue
        improvements[method] = {}
        for bucket in buckets:
            improvements[method][bucket] = {}
            for name in metric_names:
                base = means[baseline_id][bucket][name]
                ours = means[method][bucket][name]
                if base is None or ours is None:
                    improvements[method][bucket][name] = None
                else:
                    improvements[method][bucket][name] = improvement_pct(
                        base, ours, specs[name].direction
                    )

    return MetricReport(
        baseline=baseline_id,
        methods=methods,
        buckets=buckets,
        metrics=metric_names,
        means=means,
        sample_counts=sample_counts,
        improvements=improvements,
    )


def write_report(report: MetricReport, json_path: str | Path, txt_path: str | Path) -> None:
    atomic_write_text(json_path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(txt_path, report.to_text() + "\n")


# -- published improvement fixture --------------------------------------------


def load_improvement_fixture(path: str | Path | None = None) -> dict:
    """The packaged per-bucket score fixture, or one from an explicit path."""
    if path is not None:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    source = importlib.resources.files("rescap.fixtures") / IMPROVEMENT_FIXTURE_NAME
    return json.loads(source.read_text(encoding="utf-8"))


@dataclass(frozen=True)
class FixtureCell:
    method: str
    bucket: str
    metric: str
    computed_pct: float
    printed_pct: float


def fixture_improvement_cells(fixture: dict | None = None) -> list[FixtureCell]:
    """Recompute every enhanced cell's improvement and pair it with the print."""
    fixture = fixture or load_improvement_fixture()
    directions = fixture["metrics"]
    cells = []
    for group in fixture["groups"]:
        base_scores = group["scores"][group["baseline"]]
        ours_scores = group["scores"][group["enhanced"]]
        for bucket in fixture["buckets"]:
            for metric, direction in directions.items():
                computed = improvement_pct(
                    base_scores[bucket][metric], ours_scores[bucket][metric], direction
                )
                cells.append(
                    FixtureCell(
                        method=group["enhanced"],
                        bucket=bucket,
                        metric=metric,
                        computed_pct=computed,
                        printed_pct=group["printed_improvement_pct"][bucket][metric],
                    )
                )
    return cells


def fixture_report(fixture: dict | None = None) -> list[MetricReport]:
    """One report per fixture group, built through the normal report path."""
    fixture = fixture or load_improvement_fixture()
    specs = [
        MetricSpec(name, direction, NO_REFERENCE)
        for name, direction in fixture["metrics"].items()
    ]
    reports = []
    for group in fixture["groups"]:
        rows = []
        for method, per_bucket in group["scores"].items():
            for bucket, per_metric in per_bucket.items():
                for metric, score in per_metric.items():
                    rows.append(
                        {
                            "method": method,
                            "image_id": f"{method}-{bucket}",
                            "bucket": bucket,
                            "metric_name": metric,
                            "score": score,
                        }
                    )
        reports.append(build_report(rows, group["baseline"], specs))
    return reports


# -- ablation variants ---------------------------------------------------------


VARIANT_IDS = ("ours", "min_len", "max_len", "low_rel", "harmful_des")

MIN_LEN_WORDS = 80
MAX_LEN_WORDS = 440


@dataclass(frozen=True)
class AblationVariant:
    """One caption-pipeline configuration for the ablation study.

    ours: the captioner picks the length itself (adaptive).
    min_len / max_len: fixed 80 / 440 word budgets.
    low_rel: adaptive length, then a seeded fraction of words swapped for
    fillers. harmful_des: adaptive length with the harmful filter disabled.
    """

    id: str
    perturb_ratio: float = 0.5

    def __post_init__(self) -> None:
        if self.id not in VARIANT_IDS:
            raise InvalidInputError(f"variant id must be one of {VARIANT_IDS}, got {self.id!r}")
        if not 0.0 <= self.perturb_ratio <= 1.0:
            raise InvalidInputError(f"perturb_ratio must be in [0, 1], got {self.perturb_ratio}")


def _variant_caption(
    variant: AblationVariant,
    pair: PairRecord,
    captioner: CaptionerClient,
    lq_png: bytes,
    lexicon: HarmfulLexicon,
    seed: int,
) -> CaptionRecord:
    if variant.id == "min_len":
        prompt = render_length_prompt(MIN_LEN_WORDS)
    elif variant.id == "max_len":
        prompt = render_length_prompt(MAX_LEN_WORDS)
    else:
        prompt = cot_prompt()
    cot = captioner.caption(pair.meta.image_id, prompt, lq_png)
    if variant.id == "harmful_des":
        # Filter intentionally skipped: the raw description goes through
        # unpartitioned, so the restore gate sees no degradation spans.
        return CaptionRecord.from_text(
            cot.description, declared_token_length=cot.predicted_length
        )
    filtered = filter_harmful(CaptionRecord.from_text(cot.description), lexicon)
    if filtered.degradation_part:
        content = filtered.content_part or "image"
        record = CaptionRecord.from_text(
            content, declared_token_length=stub_token_length(content)
        )
    else:
        record = CaptionRecord.from_text(
            cot.description, declared_token_length=cot.predicted_length
        )
    if variant.id == "low_rel":
        record = perturb_relevance(
            record, variant.perturb_ratio, stable_seed(seed, "low_rel", pair.pair_id)
        )
    return record


def run_ablation(
    variant: AblationVariant,
    pairs: list[PairRecord],
    captioner: CaptionerClient,
    restorer: RestorationClient,
    backend_id: str,
    registry: MetricRegistry,
    seed: int = 0,
    lexicon: HarmfulLexicon | None = None,
) -> list[dict]:
    """Restore every pair under one variant and score all no-reference metrics.

    Returns results-manifest rows; per-pair failures become rows carrying an
    "error" key instead of scores.
    """
    lexicon = lexicon or default_harmful_lexicon()
    metric_names = registry.names(kind=NO_REFERENCE)
    rows: list[dict] = []
    for pair in pairs:
        base = {
            "method": variant.id,
            "image_id": pair.meta.image_id,
            "bucket": pair.meta.degradation_level,
        }
        if variant.id == "harmful_des":
            base["gate_disabled"] = True
        try:
            lq_png = (restorer.run_dir / pair.lq_ref).read_bytes()
            caption = _variant_caption(variant, pair, captioner, lq_png, lexicon, seed)
            declared = caption.declared_token_length or stub_token_length(caption.text)
            result = restorer.restore(
                RestorationRequest(
                    image_id=pair.meta.image_id,
                    lq_image_ref=pair.lq_ref,
                    caption=caption,
                    token_repeat_k=richness_schedule(max(declared, 77)),
                    backend=backend_id,
                    seed=stable_seed(seed, variant.id, pair.pair_id),
                )
            )
            restored = png_to_array((restorer.run_dir / result.restored_image_ref).read_bytes())
            for name in metric_names:
                rows.append(
                    dict(base, metric_name=name, score=registry.score(name, restored))
                )
        except Exception as exc:
            rows.append(dict(base, error=f"{type(exc).__name__}: {exc}"))
    return rows


# -- richness sweep -------------------------------------------------------------


def richness_sweep(
    lq_image_ref: str,
    caption: CaptionRecord,
    k_values: list[int],
    restorer: RestorationClient,
    backend_id: str,
    registry: MetricRegistry,
    seed: int = 0,
    csv_path: str | Path | None = None,
) -> list[dict]:
    """Restore one image at several repeat counts and score each result.

    One row per k: {"k", "token_length", <metric>: score, ...}; failures get
    an "error" key inline. Optionally writes a CSV with a header row plus one
    row per k.
    """
    if not k_values:
        raise InvalidInputError("k_values must be non-empty")
    metric_names = registry.names(kind=NO_REFERENCE)
    rows: list[dict] = []
    for k in k_values:
        row: dict = {"k": k, "token_length": effective_token_length(k)}
        try:
            result = restorer.restore(
                RestorationRequest(
                    image_id=f"sweep-k{k}",
                    lq_image_ref=lq_image_ref,
                    caption=caption,
                    token_repeat_k=k,
                    backend=backend_id,
                    seed=seed,
                )
            )
            restored = png_to_array((restorer.run_dir / result.restored_image_ref).read_bytes())
            for name in metric_names:
                row[name] = registry.score(name, restored)
        except Exception as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    if csv_path is not None:
        _write_sweep_csv(rows, metric_names, csv_path)
    return rows


def _write_sweep_csv(rows: list[dict], metric_names: list[str], csv_path: str | Path) -> None:
    csv_path = Path(csv_path)
    tmp = csv_path.with_name(csv_path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "token_length", *metric_names])
        for row in rows:
            writer.writerow(
                [row["k"], row["token_length"]]
                + [row.get(name, "") for name in metric_names]
            )
    os.replace(tmp, csv_path)
