"""Command-line entry point.

Every command is deterministic given (config, seed) when using the stub
backends. Configuration precedence is flags > RESCAP_* environment > JSON
config file. Exit codes: 0 success, 1 partial or operational failure (a
summary still prints), 2 configuration or input error. Logs go to stderr,
data to stdout.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .config import RunConfig, load_config
from .cot_captioner import (
    CaptionerClient,
    CoTCaption,
    HttpCaptionerClient,
    LengthAnnotation,
    StubCaptioner,
    cot_prompt,
    emit_cot,
    mean_offset,
    parse_cot,
    render_length_prompt,
    stub_token_length,
)
from .errors import (
    ConfigError,
    InvalidInputError,
    NotFoundError,
    ToolkitError,
)
from .evaluation import (
    VARIANT_IDS,
    AblationVariant,
    MetricSpec,
    build_report,
    default_registry,
    fixture_report,
    load_improvement_fixture,
    richness_sweep,
    run_ablation,
    write_report,
)
from .pipeline import (
    DataPipeline,
    HqImage,
    LengthSchedule,
    PairRecord,
)
from .restoration import RestorationClient
from .text_conditioning import (
    CaptionRecord,
    default_harmful_lexicon,
    encode_stub,
    extend_richness,
    filter_harmful,
    perturb_relevance,
    richness_schedule,
)

_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Input/precondition problems are configuration-class failures (exit 2);
# operational failures during otherwise valid runs exit 1.
_CONFIG_ERRORS = (ConfigError, InvalidInputError, NotFoundError)


def _die(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _emit(data: dict) -> None:
    click.echo(json.dumps(data, sort_keys=True))


def _exit_for(exc: ToolkitError) -> None:
    from .errors import CoTParseError, DuplicateRegistrationError

    if isinstance(exc, (_CONFIG_ERRORS, CoTParseError, DuplicateRegistrationError)):
        _die(2, str(exc))
    _die(1, str(exc))


def _config(config_path, **overrides) -> RunConfig:
    try:
        return load_config(config_path, **overrides)
    except ConfigError as exc:
        _die(2, str(exc))
        raise AssertionError("unreachable")


def _config_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="JSON config file.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Master seed.")(fn)
    fn = click.option("--run-dir", default=None, help="Run directory (overrides root/id).")(fn)
    fn = click.option("--run-id", default=None, help="Run id under the run root.")(fn)
    return fn


def _pipeline_for(cfg: RunConfig) -> DataPipeline:
    run_path = cfg.resolved_run_dir()
    run_path.mkdir(parents=True, exist_ok=True)
    return DataPipeline(
        run_path,
        cfg.seed,
        schedule=LengthSchedule(cfg.word_targets),
        lexicon=default_harmful_lexicon(cfg.harmful_scope),
        export_target=cfg.export_target,
    )


def _captioner_for(cfg: RunConfig, pairs: list[PairRecord]) -> CaptionerClient:
    if cfg.captioner_endpoint:
        return HttpCaptionerClient(cfg.captioner_endpoint)
    manifest = {p.meta.image_id: p.meta.degradation_level for p in pairs}
    return StubCaptioner(manifest, seed=cfg.seed)


def _restorer_for(cfg: RunConfig) -> RestorationClient:
    client = RestorationClient(cfg.resolved_run_dir(), max_workers=cfg.jobs)
    for backend_id, endpoint in cfg.backends.items():
        client.register_backend(backend_id, endpoint)
    return client


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def main() -> None:
    """Caption-conditioning toolkit for diffusion-based image restoration."""


# -- text utilities -------------------------------------------------------------


@main.command("extend-tokens")
@click.option("--text", required=True, help="Caption text to encode.")
@click.option("--k", type=int, default=None, help="Number of 20-token repeats.")
@click.option("--target-tokens", type=int, default=None,
              help="Pick k so the extended length lands nearest this target.")
@click.option("--dim", type=int, default=16, show_default=True,
              help="Stub embedding width.")
def extend_tokens_cmd(text: str, k: int | None, target_tokens: int | None, dim: int) -> None:
    """Encode TEXT with the stub encoder and lengthen its token window."""
    if (k is None) == (target_tokens is None):
        _die(2, "provide exactly one of --k / --target-tokens")
    try:
        if target_tokens is not None:
            k = richness_schedule(target_tokens)
        seq = encode_stub(text, dim)
        extended = extend_richness(seq, k)
    except ToolkitError as exc:
        _exit_for(exc)
        return
    _emit(
        {
            "k": k,
            "length": extended.length,
            "eos_index": extended.eos_index,
            "dim": extended.dim,
        }
    )


@main.command("perturb")
@click.option("--text", required=True, help="Caption text to perturb.")
@click.option("--ratio", type=float, required=True, help="Fraction of words to replace.")
@click.option("--seed", type=int, default=0, show_default=True)
def perturb_cmd(text: str, ratio: float, seed: int) -> None:
    """Replace a seeded fraction of words with non-meaningful fillers."""
    try:
        record = perturb_relevance(CaptionRecord.from_text(text), ratio, seed)
    except ToolkitError as exc:
        _exit_for(exc)
        return
    _emit(
        {
            "text": record.text,
            "replaced": int(ratio * record.word_count),
            "word_count": record.word_count,
        }
    )


@main.command("filter-harmful")
@click.option("--text", required=True, help="Caption text to partition.")
@click.option("--scope", type=click.Choice(["phrase", "clause", "sentence"]),
              default="sentence", show_default=True)
def filter_harmful_cmd(text: str, scope: str) -> None:
    """Split a caption into content and degradation/photography spans."""
    try:
        record = filter_harmful(CaptionRecord.from_text(text), default_harmful_lexicon(scope))
    except ToolkitError as exc:
        _exit_for(exc)
        return
    _emit(
        {
            "content_part": record.content_part,
            "degradation_part": list(record.degradation_part),
            "matched": bool(record.degradation_part),
        }
    )


# -- captioning -------------------------------------------------------------------


@main.command("caption")
@click.option("--image-id", required=True, help="Identifier sent to the captioner.")
@click.option("--level", type=click.Choice(["light", "moderate", "heavy"]), default=None,
              help="Degradation level (required for the stub captioner).")
@click.option("--words", type=int, default=None,
              help="Ask for about this many words; omit to let the captioner choose.")
@click.option("--endpoint", default=None, help="HTTP captioner endpoint; omit for stub.")
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Image file to send to an HTTP captioner.")
@click.option("--seed", type=int, default=0, show_default=True)
def caption_cmd(image_id, level, words, endpoint, image_path, seed) -> None:
    """Produce one length-first caption and print it."""
    if endpoint:
        client: CaptionerClient = HttpCaptionerClient(endpoint)
    else:
        if level is None:
            _die(2, "--level is required when using the stub captioner")
        client = StubCaptioner({image_id: level}, seed=seed)
    prompt = render_length_prompt(words) if words else cot_prompt()
    png = Path(image_path).read_bytes() if image_path else None
    try:
        result = client.caption(image_id, prompt, png)
    except ToolkitError as exc:
        _exit_for(exc)
        return
    click.echo(emit_cot(result))


@main.command("offset-eval")
@click.option("--annotations", "annotations_path", type=click.Path(exists=True),
              required=True, help="JSONL: {image_id, optimal_length[, acceptable_lengths]}.")
@click.option("--predictions", "predictions_path", type=click.Path(exists=True),
              required=True, help="JSONL: {image_id, cot} or {image_id, predicted_length}.")
def offset_eval_cmd(annotations_path: str, predictions_path: str) -> None:
    """Mean offset level between annotated and predicted caption lengths."""
    try:
        annotations = []
        for row in _read_jsonl(annotations_path):
            annotations.append(
                LengthAnnotation(
                    image_id=row["image_id"],
                    optimal_length=int(row["optimal_length"]),
                    acceptable_lengths=tuple(row.get("acceptable_lengths", ())),
                )
            )
        predictions = {}
        for row in _read_jsonl(predictions_path):
            if "cot" in row:
                predictions[row["image_id"]] = parse_cot(row["cot"])
            else:
                predictions[row["image_id"]] = CoTCaption(
                    predicted_length=int(row["predicted_length"]), description="-"
                )
        value = mean_offset(annotations, predictions)
    except (ToolkitError, KeyError, ValueError) as exc:
        if isinstance(exc, ToolkitError):
            _exit_for(exc)
        _die(2, f"bad input row: {exc}")
        return
    _emit({"mean_offset": value, "count": len(annotations)})


# -- pipeline ---------------------------------------------------------------------


@main.command("gen-data")
@_config_options
@click.option("--hq", "hq_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory of HQ images.")
@click.option("--zooms", default=None, help="Comma-separated zoom ratios.")
@click.option("--degraders", "degraders_opt", default=None,
              help="Comma-separated registered degrader ids.")
@click.option("--source", type=click.Choice(["unsplash", "imagenet", "sam", "other"]),
              default="other", show_default=True)
@click.option("--device", default=None, help="Capture device tag.")
@click.option("--captions/--no-captions", default=True, show_default=True,
              help="Also generate the caption ladder per pair.")
@click.option("--captioner-endpoint", default=None)
def gen_data_cmd(config_path, seed, run_dir, run_id, hq_dir, zooms, degraders_opt,
                 source, device, captions, captioner_endpoint) -> None:
    """Generate LQ pairs (and optionally caption candidates) from HQ images."""
    cfg = _config(
        config_path,
        seed=seed,
        run_dir=run_dir,
        run_id=run_id,
        zoom_ratios=zooms,
        degraders=degraders_opt,
        captioner_endpoint=captioner_endpoint,
    )
    manifest = [
        HqImage(str(p), source=source, device=device)
        for p in sorted(Path(hq_dir).iterdir())
        if p.suffix.lower() in _IMAGE_SUFFIXES
    ]
    if not manifest:
        _die(2, f"no images ({', '.join(_IMAGE_SUFFIXES)}) found in {hq_dir}")
    pipeline = _pipeline_for(cfg)
    try:
        pairs = pipeline.generate_pairs(manifest, list(cfg.degraders), list(cfg.zoom_ratios))
    except ToolkitError as exc:
        _exit_for(exc)
        return
    candidates = 0
    warnings = 0
    if captions:
        captioner = _captioner_for(cfg, pairs)
        for i, pair in enumerate(pairs):
            updated = pipeline.generate_caption_candidates(pair, captioner)
            pairs[i] = updated
            candidates += len(updated.candidates)
            warnings += len(updated.warnings)
    _emit(
        {
            "run_dir": str(cfg.resolved_run_dir()),
            "run_id": cfg.resolved_run_id(),
            "pairs": len(pairs),
            "candidates": candidates,
            "warnings": warnings,
        }
    )
    if warnings:
        sys.exit(1)


@main.command("restore-batch")
@_config_options
@click.option("--backend", default="stub", show_default=True,
              help="Registered backend id to restore with.")
def restore_batch_cmd(config_path, seed, run_dir, run_id, backend) -> None:
    """Fan out one restoration per caption candidate for every pair."""
    cfg = _config(config_path, seed=seed, run_dir=run_dir, run_id=run_id)
    pipeline = _pipeline_for(cfg)
    restorer = _restorer_for(cfg)
    pairs = pipeline.store.load_pairs()
    if not pairs:
        _die(2, f"no pairs in {cfg.resolved_run_dir()}")
    restored = 0
    errors = 0
    skipped = 0
    for pair in pairs:
        if not pair.candidates:
            skipped += 1
            continue
        updated = pipeline.fanout_restorations(pair, restorer, backend)
        restored += sum(1 for c in updated.candidates if c.restoration is not None)
        errors += sum(1 for c in updated.candidates if c.error is not None)
    _emit({"pairs": len(pairs), "restored": restored, "errors": errors, "skipped": skipped})
    if errors:
        sys.exit(1)


@main.command("annotate-serve")
@_config_options
@click.option("--port", type=int, default=None, help="Listen port (default 8790).")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--ttl", type=int, default=None, help="Task lease TTL in seconds.")
@click.option("--ui-origin", default="*", show_default=True,
              help="CORS origin allowed to call the API.")
@click.option("--ui-dir", type=click.Path(), default=None,
              help="Built browser UI bundle to serve at /.")
@click.option("--api-base", default="", show_default=False,
              help="API origin the browser UI should call (default: same origin).")
def annotate_serve_cmd(config_path, seed, run_dir, run_id, port, host, ttl, ui_origin,
                       ui_dir, api_base) -> None:
    """Serve the annotation task queue over HTTP (long-running)."""
    import uvicorn

    from .service import create_app

    cfg = _config(config_path, seed=seed, run_dir=run_dir, run_id=run_id,
                  port=port, lease_ttl=ttl)
    run_path = cfg.resolved_run_dir()
    if not run_path.is_dir():
        _die(2, f"run directory missing: {run_path}")
    if ui_dir is not None and not Path(ui_dir).is_dir():
        _die(2, f"UI bundle directory missing: {ui_dir}")
    app = create_app(run_path, lease_ttl=cfg.lease_ttl, ui_origin=ui_origin,
                     ui_dir=ui_dir, api_base=api_base)
    click.echo(f"serving annotation queue for {run_path} on {host}:{cfg.port}", err=True)
    uvicorn.run(app, host=host, port=cfg.port, log_level="warning")


@main.command("export-train")
@_config_options
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Output JSONL (default <run>/export.jsonl).")
@click.option("--target", type=int, default=None, help="Pair-count goal to report against.")
@click.option("--limit", type=int, default=None,
              help="Cap the export, stratified across degradation levels.")
@click.option("--profile", type=click.Choice(["full", "finetune"]), default="full",
              show_default=True, help="finetune applies the small fine-tuning limit.")
@click.option("--holdout", default=None,
              help="Comma-separated degrader=zoom pairs excluded from export.")
def export_train_cmd(config_path, seed, run_dir, run_id, out_path, target, limit,
                     profile, holdout) -> None:
    """Export annotated pairs as length-first caption training lines."""
    cfg = _config(config_path, seed=seed, run_dir=run_dir, run_id=run_id)
    holdout_zooms = dict(cfg.holdout_zooms)
    if holdout:
        try:
            for item in holdout.split(","):
                degrader_id, zoom = item.split("=", 1)
                holdout_zooms[degrader_id.strip()] = float(zoom)
        except ValueError as exc:
            _die(2, f"bad --holdout entry: {exc}")
    if limit is None and profile == "finetune":
        limit = cfg.finetune_limit
    pipeline = _pipeline_for(cfg)
    try:
        summary = pipeline.export_training_set(
            out_path=out_path,
            target=target,
            limit=limit,
            holdout_zooms=holdout_zooms,
        )
    except ToolkitError as exc:
        _exit_for(exc)
        return
    _emit(summary.to_dict())


# -- evaluation -------------------------------------------------------------------


@main.command("evaluate")
@_config_options
@click.option("--variants", default=None,
              help=f"Comma-separated ablation variants from {', '.join(VARIANT_IDS)}.")
@click.option("--backend", default="stub", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Results manifest JSONL (default <run>/results.jsonl).")
@click.option("--perturb-ratio", type=float, default=None,
              help="Word-replacing ratio for the low_rel variant.")
def evaluate_cmd(config_path, seed, run_dir, run_id, variants, backend, out_path,
                 perturb_ratio) -> None:
    """Run ablation variants over a run's pairs and write a results manifest."""
    cfg = _config(config_path, seed=seed, run_dir=run_dir, run_id=run_id,
                  perturb_ratio=perturb_ratio)
    variant_ids = [v.strip() for v in (variants or cfg.variant).split(",") if v.strip()]
    bad = [v for v in variant_ids if v not in VARIANT_IDS]
    if bad:
        _die(2, f"unknown variants {bad}; choose from {list(VARIANT_IDS)}")
    pipeline = _pipeline_for(cfg)
    pairs = pipeline.store.load_pairs()
    if not pairs:
        _die(2, f"no pairs in {cfg.resolved_run_dir()}")
    captioner = _captioner_for(cfg, pairs)
    restorer = _restorer_for(cfg)
    registry = default_registry()
    rows: list[dict] = []
    for variant_id in variant_ids:
        rows.extend(
            run_ablation(
                AblationVariant(variant_id, perturb_ratio=cfg.perturb_ratio),
                pairs,
                captioner,
                restorer,
                backend,
                registry,
                seed=cfg.seed,
                lexicon=default_harmful_lexicon(cfg.harmful_scope),
            )
        )
    out = Path(out_path) if out_path else cfg.resolved_run_dir() / "results.jsonl"
    from .util import atomic_write_text

    atomic_write_text(out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    errors = sum(1 for r in rows if "error" in r)
    _emit({"rows": len(rows), "errors": errors, "out": str(out)})
    if errors:
        sys.exit(1)


def _parse_metric_specs(text: str) -> list[MetricSpec]:
    specs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, direction = item.partition(":")
        specs.append(MetricSpec(name, direction or "higher_better", "no_reference"))
    return specs


@main.command("report")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True), default=None,
              help="Results manifest JSONL to aggregate.")
@click.option("--baseline", default=None, help="Method id improvements are measured against.")
@click.option("--metrics", "metrics_opt",
              default="sharpness:higher_better,fidelity:higher_better", show_default=True,
              help="Comma-separated name:direction pairs.")
@click.option("--fixture", "fixture_path", default=None,
              help="Bundled-scores fixture path, or 'builtin' for the packaged one.")
@click.option("--json", "json_path", type=click.Path(), default=None,
              help="Write machine-readable report here.")
@click.option("--txt", "txt_path", type=click.Path(), default=None,
              help="Write the aligned text table here.")
def report_cmd(manifest_path, baseline, metrics_opt, fixture_path, json_path, txt_path) -> None:
    """Aggregate scores into per-bucket means and improvement percentages."""
    if (manifest_path is None) == (fixture_path is None):
        _die(2, "provide exactly one of --manifest / --fixture")
    try:
        if fixture_path is not None:
            fixture = load_improvement_fixture(
                None if fixture_path == "builtin" else fixture_path
            )
            reports = fixture_report(fixture)
        else:
            if not baseline:
                _die(2, "--baseline is required with --manifest")
            reports = [build_report(manifest_path, baseline, _parse_metric_specs(metrics_opt))]
    except (ToolkitError, OSError, ValueError, KeyError) as exc:
        if isinstance(exc, ToolkitError):
            _exit_for(exc)
        _die(2, f"cannot build report: {exc}")
        return
    text = "\n".join(r.to_text() for r in reports)
    click.echo(text)
    if manifest_path is not None and json_path is None and txt_path is None:
        base = Path(manifest_path).parent
        json_path, txt_path = base / "report.json", base / "report.txt"
    if json_path or txt_path:
        payload = reports[0] if len(reports) == 1 else None
        from .util import atomic_write_text

        if json_path:
            data = (
                payload.to_dict()
                if payload is not None
                else [r.to_dict() for r in reports]
            )
            atomic_write_text(json_path, json.dumps(data, indent=2, sort_keys=True) + "\n")
        if txt_path:
            atomic_write_text(txt_path, text + "\n")


@main.command("sweep")
@_config_options
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False),
              required=True, help="LQ image to restore at each repeat count.")
@click.option("--caption", required=True, help="Caption text to condition on.")
@click.option("--k", "k_opt", default="0,1,2,3,4,5", show_default=True,
              help="Comma-separated repeat counts.")
@click.option("--backend", default="stub", show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="CSV output (default <run>/sweep.csv).")
def sweep_cmd(config_path, seed, run_dir, run_id, image_path, caption, k_opt,
              backend, out_path) -> None:
    """Score restorations across token-repeat counts; write a CSV curve."""
    cfg = _config(config_path, seed=seed, run_dir=run_dir, run_id=run_id)
    try:
        k_values = [int(x) for x in k_opt.split(",") if x.strip()]
    except ValueError as exc:
        _die(2, f"bad --k list: {exc}")
        return
    filtered = filter_harmful(
        CaptionRecord.from_text(caption), default_harmful_lexicon(cfg.harmful_scope)
    )
    content = filtered.content_part or "image"
    record = CaptionRecord.from_text(content, declared_token_length=stub_token_length(content))
    restorer = _restorer_for(cfg)
    out = Path(out_path) if out_path else cfg.resolved_run_dir() / "sweep.csv"
    try:
        rows = richness_sweep(
            str(Path(image_path).resolve()),
            record,
            k_values,
            restorer,
            backend,
            default_registry(),
            seed=cfg.seed,
            csv_path=out,
        )
    except ToolkitError as exc:
        _exit_for(exc)
        return
    errors = sum(1 for r in rows if "error" in r)
    _emit({"rows": len(rows), "errors": errors, "csv": str(out)})
    if errors:
        sys.exit(1)


def _read_jsonl(path: str | Path) -> list[dict]:
    rows = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


if __name__ == "__main__":
    main()
