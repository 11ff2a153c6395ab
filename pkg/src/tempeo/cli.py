"""Command line entry point: ``tempeo build | eval | report | fixtures | oracle | adapt``."""
from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from ._util import dumps_line
from .ingest import REMAINDER_POLICIES, TILE_SIZE, IngestError, SourceDescriptor

log = logging.getLogger("tempeo")

FIXTURE_CACHE_ENV = "TEMPEO_FIXTURE_CACHE"


class JsonLineHandler(logging.Handler):
    """One JSON object per record: level, logger, message and any ``event`` extras."""

    def __init__(self, stream):
        super().__init__()
        self.stream = stream

    def emit(self, record):
        entry = {"level": record.levelname, "logger": record.name, "message": record.getMessage()}
        entry.update(getattr(record, "event", {}) or {})
        self.stream.write(dumps_line(entry))
        self.stream.flush()


def _setup_logging(log_json, verbose):
    root = logging.getLogger()
    root.handlers.clear()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    human = logging.StreamHandler(sys.stderr)
    human.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(human)
    if log_json:
        root.addHandler(JsonLineHandler(open(log_json, "a", encoding="utf-8")))


def _fail(kind, err):
    log.error("%s", err, extra={"event": {"event": "error", "kind": kind, "detail": str(err)}})
    raise click.ClickException(str(err))


def _load_corpus(path):
    from .taskgen import ConversationRecord

    with open(path, encoding="utf-8") as fh:
        return [ConversationRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps_line(row))


@click.group()
@click.option("--log-json", type=click.Path(dir_okay=False), envvar="TEMPEO_LOG_JSON",
              help="Append machine-readable JSON-lines logs to this file.")
@click.option("-v", "--verbose", is_flag=True)
def main(log_json, verbose):
    """Temporal Earth-observation instruction data and evaluation toolkit."""
    _setup_logging(log_json, verbose)


@main.command()
@click.option("--source", "sources", multiple=True, required=True, help="kind=root[:split]; repeatable.")
@click.option("--seed", type=int, required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Corpus JSONL.")
@click.option("--manifest", type=click.Path(dir_okay=False), help="Manifest JSON (default: <out>.manifest.json).")
@click.option("--mix", type=click.Path(exists=True, dir_okay=False),
              help="JSON {source kind: {task: weight}}; uniform over eligible tasks when absent.")
@click.option("--max-images", type=int, default=8, show_default=True)
@click.option("--metadata-prob", type=float, default=0.5, show_default=True)
@click.option("--subseq-prob", type=float, default=0.3, show_default=True)
@click.option("--tile-size", type=int, default=TILE_SIZE, show_default=True)
@click.option("--remainder", type=click.Choice(REMAINDER_POLICIES), default="anchor", show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def build(sources, seed, out, manifest, mix, max_images, metadata_prob, subseq_prob, tile_size, remainder, workers):
    """Build an instruction-following corpus from one or more sources."""
    from .taskgen import BuildConfig, emit_corpus

    try:
        descs = [SourceDescriptor.parse(s) for s in sources]
        for d in descs:
            if not d.base.is_dir():
                raise IngestError(d.base, "source directory not found")
        mix_spec = json.loads(Path(mix).read_text()) if mix else None
        cfg = BuildConfig(seed, mix_spec, max_images, metadata_prob, subseq_prob, tile_size, remainder)
        man: dict = {}
        _write_jsonl(out, (r.to_json() for r in emit_corpus(descs, cfg, workers, man)))
    except (IngestError, ValueError, OSError) as e:
        _fail("build", e)
    man_path = manifest or f"{out}.manifest.json"
    Path(man_path).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    log.info("wrote %d records to %s", man["total"], out,
             extra={"event": {"event": "build", "records": man["total"], "tiling": man["tiling"]}})


@main.command("eval")
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--predictions", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSONL {id, response_text, mask?}.")
@click.option("--out", type=click.Path(dir_okay=False), help="Write reports and coverage as JSON.")
def eval_cmd(corpus, predictions, out):
    """Score predictions against a corpus and print the metric table."""
    from .evaluate import EvalError, evaluate, load_predictions
    from .metrics import render_table, sort_reports

    try:
        result = evaluate(_load_corpus(corpus), load_predictions(predictions))
    except (EvalError, ValueError, OSError) as e:
        _fail("eval", e)
    reports = sort_reports(result.reports)
    if out:
        payload = {"reports": [r.to_json() for r in reports], "coverage": result.coverage}
        Path(out).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    click.echo(render_table(reports), nl=False)
    log.info("evaluated %d records", result.coverage["records"],
             extra={"event": {"event": "eval", **result.coverage}})


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text", show_default=True)
def report(reports, fmt):
    """Render one or more eval outputs as a table grouped by task category."""
    from .metrics import MetricReport, render_table, reports_to_json

    rows = []
    for path in reports:
        data = json.loads(Path(path).read_text())
        items = data["reports"] if isinstance(data, dict) else data
        rows.extend(MetricReport.from_json(d) for d in items)
    if not rows:
        _fail("report", ValueError("no reports given"))
    click.echo(render_table(rows) if fmt == "text" else reports_to_json(rows), nl=fmt == "json")


@main.command()
@click.argument("out", required=False, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--scenes", "scene_counts", multiple=True, help="kind=n; repeatable. Unlisted kinds keep defaults.")
@click.option("--extent", "extents", multiple=True, help="kind=WxH for xbd, s2looking, qfabric.")
@click.option("--no-images", is_flag=True, help="Write empty placeholder image files.")
def fixtures(out, seed, scene_counts, extents, no_images):
    """Generate a synthetic source tree (default location: $TEMPEO_FIXTURE_CACHE)."""
    from .fixtures import FixtureConfig, make_fixtures

    out = out or os.environ.get(FIXTURE_CACHE_ENV)
    if not out:
        _fail("fixtures", ValueError(f"give an output directory or set {FIXTURE_CACHE_ENV}"))
    cfg = FixtureConfig(seed=seed, write_images=not no_images)
    try:
        for item in scene_counts:
            k, _, n = item.partition("=")
            cfg.scenes[k] = int(n)
        for item in extents:
            k, _, wh = item.partition("=")
            w, _, h = wh.lower().partition("x")
            cfg.extents[k] = (int(w), int(h))
        descs = make_fixtures(out, cfg)
    except ValueError as e:
        _fail("fixtures", e)
    for kind, d in descs.items():
        click.echo(f"{kind}={d.root}:{d.split}")


@main.command()
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--mode", type=click.Choice(["perfect", "noisy", "constant"]), default="perfect", show_default=True)
@click.option("--jitter", type=int, default=0)
@click.option("--flip-rate", type=float, default=0.0)
@click.option("--miss-rate", type=float, default=0.0)
@click.option("--constant", default="No damage.")
@click.option("--seed", type=int, default=0)
def oracle(corpus, out, mode, jitter, flip_rate, miss_rate, constant, seed):
    """Write synthetic predictions derived from the corpus ground truth."""
    from .respond import OracleSpec, oracle_respond

    try:
        spec = OracleSpec(mode, jitter, flip_rate, miss_rate, constant)
    except ValueError as e:
        _fail("oracle", e)
    records = _load_corpus(corpus)
    _write_jsonl(out, ({"id": r.id, "response_text": oracle_respond(r, spec, seed)} for r in records))


@main.command()
@click.option("--corpus", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--per-image", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSONL {id, image_index, boxes?, class?, answer?}.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
def adapt(corpus, per_image, out):
    """Combine per-image predictions into temporal predictions."""
    from .baseline import adapt_record, load_per_image

    try:
        preds = load_per_image(per_image)
        rows = []
        for rec in _load_corpus(corpus):
            if rec.id in preds:
                row = adapt_record(rec, preds[rec.id])
                if row is not None:
                    rows.append(row)
    except (ValueError, KeyError, OSError) as e:
        _fail("adapt", e)
    _write_jsonl(out, rows)
    log.info("adapted %d records", len(rows), extra={"event": {"event": "adapt", "records": len(rows)}})


if __name__ == "__main__":
    main()
