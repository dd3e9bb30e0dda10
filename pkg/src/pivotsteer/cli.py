"""Command-line entry point: ``pivotsteer <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from pivotsteer import __version__
from pivotsteer.data_io import (
    DEFAULT_PAIRS,
    ShortCorpusWarning,
    load_judgments,
    load_parallel,
    load_scores,
    load_template,
    write_scores,
)
from pivotsteer.geometry import emit_heatmap_data, emit_pca_data, vector_pca, vector_similarity
from pivotsteer.meta_eval import (
    AccuracyRow,
    ReportRow,
    build_report,
    corruption_accuracy,
    correlate,
    default_grid,
    sweep,
    sweep_rows,
)
from pivotsteer.metrics import METRICS, BatchScoringError, RegressionHead, batch_score
from pivotsteer.steering import (
    ARTIFACT_FORMAT_VERSION,
    METHODS,
    POLICIES,
    SteerConfig,
    atomic_write_text,
    extract_batch,
    extract_pooled_batch,
    learn_map,
    learn_vector,
    load_artifact,
    save_artifact,
)
from pivotsteer.synth import WorldSpec, default_spec, run_pivot_experiment
from pivotsteer.toy_model import CHECKPOINT_VERSION, Model, ModelConfig, build_model

log = logging.getLogger("pivotsteer")

REPORT_FORMAT_VERSION = 1
SCORES_FORMAT_VERSION = 1

REQUIRED = {
    "init-model": ("out",),
    "learn": ("model", "parallel", "method", "out"),
    "score": ("model", "metric", "items", "out"),
    "meta-eval": ("scores", "judgments", "out"),
    "sweep": ("model", "metric", "items", "artifact", "out"),
    "analyze": ("artifacts", "out"),
    "simulate": ("out",),
}


class UsageError(Exception):
    pass


def _parse_grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated numbers, got {text!r}")


def _parse_layers(text: str):
    if text == "all":
        return "all"
    try:
        return frozenset(int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("layers must be 'all' or comma-separated ints")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pivotsteer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=(
        f"pivotsteer {__version__} (artifact format {ARTIFACT_FORMAT_VERSION}, "
        f"checkpoint format {CHECKPOINT_VERSION}, report format {REPORT_FORMAT_VERSION}, "
        f"scores format {SCORES_FORMAT_VERSION})"))
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file of defaults; command-line flags win")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return sp

    sp = common(sub.add_parser("init-model", help="build a seeded toy model checkpoint"))
    sp.add_argument("--kind", choices=("decoder", "encoder"), default="decoder")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--layers", type=int, default=4)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--d-ff", type=int, default=256)
    sp.add_argument("--max-seq", type=int, default=512)
    sp.add_argument("--out")

    sp = common(sub.add_parser("learn", help="learn a steering artifact from parallel data"))
    sp.add_argument("--model")
    sp.add_argument("--parallel")
    sp.add_argument("--src-lang", default="src")
    sp.add_argument("--tgt-lang", default="en")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--ridge", type=float, default=None,
                    help="ridge weight (default 1e-6 * trace(X^T X) / d per layer)")
    sp.add_argument("--pairs", type=int, default=DEFAULT_PAIRS)
    sp.add_argument("--policy", choices=POLICIES, default="mean-pool")
    sp.add_argument("--pool-only", action="store_true",
                    help="learn on the encoder pooled vector (COMET-style steering)")
    sp.add_argument("--out")

    sp = common(sub.add_parser("score", help="score judgment items with a metric"))
    sp.add_argument("--model")
    sp.add_argument("--metric", choices=METRICS)
    sp.add_argument("--template")
    sp.add_argument("--items")
    sp.add_argument("--artifact")
    sp.add_argument("--method", choices=METHODS)
    sp.add_argument("--strength", type=float, default=None)
    sp.add_argument("--layers", type=_parse_layers, default="all")
    sp.add_argument("--unclamped", action="store_true", help="use h + sigma * W h for maps")
    sp.add_argument("--head-seed", type=int, default=0)
    sp.add_argument("--out")

    sp = common(sub.add_parser("meta-eval", help="correlate scores with human judgments"))
    sp.add_argument("--scores", nargs="+")
    sp.add_argument("--judgments")
    sp.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.json")

    sp = common(sub.add_parser("sweep", help="sweep steering strength and pick the oracle best"))
    sp.add_argument("--model")
    sp.add_argument("--metric", choices=METRICS)
    sp.add_argument("--template")
    sp.add_argument("--items")
    sp.add_argument("--artifact")
    sp.add_argument("--grid", type=_parse_grid, default=None)
    sp.add_argument("--layers", type=_parse_layers, default="all")
    sp.add_argument("--head-seed", type=int, default=0)
    sp.add_argument("--out", help="output prefix; writes PREFIX.csv and PREFIX.json")

    sp = common(sub.add_parser("analyze", help="cosine similarity and PCA of steering vectors"))
    sp.add_argument("--artifacts", nargs="+")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--out", help="output directory")

    sp = common(sub.add_parser("simulate", help="run the synthetic pivot experiment"))
    sp.add_argument("--spec", help="world spec JSON (default: built-in four-language world)")
    sp.add_argument("--seeds", default="20", help="count N (seeds 0..N-1) or comma list")
    sp.add_argument("--out")
    return p


def _explicit_keys(argv: list[str]) -> set[str]:
    """Destinations the user actually typed (defaults suppressed)."""
    parser = build_parser()
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                for a in sp._actions:
                    a.default = argparse.SUPPRESS
    return set(vars(parser.parse_args(argv)))


def _merge_config(args, argv: list[str]):
    if not getattr(args, "config", None):
        return args
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8-sig"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}")
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    explicit = _explicit_keys(argv)
    for key, value in cfg.items():
        key = key.replace("-", "_")
        if not hasattr(args, key) or key in ("command", "config"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if key == "layers" and isinstance(value, list):
            value = frozenset(int(v) for v in value)
        if key not in explicit:
            setattr(args, key, value)
    return args


def _check_out(path: str | Path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    return path


def _file_id(path: str | Path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
    return f"{Path(path).name}:{digest}"


def cmd_init_model(args) -> int:
    out = _check_out(args.out, args.force)
    cfg = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=args.heads,
                      d_ff=args.d_ff, max_seq=args.max_seq, seed=args.seed, kind=args.kind)
    model = build_model(cfg)
    tmp = out.with_name(f".{out.name}.tmp")
    model.save(tmp)
    tmp.replace(out)
    print(f"wrote {args.kind} model {model.checksum[:12]} to {out}")
    return 0


def cmd_learn(args) -> int:
    out = _check_out(args.out, args.force)
    model = Model.load(args.model)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ShortCorpusWarning)
        pairs = load_parallel(args.parallel, args.src_lang, args.tgt_lang, args.pairs)
    notes = [str(w.message) for w in caught if issubclass(w.category, ShortCorpusWarning)]
    for n in notes:
        log.warning(n)
    src_txt = [p.source_text for p in pairs]
    tgt_txt = [p.target_text for p in pairs]
    if args.pool_only:
        src = extract_pooled_batch(model, src_txt, args.src_lang)
        tgt = extract_pooled_batch(model, tgt_txt, args.tgt_lang)
    else:
        src = extract_batch(model, src_txt, args.policy, args.src_lang)
        tgt = extract_batch(model, tgt_txt, args.policy, args.tgt_lang)
    provenance = {
        "corpus_id": _file_id(args.parallel),
        "model_checksum": model.checksum,
    }
    if notes:
        provenance["warnings"] = notes
    kw = dict(pool_only=args.pool_only, n_layers=model.config.n_layers, provenance=provenance)
    if args.method == "vector":
        art = learn_vector(src, tgt, **kw)
        if all(not np.any(v) for v in art.per_layer):
            log.warning("all steering vectors are zero (source and target representations coincide)")
    else:
        art = learn_map(src, tgt, args.ridge, **kw)
    save_artifact(art, out)
    print(f"learned {art.method} artifact {art.artifact_id}: {art.source_lang}->{art.target_lang}, "
          f"{art.provenance['pair_count']} pairs, policy {art.extraction_policy}, "
          f"model {model.checksum[:12]}, corpus {provenance['corpus_id']} -> {out}")
    return 0


def _scoring_inputs(args):
    model = Model.load(args.model)
    template = load_template(args.template) if args.template else None
    if args.metric != "comet" and template is None:
        raise UsageError(f"--template is required for metric {args.metric}")
    head = RegressionHead(model.config.d_model, seed=args.head_seed) if args.metric == "comet" else None
    items = load_judgments(args.items)
    return model, template, head, items


def _score_or_fail(model, metric, items, template, steer, head):
    try:
        return batch_score(model, metric, items, template, steer, head)
    except BatchScoringError as exc:
        for item_id, msg in exc.failures:
            log.error("item %s: %s", item_id, msg)
        raise


def cmd_score(args) -> int:
    out = _check_out(args.out, args.force)
    model, template, head, items = _scoring_inputs(args)
    steer = None
    if args.artifact:
        art = load_artifact(args.artifact)
        if args.method and args.method != art.method:
            raise UsageError(f"--method {args.method} but artifact method is {art.method}")
        if args.strength is None:
            raise UsageError("--strength is required with --artifact")
        steer = (art, SteerConfig(args.strength, args.layers, not args.unclamped))
    elif args.strength is not None or args.method:
        raise UsageError("--strength/--method need --artifact")
    records = _score_or_fail(model, args.metric, items, template, steer, head)
    if steer is not None and steer[1].strength == 0:
        # null steering is the baseline by construction; keep the file identical to it
        for r in records:
            r.steering = None
    write_scores(records, out)
    print(f"wrote {len(records)} score records to {out}")
    return 0


def _write_report(report, prefix: str, force: bool) -> None:
    csv_path = _check_out(f"{prefix}.csv", force)
    json_path = _check_out(f"{prefix}.json", force)
    atomic_write_text(csv_path, report.to_csv())
    atomic_write_text(json_path, report.to_json())
    if report.accuracy:
        acc_path = _check_out(f"{prefix}.accuracy.csv", force)
        atomic_write_text(acc_path, report.accuracy_csv())


def _cells(items):
    cells = defaultdict(list)
    for it in items:
        cells[(it.language, it.dimension)].append(it)
    return dict(sorted(cells.items()))


def _accuracy(records, cell_items):
    try:
        acc = corruption_accuracy(records, cell_items)
    except ValueError:
        return None
    n = sum(1 for it in cell_items if it.corrupted and it.paired_original_id in
            {i.item_id for i in cell_items})
    return acc, n


def meta_eval_report(records, items):
    """Report rows for score records grouped by (metric, steering setting)."""
    groups = defaultdict(list)
    for r in records:
        st = r.steering
        key = (r.metric_name, st["method"], float(st["strength"])) if st else (r.metric_name, None, 0.0)
        groups[key].append(r)
    rows, acc_rows = [], []
    for (metric, method, strength), recs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] or "", kv[0][2])):
        base = groups.get((metric, None, 0.0))
        if method is not None and base is None:
            raise ValueError(f"no unsteered {metric} scores to compare {method} steering against")
        for (lang, dim), cell in _cells(items).items():
            ids = {it.item_id for it in cell}
            mine = [r for r in recs if r.item_id in ids]
            if len(mine) < 2:
                continue
            steered = correlate(mine, cell)
            baseline = correlate([r for r in base if r.item_id in ids], cell) if method else steered
            rows.append(ReportRow(lang, dim, metric, method or "none", strength, baseline,
                                  steered, len(mine)))
            acc = _accuracy(mine, cell)
            if acc is not None:
                acc_rows.append(AccuracyRow(lang, dim, metric, method or "none", strength, *acc))
    return build_report(rows, acc_rows)


def cmd_meta_eval(args) -> int:
    items = load_judgments(args.judgments)
    records = [r for path in args.scores for r in load_scores(path)]
    report = meta_eval_report(records, items)
    _write_report(report, args.out, args.force)
    print(f"wrote {len(report.rows)} report rows to {args.out}.csv/.json")
    return 0


def cmd_sweep(args) -> int:
    model, template, head, items = _scoring_inputs(args)
    art = load_artifact(args.artifact)
    grid = args.grid if args.grid is not None else list(default_grid(art.method))
    if 0.0 not in grid:
        raise ValueError("grid must include the null strength 0")
    by_strength = {}
    for s in grid:
        by_strength[s] = _score_or_fail(model, args.metric, items, template,
                                        (art, SteerConfig(s, args.layers)), head)
    rows, acc_rows = [], []
    for (lang, dim), cell in _cells(items).items():
        ids = {it.item_id for it in cell}
        if len(ids) < 2:
            continue
        res = sweep(lambda s: correlate([r for r in by_strength[s] if r.item_id in ids], cell), grid)
        rows.extend(sweep_rows(res, lang, dim, args.metric, art.method, len(ids)))
        for s in grid:
            acc = _accuracy([r for r in by_strength[s] if r.item_id in ids], cell)
            if acc is not None:
                acc_rows.append(AccuracyRow(lang, dim, args.metric, art.method, s, *acc))
        print(f"{lang}/{dim}: baseline r={res.baseline_r:.4f}, oracle strength "
              f"{res.best.strength:g} r={res.best.steered_r:.4f}")
    report = build_report(rows, acc_rows)
    _write_report(report, args.out, args.force)
    return 0


def cmd_analyze(args) -> int:
    if len(args.artifacts) < 2:
        raise ValueError("need >= 2 artifacts")
    arts = [load_artifact(p) for p in args.artifacts]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = vector_similarity(arts, args.layer)
    rows = vector_pca(arts, args.layer)
    sim_path = _check_out(out / f"similarity_layer{args.layer}.csv", args.force)
    pca_path = _check_out(out / f"pca_layer{args.layer}.csv", args.force)
    emit_heatmap_data(sim, sim_path)
    emit_pca_data(rows, pca_path)
    print(f"wrote {sim_path} and {pca_path}")
    return 0


def _parse_seeds(text) -> list[int]:
    if isinstance(text, int):
        return list(range(text))
    if isinstance(text, list):
        return [int(s) for s in text]
    if "," in text:
        return [int(s) for s in text.split(",") if s.strip()]
    return list(range(int(text)))


def cmd_simulate(args) -> int:
    out = _check_out(args.out, args.force)
    spec = default_spec()
    if args.spec:
        spec = WorldSpec.from_dict(json.loads(Path(args.spec).read_text(encoding="utf-8-sig")))
    try:
        seeds = _parse_seeds(args.seeds)
    except ValueError:
        raise UsageError(f"--seeds must be a count or comma list, got {args.seeds!r}")
    table = run_pivot_experiment(seeds, spec)
    atomic_write_text(out, table.to_csv())
    print(table.summary())
    return 0


COMMANDS = {
    "init-model": cmd_init_model,
    "learn": cmd_learn,
    "score": cmd_score,
    "meta-eval": cmd_meta_eval,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        args = _merge_config(args, argv)
        missing = [f"--{k.replace('_', '-')}" for k in REQUIRED[args.command]
                   if getattr(args, k.replace("-", "_"), None) in (None, [])]
        if missing:
            raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pivotsteer: error: {exc}", file=sys.stderr)
        return 2
    except BatchScoringError as exc:
        print(f"pivotsteer: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"pivotsteer: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
