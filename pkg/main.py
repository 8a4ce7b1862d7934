import argparse
import logging
import sys
import time
from pathlib import Path

from behavior_dnn.configuration import load_configuration
from behavior_dnn.core.corpus_manager import SynthConfig, read_manifest, synth_corpus, write_synthetic_corpus
from behavior_dnn.core.errors import ConfigurationError, InputError
from behavior_dnn.core.feature_extractor import (FeatureExtractor, FeatureLayout, read_frames_csv, read_layout,
                                                 read_lld_csv, write_frames_csv)
from behavior_dnn.core.network import load_params, predict, save_params
from behavior_dnn.core.regime_trainer import Regime, run_cv, train_for_code
from behavior_dnn.core.session_evaluator import emit_trajectory, score_session
from behavior_dnn.core.summary_reporter import SummaryReporter, render_tables

logger = logging.getLogger("behavior_dnn")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2


def load_run_config(args):
    config = load_configuration(getattr(args, "config", None))
    if args.seed is not None:
        config.setdefault("training", {})["seed"] = args.seed
        config.setdefault("synth", {})["seed"] = args.seed
    return config


def _comma_list(values):
    items = []
    for value in values or []:
        items.extend(v.strip() for v in value.split(",") if v.strip())
    return items


def _layout_for(args, dimension):
    if getattr(args, "layout", None):
        layout = read_layout(args.layout)
    else:
        layout = FeatureLayout.default(dimension // 6)
    if layout.frame_dim != dimension:
        raise InputError(f"Layout describes {layout.frame_dim} frame columns, frame file has {dimension}")
    return layout


def cmd_synth(args):
    config = load_run_config(args)
    synth = SynthConfig.from_mapping(config.get("synth", {}))
    logger.info(f"🚀 Synthesizing {synth.num_couples} couples x {synth.sessions_per_couple} sessions...")
    corpus = synth_corpus(synth)
    paths = write_synthetic_corpus(corpus, args.out, synth.codes)
    speech = sum(stream.speech_duration for stream in corpus.streams)
    print(f"couples={synth.num_couples} sessions={len(corpus.records)} speech_seconds={speech:.2f}")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def cmd_extract(args):
    config = load_run_config(args)
    features = config.setdefault("features", {})
    for key, value in (("window_len", args.window), ("shift", args.shift), ("min_segment", args.min_segment),
                       ("time_axis", args.time_axis)):
        if value is not None:
            features[key] = value
    extractor = FeatureExtractor(config)
    layout = read_layout(args.layout) if args.layout else None
    streams = read_lld_csv(args.lld, layout=layout, hop=features.get("hop"))
    table = extractor.extract(streams)
    for line in extractor.report.lines():
        logger.info(line)
    if len(table) == 0:
        logger.warning("⚠️ No frames were extracted; writing an empty frame file")
    write_frames_csv(table, args.out)
    print(f"frames={len(table)} dimension={table.dimension} out={args.out}")
    return EXIT_OK


def _model_paths(model_out, models, regime):
    model_out = Path(model_out)
    if regime is not Regime.SUBNET:
        return [model_out]
    return [model_out.with_name(f"{model_out.stem}.{m.info['group']}{model_out.suffix or '.json'}") for m in models]


def cmd_train(args):
    start_time = time.time()
    config = load_run_config(args)
    regime = Regime(args.regime)
    config.setdefault("training", {})["regime"] = regime.value
    if regime in (Regime.SJ, Regime.SD_INIT) and not args.base_model:
        raise ConfigurationError(f"Regime {regime.value} needs --base-model pointing at a trained sd model")
    base_model = load_params(args.base_model) if args.base_model else None
    frames = read_frames_csv(args.frames)
    records = read_manifest(args.manifest)
    layout = _layout_for(args, frames.dimension)
    models, histories = train_for_code(frames, records, args.code, config, layout, base_model, args.gender)

    outputs = {}
    for model, path in zip(models, _model_paths(args.model_out, models, regime)):
        save_params(model, path)
        outputs[path.name] = path
        print(f"model: {path}")
    summary_log = [f"{regime.value}/{args.code}: final training loss {h.losses[-1]:.6f} after {h.epochs_run} epochs"
                   for h in histories]
    inputs = {"frames": Path(args.frames), "manifest": Path(args.manifest)}
    if args.base_model:
        inputs["base_model"] = Path(args.base_model)
    reporter = SummaryReporter(config, summary_log, config["training"].get("seed", 0), start_time, inputs)
    reporter.write_manifest(Path(args.model_out).with_suffix(".run.json"), outputs)
    return EXIT_OK


def cmd_cv(args):
    start_time = time.time()
    config = load_run_config(args)
    evaluation = config.get("evaluation", {})
    codes = _comma_list(args.codes) or list(evaluation.get("codes", []))
    regimes = _comma_list(args.regimes) or list(evaluation.get("regimes", []))
    try:
        regimes = [Regime(r) for r in regimes]
    except ValueError as e:
        raise ConfigurationError(f"{e}; known regimes: {[r.value for r in Regime]}") from e
    frames = read_frames_csv(args.frames)
    records = read_manifest(args.manifest)
    layout = _layout_for(args, frames.dimension)

    report = run_cv(frames, records, codes, regimes, config, layout, jobs=args.jobs)
    report_path = Path(args.report)
    inputs = {"frames": Path(args.frames), "manifest": Path(args.manifest)}
    reporter = SummaryReporter(config, report.summary_log, report.config.seed, start_time, inputs)
    reporter.write_report(report, report_path)
    table_path = reporter.write_tables(report, report_path.with_suffix(".txt"))
    reporter.write_manifest(report_path.with_suffix(".run.json"), {"report": report_path, "tables": table_path})
    print(render_tables(report.results))
    return EXIT_OK


def cmd_trajectory(args):
    frames = read_frames_csv(args.frames)
    session = frames.for_sessions([args.session])
    if len(session) == 0:
        raise InputError(f"Session {args.session!r} has no frames in {args.frames}")
    scores = {}
    for model_path in args.model:
        model = load_params(model_path)
        name = model.info.get("code") or Path(model_path).stem
        if name in scores:
            name = Path(model_path).stem
        scores[name] = score_session(args.session, predict(model, session.values), session.window_starts)
    table = emit_trajectory(scores, args.out)
    print(f"rows={len(table)} columns={list(table.columns)} out={args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="behavior-dnn",
                                     description="Behavior classification from acoustic functionals")
    parser.add_argument("--seed", type=int, default=None, help="run seed; overrides the configured seeds")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for cross-validation folds")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic LLD corpus and manifest")
    synth.add_argument("--config")
    synth.add_argument("--out", required=True)
    synth.set_defaults(handler=cmd_synth)

    extract = commands.add_parser("extract", help="LLD CSV -> frame feature CSV")
    extract.add_argument("--lld", required=True)
    extract.add_argument("--layout")
    extract.add_argument("--out", required=True)
    extract.add_argument("--window", type=float)
    extract.add_argument("--shift", type=float)
    extract.add_argument("--min-segment", type=float)
    extract.add_argument("--time-axis", choices=["speech", "wall"])
    extract.add_argument("--config")
    extract.set_defaults(handler=cmd_extract)

    train = commands.add_parser("train", help="train one regime for one behavior code")
    train.add_argument("--frames", required=True)
    train.add_argument("--manifest", required=True)
    train.add_argument("--regime", required=True, choices=[r.value for r in Regime if r is not Regime.FUSION])
    train.add_argument("--code", required=True)
    train.add_argument("--config")
    train.add_argument("--layout")
    train.add_argument("--gender", choices=["F", "M"])
    train.add_argument("--model-out", required=True)
    train.add_argument("--base-model")
    train.set_defaults(handler=cmd_train)

    cv = commands.add_parser("cv", help="leave-one-couple-out cross-validation")
    cv.add_argument("--frames", required=True)
    cv.add_argument("--manifest", required=True)
    cv.add_argument("--codes", nargs="+")
    cv.add_argument("--regimes", nargs="+")
    cv.add_argument("--config")
    cv.add_argument("--layout")
    cv.add_argument("--report", required=True)
    cv.set_defaults(handler=cmd_cv)

    trajectory = commands.add_parser("trajectory", help="per-frame score trajectory of one session")
    trajectory.add_argument("--model", required=True, action="append")
    trajectory.add_argument("--frames", required=True)
    trajectory.add_argument("--session", required=True)
    trajectory.add_argument("--out", required=True)
    trajectory.set_defaults(handler=cmd_trajectory)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(stream=sys.stderr, level=args.log_level, format="%(message)s", force=True)
    try:
        return args.handler(args)
    except (ConfigurationError, InputError, FileNotFoundError) as e:
        logger.error(f"❌ {e}")
        return EXIT_USAGE
    except Exception as e:
        logger.exception(f"❌ Internal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
