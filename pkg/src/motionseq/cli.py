"""``motionseq`` command line.

Every :class:`PipelineConfig` key is accepted as ``--key value`` on every
subcommand; ``--config path`` loads a file first and flags override it.
Exit codes: 0 success, 2 validation error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from . import pipeline
from .config import FIELD_DOCS, PipelineConfig, load_config
from .errors import FormatError, NumericalAbort, ValidationError

EXIT_OK, EXIT_VALIDATION, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="key = value configuration file")
    for f in fields(PipelineConfig):
        g.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", metavar="VALUE", help=FIELD_DOCS[f.name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="motionseq", description="two-stage music-to-motion pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="resample, normalise and pair a motion/music directory")
    p.add_argument("data", nargs="?", help="input directory (default: data_dir)")
    p.add_argument("out", nargs="?", help="output directory (default: out_dir)")

    p = sub.add_parser("train-vqvae", help="train the stage-1 tokenizer")
    p.add_argument("--checkpoint", help="output checkpoint (default: out_dir/vqvae.ckpt)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--until", type=int, help="stop (and checkpoint) after this step")

    p = sub.add_parser("train-decoder", help="train the stage-2 decoder on frozen stage-1 tokens")
    p.add_argument("--vqvae", help="stage-1 checkpoint (default: out_dir/vqvae.ckpt)")
    p.add_argument("--checkpoint", help="output checkpoint (default: out_dir/decoder.ckpt)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--until", type=int, help="stop (and checkpoint) after this step")

    p = sub.add_parser("generate", help="music to motion")
    p.add_argument("--decoder", required=True)
    p.add_argument("--vqvae", required=True)
    p.add_argument("--music", required=True, help="WAV file or MOTB conditioning track (35 or 128 columns)")
    p.add_argument("--out", required=True, help="output .motb")
    p.add_argument("--seconds", type=float, help="target length (default: music length)")
    p.add_argument("--style", help="style label or a 1 x d_s .motb file")
    p.add_argument("--seed_token", type=int)
    p.add_argument("--chain", action="store_true", help="generate in segments seeded by the previous segment")
    p.add_argument("--segment_seconds", type=float)

    p = sub.add_parser("evaluate", help="metric report for generated against real motion")
    p.add_argument("--real", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--music", help="directory of music matching generated names by stem")
    p.add_argument("--report", required=True, help="output CSV")

    p = sub.add_parser("extract-features", help="WAV to a 35-column MOTB conditioning track")
    p.add_argument("audio")
    p.add_argument("out")
    p.add_argument("--length", type=int, help="force this many frames (edge hold or trim)")

    p = sub.add_parser("synth-data", help="write synthetic motion/click-track pairs")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--bpm", type=float, default=120.0)
    p.add_argument("--kind", default="pulse-dance")

    for name, sp in sub.choices.items():
        _add_config_flags(sp)
    return parser


def _config(args) -> PipelineConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, overrides)


def run(args) -> None:
    cfg = _config(args)
    cmd = args.command
    if cmd == "prepare":
        pipeline.cmd_prepare(cfg, args.data, args.out)
    elif cmd == "train-vqvae":
        pipeline.cmd_train_vqvae(cfg, args.checkpoint, args.resume, until=args.until)
    elif cmd == "train-decoder":
        pipeline.cmd_train_decoder(cfg, args.vqvae, args.checkpoint, args.resume, until=args.until)
    elif cmd == "generate":
        pipeline.cmd_generate(
            cfg, args.decoder, args.vqvae, args.music, args.out, args.seconds, args.style, args.seed_token, args.chain, args.segment_seconds
        )
    elif cmd == "evaluate":
        pipeline.cmd_evaluate(cfg, args.real, args.generated, args.report, args.music)
    elif cmd == "extract-features":
        pipeline.cmd_extract_features(cfg, args.audio, args.out, args.length)
    elif cmd == "synth-data":
        for name in pipeline.cmd_synth_data(args.out, args.n, args.seconds, args.dim, args.bpm, args.kind, cfg.seed, cfg.fps):
            print(name)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    logging.captureWarnings(True)
    log = logging.getLogger("motionseq")
    try:
        run(args)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ValidationError, KeyError) as exc:
        log.error("validation error: %s", exc)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
