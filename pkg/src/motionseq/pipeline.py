"""End-to-end commands: prepare, train both stages, generate, evaluate.

Each ``cmd_*`` function is what the matching CLI subcommand runs; they take a
validated :class:`PipelineConfig` plus explicit paths and return their main
artifact so they can also be driven from Python.

Input directory layout for ``prepare``: a motion file ``<name>.motb`` (or
``<name>.csv``) paired with ``<name>.wav`` (librosa source) or
``<name>.feat.motb`` (precomputed source). An optional ``<name>.style`` text
file carries a style label.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from pathlib import Path

import numpy as np

from . import audio, metrics
from .checkpoint import ModelCheckpoint, load_checkpoint, save_checkpoint
from .config import FIELD_TYPES, PipelineConfig, from_mapping
from .decoder import (
    DecoderExample,
    DecoderTrainer,
    MotionSeqDecoder,
    StyleEmbedding,
    chain_generate,
    generate,
    hash_style_embedding,
)
from .errors import FormatError, NumericalAbort, ValidationError
from .motion import (
    MotionSequence,
    MotionStats,
    compute_stats,
    load_motion,
    normalize,
    read_motb,
    resample_fps,
    save_motion,
    synth_motion,
    write_motb,
)
from .seeding import make_rng, rng_from_state_array, rng_state_array
from .vqvae import VqVae, VqVaeTrainer, detokenize, tokenize

log = logging.getLogger("motionseq")

MANIFEST = "manifest.json"
FEATURE_SUFFIX = ".feat.motb"
VQ_ARCH_KEYS = (
    "vq_codebook_size",
    "vq_code_dim",
    "vq_layers",
    "vq_heads",
    "vq_stride",
    "vq_use_ema",
)
DEC_ARCH_KEYS = ("dec_d_model", "dec_layers", "dec_heads", "dec_position", "dec_use_style", "dec_style_dim")


# data discovery ---------------------------------------------------------------


def _motion_files(directory: Path) -> list[Path]:
    out = []
    for p in sorted(directory.iterdir()):
        if p.name.endswith(FEATURE_SUFFIX) or not p.is_file():
            continue
        if p.suffix.lower() in (".motb", ".csv"):
            out.append(p)
    return out


def load_motion_dir(directory, fps: float | None = None) -> list[MotionSequence]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ValidationError(f"{directory}: not a directory")
    seqs = [load_motion(p) for p in _motion_files(directory)]
    if not seqs:
        raise ValidationError(f"{directory}: no motion files")
    if fps is not None:
        seqs = [resample_fps(s, fps) for s in seqs]
    return seqs


def split_names(names: list[str], seed: int, test_fraction: float) -> dict[str, str]:
    """Seeded train/test assignment; at least one training pair always remains."""
    names = sorted(names)
    n_test = int(round(len(names) * test_fraction))
    n_test = min(n_test, len(names) - 1)
    order = make_rng(seed, "split").permutation(len(names))
    test = {names[i] for i in order[:n_test]}
    return {n: ("test" if n in test else "train") for n in names}


def conditioning_for(path: Path, cfg: PipelineConfig, length: int) -> audio.ConditioningTrack:
    if path.name.endswith(FEATURE_SUFFIX) or path.suffix.lower() == ".motb":
        return audio.load_track(path, cfg.fps, length)
    clip = audio.load_wav(path)
    return audio.build_track(clip, cfg.fps, length, cfg.sample_rate, cfg.n_fft, cfg.n_mels)


# prepare ----------------------------------------------------------------------


def cmd_prepare(cfg: PipelineConfig, data_dir=None, out_dir=None) -> dict:
    data_dir = Path(data_dir or cfg.data_dir)
    out_dir = Path(out_dir or cfg.out_dir)
    if not data_dir.is_dir():
        raise ValidationError(f"data_dir: {data_dir} is not a directory")
    (out_dir / "motion").mkdir(parents=True, exist_ok=True)
    (out_dir / "cond").mkdir(parents=True, exist_ok=True)
    pair_suffix = ".wav" if cfg.audio_source == "librosa" else FEATURE_SUFFIX

    motions, tracks, styles, skipped = {}, {}, {}, []
    for mpath in _motion_files(data_dir):
        name = mpath.stem
        cpath = data_dir / (name + pair_suffix)
        if not cpath.exists():
            warnings.warn(f"{mpath.name}: no paired {pair_suffix} file, skipped", RuntimeWarning, stacklevel=2)
            skipped.append({"file": mpath.name, "reason": f"missing {pair_suffix}"})
            continue
        try:
            seq = resample_fps(load_motion(mpath, cfg.fps), cfg.fps)
            track = conditioning_for(cpath, cfg, seq.n_frames)
        except (FormatError, ValidationError, ValueError, OSError) as exc:
            warnings.warn(f"{name}: unreadable pair, skipped ({exc})", RuntimeWarning, stacklevel=2)
            skipped.append({"file": mpath.name, "reason": str(exc)})
            continue
        motions[name] = seq
        tracks[name] = track
        spath = data_dir / (name + ".style")
        styles[name] = spath.read_text(encoding="utf-8").strip() if spath.exists() else None
    if not motions:
        raise ValidationError(f"{data_dir}: no usable (motion, music) pairs")
    dims = {s.dim for s in motions.values()}
    if len(dims) != 1:
        raise ValidationError(f"motion files disagree on feature size: {sorted(dims)}")

    split = split_names(list(motions), cfg.seed, cfg.test_fraction)
    stats = compute_stats([motions[n] for n in sorted(motions) if split[n] == "train"])
    write_motb(out_dir / "stats.motb", stats.as_matrix(), cfg.fps)
    pairs = []
    for name in sorted(motions):
        save_motion(normalize(motions[name], stats), out_dir / "motion" / f"{name}.motb")
        audio.save_track(tracks[name], out_dir / "cond" / f"{name}.motb")
        pairs.append(
            {
                "name": name,
                "motion": f"motion/{name}.motb",
                "cond": f"cond/{name}.motb",
                "split": split[name],
                "frames": motions[name].n_frames,
                "style": styles[name],
                "beats": [int(b) for b in tracks[name].beat_frames],
            }
        )
    manifest = {
        "version": 1,
        "seed": cfg.seed,
        "fps": cfg.fps,
        "motion_dim": dims.pop(),
        "cond_dim": next(iter(tracks.values())).dim,
        "audio_source": cfg.audio_source,
        "stats": "stats.motb",
        "pairs": pairs,
        "skipped": skipped,
    }
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    n_train = sum(p["split"] == "train" for p in pairs)
    log.info("prepared %d pairs (%d train, %d test), %d skipped", len(pairs), n_train, len(pairs) - n_train, len(skipped))
    return manifest


def load_manifest(out_dir) -> tuple[dict, Path]:
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        raise ValidationError(f"{path}: manifest not found; run prepare first")
    return json.loads(path.read_text(encoding="utf-8")), path.parent


def _train_pairs(manifest: dict) -> list[dict]:
    pairs = [p for p in manifest["pairs"] if p["split"] == "train"]
    if not pairs:
        raise ValidationError("manifest has no training pairs")
    return pairs


# checkpoint helpers -----------------------------------------------------------


def _pipeline_part(config: dict[str, str]) -> dict[str, str]:
    return {k: v for k, v in config.items() if k in FIELD_TYPES}


def check_architecture(ckpt: ModelCheckpoint, cfg: PipelineConfig, keys) -> None:
    stored = from_mapping(_pipeline_part(ckpt.config))
    for k in keys:
        if getattr(stored, k) != getattr(cfg, k):
            raise ValidationError(f"{k}: checkpoint has {getattr(stored, k)!r}, config has {getattr(cfg, k)!r}")


def vqvae_from_checkpoint(ckpt: ModelCheckpoint) -> tuple[VqVae, MotionStats, PipelineConfig]:
    if ckpt.kind != "vqvae":
        raise ValidationError(f"expected a vqvae checkpoint, got kind '{ckpt.kind}'")
    pcfg = from_mapping(_pipeline_part(ckpt.config))
    model = VqVae(pcfg.vqvae_config(int(ckpt.config["motion_dim"])), seed=pcfg.seed)
    model.load_state_tensors(ckpt.group("model"))
    return model, MotionStats.from_matrix(ckpt.tensors["stats"]), pcfg


def decoder_from_checkpoint(ckpt: ModelCheckpoint) -> tuple[MotionSeqDecoder, PipelineConfig]:
    if ckpt.kind != "decoder":
        raise ValidationError(f"expected a decoder checkpoint, got kind '{ckpt.kind}'")
    pcfg = from_mapping(_pipeline_part(ckpt.config))
    dcfg = pcfg.decoder_config(int(ckpt.config["codebook_size"]), int(ckpt.config["cond_dim"]))
    model = MotionSeqDecoder(dcfg, seed=pcfg.seed)
    model.load_state_tensors(ckpt.group("model"))
    return model, pcfg


def _trainer_tensors(model_tensors: dict, trainer) -> dict[str, np.ndarray]:
    out = {f"model.{k}": v for k, v in model_tensors.items()}
    out.update({f"optim.{k}": v for k, v in trainer.opt.state_tensors().items()})
    out["rng.trainer"] = rng_state_array(trainer.rng)
    return out


def _restore_trainer(trainer, ckpt: ModelCheckpoint) -> None:
    trainer.opt.load_state_tensors(ckpt.group("optim"))
    trainer.rng = rng_from_state_array(ckpt.tensors["rng.trainer"])
    trainer.step = ckpt.step


def _run(trainer, total: int, fields, log_path: Path, every: int, save, resumed: bool, until: int | None = None) -> None:
    """Step until ``total`` (or ``until``, for staged runs), appending CSV log rows
    and saving periodically and at the stop step.

    On a numerical abort nothing is written, so the newest checkpoint on disk is
    the last good state.
    """
    new_file = not (resumed and log_path.exists())
    with open(log_path, "w" if new_file else "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields))
        if new_file:
            writer.writeheader()
        stop = total if until is None else min(total, until)
        while trainer.step < stop:
            try:
                rec = trainer.train_step()
            except NumericalAbort:
                log.error("numerical abort at step %d; last checkpoint kept", trainer.step)
                raise
            writer.writerow({k: rec[k] for k in fields})
            if trainer.step % every == 0 or trainer.step == stop:
                fh.flush()
                save()
                log.info("step %d checkpoint written", trainer.step)


# stage 1 ----------------------------------------------------------------------


def cmd_train_vqvae(cfg: PipelineConfig, checkpoint=None, resume=None, out_dir=None, until: int | None = None) -> Path:
    manifest, root = load_manifest(out_dir or cfg.out_dir)
    data = [load_motion(root / p["motion"]).frames for p in _train_pairs(manifest)]
    stats = MotionStats.from_matrix(read_motb(root / manifest["stats"])[0])
    model = VqVae(cfg.vqvae_config(manifest["motion_dim"]), seed=cfg.seed)
    trainer = VqVaeTrainer(model, data, cfg.vq_train_config())
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.kind != "vqvae":
            raise ValidationError(f"{resume}: not a vqvae checkpoint")
        check_architecture(ckpt, cfg, VQ_ARCH_KEYS)
        if int(ckpt.config["motion_dim"]) != manifest["motion_dim"]:
            raise ValidationError(f"motion_dim: checkpoint has {ckpt.config['motion_dim']}, data has {manifest['motion_dim']}")
        model.load_state_tensors(ckpt.group("model"))
        _restore_trainer(trainer, ckpt)
    path = Path(checkpoint) if checkpoint else root / "vqvae.ckpt"

    def save():
        conf = {"kind": "vqvae", "step": str(trainer.step), "motion_dim": str(manifest["motion_dim"]), **cfg.to_dict()}
        tensors = _trainer_tensors(model.state_tensors(), trainer)
        tensors["stats"] = stats.as_matrix()
        save_checkpoint(ModelCheckpoint(conf, tensors), path)

    _run(trainer, cfg.vq_steps, VqVaeTrainer.LOG_FIELDS, path.with_suffix(".log.csv"), cfg.checkpoint_every, save, resume is not None, until)
    print(path)
    return path


# stage 2 ----------------------------------------------------------------------


def load_style(spec: str | None, dim: int) -> StyleEmbedding:
    """A ``.motb`` path holding one ``1 x d_s`` row, or a label for the hash embedder."""
    if spec is None or spec == "":
        spec = "neutral"
    if spec.endswith(".motb"):
        vec, _ = read_motb(spec)
        if vec.shape != (1, dim):
            raise ValidationError(f"{spec}: style file must be 1 x {dim}, got {vec.shape[0]} x {vec.shape[1]}")
        return StyleEmbedding(vec[0], Path(spec).stem)
    return hash_style_embedding(spec, dim)


def token_condition(features: np.ndarray, stride: int, n_tokens: int) -> np.ndarray:
    """Conditioning rows at the token rate (every ``stride``-th frame)."""
    rows = np.asarray(features)[::stride][:n_tokens]
    if rows.shape[0] < n_tokens:
        rows = audio.fit_length(rows, n_tokens)
    return rows


def cmd_train_decoder(
    cfg: PipelineConfig, vqvae_checkpoint=None, checkpoint=None, resume=None, out_dir=None, until: int | None = None
) -> Path:
    manifest, root = load_manifest(out_dir or cfg.out_dir)
    vq_path = Path(vqvae_checkpoint) if vqvae_checkpoint else root / "vqvae.ckpt"
    vq, _, vq_cfg = vqvae_from_checkpoint(load_checkpoint(vq_path))
    k = vq.cfg.codebook_size
    if cfg.vq_codebook_size != k:
        raise ValidationError(f"vq_codebook_size: stage-1 checkpoint has K={k}, config has {cfg.vq_codebook_size}")
    stride = vq.cfg.stride

    examples, first = [], []
    for p in _train_pairs(manifest):
        tokens = tokenize(vq, load_motion(root / p["motion"]).frames).body
        track, _ = read_motb(root / p["cond"])
        style = load_style(p.get("style"), cfg.dec_style_dim).vector if cfg.dec_use_style else None
        examples.append(DecoderExample(tokens, token_condition(track, stride, tokens.size), style))
        first.append(int(tokens[0]))
    model = MotionSeqDecoder(cfg.decoder_config(k, manifest["cond_dim"]), seed=cfg.seed)
    model.fit_conditioning([e.cond for e in examples])
    model.fit_first_tokens(first)
    trainer = DecoderTrainer(model, examples, cfg.decoder_train_config())
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.kind != "decoder":
            raise ValidationError(f"{resume}: not a decoder checkpoint")
        check_architecture(ckpt, cfg, DEC_ARCH_KEYS)
        if int(ckpt.config["codebook_size"]) != k:
            raise ValidationError(f"codebook_size: decoder checkpoint has K={ckpt.config['codebook_size']}, stage 1 has {k}")
        model.load_state_tensors(ckpt.group("model"))
        _restore_trainer(trainer, ckpt)
    path = Path(checkpoint) if checkpoint else root / "decoder.ckpt"

    def save():
        conf = {
            "kind": "decoder",
            "step": str(trainer.step),
            "codebook_size": str(k),
            "cond_dim": str(manifest["cond_dim"]),
            "stride": str(stride),
            **cfg.to_dict(),
        }
        save_checkpoint(ModelCheckpoint(conf, _trainer_tensors(model.state_tensors(), trainer)), path)

    _run(trainer, cfg.dec_steps, DecoderTrainer.LOG_FIELDS, path.with_suffix(".log.csv"), cfg.checkpoint_every, save, resume is not None, until)
    print(path)
    return path


# generation -------------------------------------------------------------------


def cmd_generate(
    cfg: PipelineConfig,
    decoder_checkpoint,
    vqvae_checkpoint,
    music,
    out_path,
    seconds: float | None = None,
    style: str | None = None,
    seed_token: int | None = None,
    chain: bool = False,
    segment_seconds: float | None = None,
) -> MotionSequence:
    """Music (WAV or MOTB track) to a de-normalised MOTB motion file.

    Generation runs with EOS suppressed so the output always has
    ``round(seconds * fps)`` frames; ``seconds`` defaults to the music length.
    """
    vq, stats, vq_cfg = vqvae_from_checkpoint(load_checkpoint(vqvae_checkpoint))
    dec, dec_cfg = decoder_from_checkpoint(load_checkpoint(decoder_checkpoint))
    if dec.cfg.codebook_size != vq.cfg.codebook_size:
        raise ValidationError(f"codebook_size: decoder has K={dec.cfg.codebook_size}, stage 1 has K={vq.cfg.codebook_size}")
    fps = vq_cfg.fps
    music = Path(music)
    if music.suffix.lower() == ".wav":
        clip = audio.load_wav(music)
        seconds = clip.seconds if seconds is None else seconds
        n_frames = int(round(seconds * fps))
        n_music = int(math.ceil(clip.seconds * fps))
        track = audio.build_track(clip, fps, None, vq_cfg.sample_rate, vq_cfg.n_fft, vq_cfg.n_mels)
    else:
        track = audio.load_track(music, fps)
        n_music = track.n_frames
        seconds = n_music / fps if seconds is None else seconds
        n_frames = int(round(seconds * fps))
    if n_frames < 1:
        raise ValidationError("seconds: target length must be at least one frame")
    if n_music < n_frames:
        warnings.warn(f"music has {n_music} frames, extending to {n_frames} by holding the last row", RuntimeWarning, stacklevel=2)
    feats = audio.fit_length(track.features, n_frames)
    if feats.shape[1] != dec.cfg.cond_dim:
        raise ValidationError(f"music features have d={feats.shape[1]}, decoder expects {dec.cfg.cond_dim}")
    stride = vq.cfg.stride
    n_tokens = int(math.ceil(n_frames / stride))
    cond = token_condition(feats, stride, n_tokens)
    sty = load_style(style, dec.cfg.style_dim) if dec.cfg.use_style else None
    if chain:
        seg = segment_seconds or seconds
        per = max(1, int(math.ceil(seg * fps / stride)))
        chunks = [cond[i : i + per] for i in range(0, n_tokens, per)]
        # The last chunk may be short; generate per-chunk lengths.
        segments, prev = [], seed_token
        for i, c in enumerate(chunks):
            joined, _ = chain_generate(
                dec, [c], sty, c.shape[0], cfg.sampling, cfg.temperature, cfg.seed + i, False, prev, cfg.first_token
            )
            segments.append(joined.body)
            prev = int(joined.body[-1])
        tokens = np.concatenate(segments)
    else:
        tokens = generate(
            dec, cond, sty, n_tokens, cfg.sampling, cfg.temperature, cfg.seed, seed_token, cfg.first_token, stop_at_eos=False
        ).body
    seq = detokenize(vq, tokens, stats, fps, Path(out_path).stem)
    seq = MotionSequence(seq.frames[:n_frames], fps, seq.name)
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    save_motion(seq, out_path)
    print(out_path)
    return seq


# evaluation -------------------------------------------------------------------


def music_beats(path: Path, cfg: PipelineConfig, length: int) -> list[int]:
    return [int(b) for b in conditioning_for(path, cfg, length).beat_frames]


def _find_music(music_dir: Path, name: str) -> Path | None:
    for cand in (music_dir / f"{name}.wav", music_dir / f"{name}{FEATURE_SUFFIX}", music_dir / f"{name}.motb"):
        if cand.exists():
            return cand
    return None


def cmd_evaluate(cfg: PipelineConfig, real_dir, generated_dir, report_path, music_dir=None) -> dict[str, tuple[float, float]]:
    """Metric report as ``metric,mean,std`` CSV; the same table goes to stdout."""
    real = load_motion_dir(real_dir, cfg.fps)
    gen = load_motion_dir(generated_dir, cfg.fps)
    if len(real) < 2 or len(gen) < 2:
        raise ValidationError("evaluate needs at least 2 sequences per side")
    report: dict[str, tuple[float, float]] = {}
    for tag in ("kinetic", "geometric"):
        fr, fg = metrics.feature_set(real, tag), metrics.feature_set(gen, tag)
        # Diversity is measured in the real set's standardised feature space.
        mu, sd = fr.features.mean(axis=0), fr.features.std(axis=0)
        sd = np.where(sd < 1e-8, 1.0, sd)
        zr, zg = (fr.features - mu) / sd, (fg.features - mu) / sd
        letter = tag[0]
        report[f"fid_{letter}"] = (metrics.feature_fid(fr, fg), 0.0)
        dr = metrics.repeated(lambda s: metrics.diversity(zr, cfg.eval_pairs, s), cfg.eval_repeats, cfg.seed)
        dg = metrics.repeated(lambda s: metrics.diversity(zg, cfg.eval_pairs, s), cfg.eval_repeats, cfg.seed)
        report[f"dist_{letter}_real"] = dr
        report[f"dist_{letter}_generated"] = dg
        report[f"dist_{letter}_ratio"] = (dg[0] / dr[0] if dr[0] > 0 else float("nan"), 0.0)
    if music_dir is not None:
        music_dir = Path(music_dir)
        scores = []
        for s in gen:
            mpath = _find_music(music_dir, s.name)
            if mpath is None:
                warnings.warn(f"{s.name}: no music in {music_dir}, left out of beat alignment", RuntimeWarning, stacklevel=2)
                continue
            beats = music_beats(mpath, cfg, s.n_frames)
            scores.append(metrics.beat_alignment(metrics.kinematic_beats(s), beats, cfg.beat_sigma))
        if not scores:
            raise ValidationError(f"{music_dir}: no music matches any generated sequence")
        report["beat_align"] = (float(np.mean(scores)), float(np.std(scores)))
    write_report(report, report_path)
    print(format_report(report))
    return report


def write_report(report: dict[str, tuple[float, float]], path) -> None:
    lines = ["metric,mean,std"] + [f"{k},{m:.10g},{s:.10g}" for k, (m, s) in report.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def format_report(report: dict[str, tuple[float, float]]) -> str:
    width = max(len(k) for k in report)
    return "\n".join(f"{k:<{width}}  {m:12.6f} +- {s:.6f}" for k, (m, s) in report.items())


# utilities --------------------------------------------------------------------


def cmd_extract_features(cfg: PipelineConfig, audio_path, out_path, length: int | None = None) -> audio.ConditioningTrack:
    clip = audio.load_wav(audio_path)
    track = audio.build_track(clip, cfg.fps, length, cfg.sample_rate, cfg.n_fft, cfg.n_mels)
    audio.save_track(track, out_path)
    log.info("%s: %d frames, beats at %s", audio_path, track.n_frames, track.beat_frames)
    print(out_path)
    return track


def cmd_synth_data(
    out_dir, n: int = 10, seconds: float = 5.0, dim: int = 16, bpm: float = 120.0, kind: str = "pulse-dance", seed: int = 0, fps: float = 20.0
) -> list[str]:
    """Synthetic pairs: motion whose velocity minima fall on the beats of a click
    track at ``bpm`` (pulse-dance period ``60 / bpm`` s)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n):
        name = f"pair{i:03d}"
        seq = synth_motion(kind, int(round(seconds * fps)), dim, base_freq=bpm / 60.0, seed=seed + i, fps=fps, name=name)
        save_motion(seq, out_dir / f"{name}.motb")
        audio.write_wav(out_dir / f"{name}.wav", audio.click_track(seconds, bpm))
        names.append(name)
    return names
