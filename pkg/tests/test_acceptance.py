"""Acceptance gate: one test per criterion, each recording a pass/fail line
that the session summary prints (see conftest.py)."""

import math
import time

import numpy as np
import pytest

from conftest import CRITERIA
from motionseq import audio, autodiff as ad
from motionseq.checkpoint import ModelCheckpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from motionseq.cli import main
from motionseq.decoder import (
    DecoderConfig,
    DecoderExample,
    DecoderTrainConfig,
    DecoderTrainer,
    MotionSeqDecoder,
    evaluate_nll,
    extrapolation_ablation,
    generate,
    gpt_loss,
    self_attention_bias,
    style_modulate,
)
from motionseq.metrics import (
    GaussianSummary,
    aggregate_speed,
    beat_alignment,
    diversity,
    fid,
    r_precision,
)
from motionseq.motion import compute_stats, load_motion, normalize, read_motb, save_motion, synth_motion, write_motb
from motionseq.nn import alibi_bias, alibi_slopes
from motionseq.vqvae import (
    Codebook,
    TrainConfig,
    VqVae,
    VqVaeConfig,
    VqVaeTrainer,
    dataset_usage,
    ema_update,
    kmeans,
    quantize,
    reconstruction_error,
)

pytestmark = pytest.mark.slow


def record(n: int, title: str, ok: bool, detail: str) -> None:
    CRITERIA[n] = (title, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
    assert ok, f"criterion {n} ({title}) failed: {detail}"


# 1 -----------------------------------------------------------------------------

TARGET = np.random.default_rng(99).standard_normal((3, 4))

OPS = {
    "add": (lambda a, b: ad.tsum((a + b) * (a + b)), 2, False),
    "sub": (lambda a, b: ad.tsum((a - b) * a), 2, False),
    "mul": (lambda a, b: ad.tsum(a * b * b), 2, False),
    "div": (lambda a, b: ad.tsum(a / b), 2, True),
    "neg": (lambda a: ad.tsum(-a * a), 1, False),
    "exp": (lambda a: ad.tsum(ad.exp(a)), 1, False),
    "log": (lambda a: ad.tsum(ad.log(a)), 1, True),
    "tanh": (lambda a: ad.tsum(ad.tanh(a) * a), 1, False),
    "gelu": (lambda a: ad.tsum(ad.gelu(a) * a), 1, False),
    "matmul": (lambda a, b: ad.tsum(ad.matmul(a, ad.transpose(b)) * np.arange(9.0).reshape(3, 3)), 2, False),
    "transpose": (lambda a: ad.tsum(ad.transpose(a) * np.arange(12.0).reshape(4, 3)), 1, False),
    "reshape": (lambda a: ad.tsum(ad.reshape(a, (2, 6)) * np.arange(12.0).reshape(2, 6)), 1, False),
    "sum": (lambda a: ad.tsum(ad.tsum(a, axis=0) * np.arange(4.0)), 1, False),
    "mean": (lambda a: ad.tsum(ad.mean(a, axis=1, keepdims=True) * a), 1, False),
    "getitem": (lambda a: ad.tsum(ad.getitem(a, (slice(1, 3), slice(None, None, 2))) * np.arange(1.0, 5.0).reshape(2, 2)), 1, False),
    "gather": (lambda a: ad.tsum(ad.gather(a, np.array([0, 2, 2, 1])) * np.arange(16.0).reshape(4, 4)), 1, False),
    "softmax": (lambda a: ad.tsum(ad.softmax(a) * np.arange(12.0).reshape(3, 4)), 1, False),
    "log_softmax": (lambda a: ad.tsum(ad.log_softmax(a) * np.arange(12.0).reshape(3, 4)), 1, False),
    "layernorm": (lambda a, g: ad.tsum(ad.layernorm(a, ad.reshape(ad.getitem(g, 0), (4,)), ad.Tensor(np.zeros(4))) * np.arange(12.0).reshape(3, 4)), 2, True),
    "l2_normalize": (lambda a: ad.tsum(ad.l2_normalize(a) * np.arange(12.0).reshape(3, 4)), 1, False),
    "huber": (lambda a: ad.huber(a, TARGET * 0.3, delta=0.5), 1, False),
    "mse": (lambda a: ad.mse(a, TARGET), 1, False),
    "cross_entropy": (lambda a: ad.cross_entropy(a, np.array([0, 3, 1])), 1, False),
}  # fmt: skip


def test_01_gradient_suite():
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name, (fn, arity, positive_second) in OPS.items():
        for seed in range(20):
            r = np.random.default_rng(seed)
            arrays = [r.standard_normal((3, 4)) for _ in range(arity)]
            if name == "log":
                arrays[0] = r.uniform(0.5, 2.0, (3, 4))
            if positive_second:
                arrays[-1] = r.uniform(0.5, 2.0, (3, 4))
            err = ad.gradcheck(fn, *arrays)
            if err > worst_op:
                worst_op, worst_name = err, f"{name}/seed{seed}"
    cfg = DecoderConfig(codebook_size=8, d_model=16, n_layers=2, n_heads=2, cond_dim=5, style_dim=8, use_style=True)
    worst_dec = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        m = MotionSeqDecoder(cfg, seed=seed, dtype=np.float64)
        tok, cond, sty = r.integers(0, 9, (2, 6)), r.standard_normal((2, 6, 5)), r.standard_normal((2, 8))
        errs = ad.directional_gradcheck(lambda: gpt_loss(m(tok, cond, sty), tok), m.parameters(), r)
        worst_dec = max(worst_dec, max(errs.values()))
    took = time.perf_counter() - start
    ok = worst_op < 1e-4 and worst_dec < 1e-4 and took < 120
    record(1, "gradient suite", ok, f"{len(OPS)} ops x 20 seeds worst {worst_op:.1e} ({worst_name}); decoder x 20 seeds worst {worst_dec:.1e}; {took:.1f}s")


# 2 -----------------------------------------------------------------------------


def test_02_quantizer_oracle():
    r = np.random.default_rng(2)
    bad, ties = 0, 0
    for i in range(200):
        k, d, t = int(r.integers(1, 65)), int(r.integers(1, 9)), int(r.integers(1, 65))
        entries = r.standard_normal((k, d))
        z = r.standard_normal((t, d))
        if i % 4 == 0 and k > 1:  # duplicated entries and inputs placed on them force exact ties
            entries[k - 1] = entries[0]
            z[: t // 2] = entries[0]
            ties += 1
        _, idx = quantize(entries, z)
        want = []
        for row in z:
            dists = [float(np.sum((row - e) ** 2)) for e in entries]
            want.append(dists.index(min(dists)))  # first (lowest) index among equals
        bad += int(not np.array_equal(idx, want))
    record(2, "quantizer oracle", bad == 0, f"200 instances ({ties} with forced ties), {bad} mismatches")


# 3 -----------------------------------------------------------------------------


def _sine_data():
    seqs = [synth_motion("sine-walk", 64, 16, base_freq=0.5 + 0.25 * i, seed=i) for i in range(8)]
    stats = compute_stats(seqs)
    return [normalize(s, stats).frames for s in seqs]


def test_03_codebook_tricks():
    r = np.random.default_rng(3)
    cb = Codebook(6, 3, r, dtype=np.float64)
    n, s = cb.cluster_size.copy(), cb.embed_sum.copy()
    ema_err = 0.0
    for _ in range(10):
        z, idx = r.standard_normal((40, 3)), r.integers(0, 6, 40)
        ema_update(cb, z, idx, 0.95, 1e-5)
        for j in range(6):
            hit = idx == j
            n[j] = 0.95 * n[j] + 0.05 * hit.sum()
            s[j] = 0.95 * s[j] + 0.05 * z[hit].sum(axis=0)
        ema_err = max(ema_err, float(np.abs(cb.entries - s / (n[:, None] + 1e-5)).max()))

    a = r.standard_normal((300, 2)) * 0.2 + [4.0, 4.0]
    b = r.standard_normal((300, 2)) * 0.2 + [-4.0, 1.0]
    cents = kmeans(np.concatenate([a, b]), 2, r, iters=10)
    cents = cents[np.argsort(cents[:, 0])]
    km_err = max(np.abs(cents[0] - b.mean(0)).max(), np.abs(cents[1] - a.mean(0)).max())

    data = _sine_data()
    usage = []
    for seed in range(3):
        pair = []
        for tricks in (True, False):
            cfg = VqVaeConfig(
                motion_dim=16, codebook_size=64, code_dim=32, n_layers=1, n_heads=4,
                use_ema=tricks, random_restart=tricks, kmeans_init=tricks, restart_threshold=20,
            )  # fmt: skip
            m = VqVae(cfg, seed=seed)
            VqVaeTrainer(m, data, TrainConfig(steps=200, window=64, lr=2e-3, warmup_steps=20, seed=seed)).train()
            pair.append(dataset_usage(m, data))
        usage.append(tuple(pair))
    ok = ema_err < 1e-10 and km_err < 0.1 and all(w >= wo for w, wo in usage)
    shown = ", ".join(f"{w:.2f}>={wo:.2f}" for w, wo in usage)
    record(3, "EMA / restart / k-means", ok, f"EMA err {ema_err:.1e}; k-means err {km_err:.3f}; usage tricks vs none {shown}")


# 4 -----------------------------------------------------------------------------


def test_04_causality():
    r = np.random.default_rng(4)
    worst = 0.0
    for i in range(50):
        depth, heads = int(r.integers(1, 5)), int(r.choice([1, 2, 4, 8]))
        pos = "alibi" if i % 5 else "absolute"
        cfg = DecoderConfig(codebook_size=8, d_model=8 * heads, n_layers=depth, n_heads=heads, cond_dim=5, position=pos)
        m = MotionSeqDecoder(cfg, seed=i, dtype=np.float64)
        t_len = int(r.integers(3, 13))
        tok, cond = r.integers(0, 9, t_len), r.standard_normal((t_len, 5))
        base = m(tok, cond).data[0]
        for t in range(1, t_len):
            tok2, cond2 = tok.copy(), cond.copy()
            tok2[t:] = (tok2[t:] + 1 + r.integers(0, 7, t_len - t)) % 9
            cond2[t + 1 :] += r.standard_normal((t_len - t - 1, 5)) * 3
            # logit row s produces token s + 1 from tokens 0..s and cond rows 0..s+1
            worst = max(worst, float(np.abs(m(tok2, cond2).data[0, :t] - base[:t]).max()))
    record(4, "causality", worst <= 1e-12, f"50 models (depth<=4, heads<=8), every split point, max past-logit change {worst:.1e}")


# 5 -----------------------------------------------------------------------------


def test_05_alibi():
    slopes_ok = alibi_slopes(8).tolist() == [2.0**-i for i in range(1, 9)]
    bias = alibi_bias(8, 16)
    full = self_attention_bias(8, 16, "alibi")
    m = [2.0 ** (-8.0 * i / 8) for i in range(1, 9)]
    bad = 0
    for h in range(8):
        for i in range(16):
            for j in range(16):
                if j <= i:
                    bad += bias[h, i, j] != -m[h] * (i - j) or full[h, i, j] != -m[h] * (i - j)
                else:
                    bad += full[h, i, j] != -np.inf
    record(5, "ALiBi slopes and bias", slopes_ok and bad == 0, f"n=8 slopes exact: {slopes_ok}; T=16 x 8 heads, {bad} mismatched entries")


# 6 -----------------------------------------------------------------------------


def test_06_style_modulation():
    r = np.random.default_rng(6)
    worst_norm = worst_lin = 0.0
    for _ in range(100):
        a = r.standard_normal((1, 7, 12)) * r.uniform(0.1, 10)
        p = r.standard_normal(12)
        c = r.uniform(-5, 5)
        out = style_modulate(ad.Tensor(a), ad.Tensor(p)).data[0]
        for t in range(7):
            unit = a[0, t] / math.sqrt(sum(v * v for v in a[0, t]))
            want = math.sqrt(sum((pi * ui) ** 2 for pi, ui in zip(p, unit)))
            worst_norm = max(worst_norm, abs(float(np.linalg.norm(out[t])) - want))
        scaled = style_modulate(ad.Tensor(a), ad.Tensor(c * p)).data[0]
        worst_lin = max(worst_lin, float(np.abs(scaled - c * out).max()))
    ok = worst_norm < 1e-10 and worst_lin < 1e-10
    record(6, "style modulation", ok, f"row-norm err {worst_norm:.1e}, linearity err {worst_lin:.1e} over 100 random cases")


# 7 -----------------------------------------------------------------------------


def test_07_stage1_overfit():
    data = _sine_data()
    cfg = VqVaeConfig(motion_dim=16, codebook_size=64, code_dim=32, n_layers=2, n_heads=4, restart_threshold=50)
    model = VqVae(cfg, seed=0)
    trainer = VqVaeTrainer(model, data, TrainConfig(steps=5000, batch_size=8, window=64, lr=2e-3, warmup_steps=100))
    start = time.perf_counter()
    err = math.inf
    while trainer.step < 5000:
        trainer.train(250)
        err = reconstruction_error(model, data)
        if err < 0.01:
            break
    took = time.perf_counter() - start
    ok = err < 0.01 and took < 600
    record(7, "stage-1 overfit", ok, f"Huber {err:.4f} at step {trainer.step} (8 x T=64 x 16, K=64, d_c=32), {took:.0f}s")


# 8 -----------------------------------------------------------------------------


def test_08_stage2_overfit():
    r = np.random.default_rng(0)
    model = MotionSeqDecoder(DecoderConfig(codebook_size=64, d_model=64, n_layers=2, n_heads=4, cond_dim=35), seed=0)
    examples = [DecoderExample(r.integers(0, 64, 32), r.standard_normal((32, 35))) for _ in range(4)]
    model.fit_conditioning([e.cond for e in examples])
    cfg = DecoderTrainConfig(steps=600, batch_size=4, window=64, lr=3e-3, warmup_steps=50)
    DecoderTrainer(model, examples, cfg).train()
    evals = [evaluate_nll(model, e.tokens, e.cond) for e in examples]
    nll, acc = max(v[0] for v in evals), min(v[1] for v in evals)
    exact = 0
    for e in examples:
        out = generate(model, e.cond, target_len=32, seed_token=int(e.tokens[0]), stop_at_eos=False)
        exact += int(np.array_equal(out.indices, e.tokens))
    ok = nll < 0.05 and acc > 0.99 and exact == 4
    record(8, "stage-2 overfit", ok, f"worst NLL {nll:.4f}, worst accuracy {acc:.3f}, {exact}/4 greedy sequences exact")


# 9, 13 -------------------------------------------------------------------------

E2E_CFG = """\
vq_steps = 1500
vq_window = 64
vq_lr = 2e-3
vq_restart_threshold = 50
dec_steps = 600
dec_lr = 2e-3
dec_window = 64
checkpoint_every = 500
"""


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    cfg = root / "e2e.cfg"
    cfg.write_text(E2E_CFG)
    raw, work, gen = root / "raw", root / "work", root / "gen"
    common = ["--config", str(cfg), "--out_dir", str(work)]
    start = time.perf_counter()
    codes = [main(["synth-data", str(raw), "--n", "10", "--seconds", "5"])]
    codes.append(main(["prepare", str(raw), str(work)] + common))
    codes.append(main(["train-vqvae"] + common))
    codes.append(main(["train-decoder"] + common))
    models = ["--decoder", str(work / "decoder.ckpt"), "--vqvae", str(work / "vqvae.ckpt")]
    for wav in sorted(raw.glob("*.wav")):
        out = gen / f"{wav.stem}.motb"
        gen.mkdir(exist_ok=True)
        codes.append(main(["generate", "--config", str(cfg)] + models + ["--music", str(wav), "--out", str(out)]))
    report = root / "report.csv"
    codes.append(main(["evaluate", "--config", str(cfg), "--real", str(raw), "--generated", str(gen), "--music", str(raw), "--report", str(report)]))
    took = time.perf_counter() - start
    return {"root": root, "cfg": cfg, "models": models, "codes": codes, "seconds": took, "report": report}


def longest_still_run(seq, thresh=1e-4) -> int:
    still = aggregate_speed(seq) < thresh
    best = run = 0
    for s in still:
        run = run + 1 if s else 0
        best = max(best, run)
    return best


def test_09_extrapolation(e2e):
    results = [extrapolation_ablation(seed) for seed in range(5)]
    wins = sum(r["alibi"] > r["absolute"] for r in results)
    root = e2e["root"]
    long_wav = root / "long.wav"
    audio.write_wav(long_wav, audio.click_track(20.0, 120.0))
    out = root / "long.motb"
    code = main(["generate", "--config", str(e2e["cfg"])] + e2e["models"] + ["--music", str(long_wav), "--out", str(out)])
    seq = load_motion(out)
    still = longest_still_run(seq)
    ok = wins == 5 and code == 0 and seq.n_frames == 400 and still < 20
    shown = ", ".join(f"{r['alibi']:.2f}/{r['absolute']:.2f}" for r in results)
    record(9, "length extrapolation", ok, f"alibi/absolute acc at 128: {shown} ({wins}/5); 4x length (400 frames) longest still run {still}")


# 10 ----------------------------------------------------------------------------


def test_10_metric_closed_forms():
    r = np.random.default_rng(10)
    m = r.standard_normal((5, 5))
    a = GaussianSummary(r.standard_normal(5), m @ m.T + 0.1 * np.eye(5))
    delta = r.standard_normal(5)
    self_d = fid(a, a)
    shift_err = abs(fid(a, GaussianSummary(a.mean + delta, a.cov)) - float(delta @ delta))
    sa, sb = 1.3, 0.4
    scalar_err = abs(fid(GaussianSummary(np.zeros(1), np.array([[sa**2]])), GaussianSummary(np.zeros(1), np.array([[sb**2]]))) - (sa - sb) ** 2)
    beats = [4, 19, 33, 50]
    ident = beat_alignment(beats, beats)
    offset_err = abs(beat_alignment([b + 3 for b in beats], beats, sigma=3.0) - math.exp(-0.5))
    x = r.standard_normal((12, 6))
    pairs = [math.dist(x[i], x[j]) for i in range(12) for j in range(i + 1, 12)]
    div_err = abs(diversity(x) - sum(pairs) / len(pairs))
    chance = r_precision(r.standard_normal((2000, 8)), r.standard_normal((2000, 8)))
    ok = (
        self_d < 1e-6 and shift_err < 1e-9 and scalar_err < 1e-12 and ident == 1.0
        and offset_err < 1e-9 and div_err < 1e-12 and abs(chance - 1 / 32) < 0.03
    )  # fmt: skip
    detail = (
        f"fid(a,a) {self_d:.1e}; shift err {shift_err:.1e}; 1-D err {scalar_err:.1e}; "
        f"BA identical {ident}; BA sigma-offset err {offset_err:.1e}; diversity err {div_err:.1e}; R@1 random {chance:.4f}"
    )
    record(10, "metric closed forms", ok, detail)


# 11 ----------------------------------------------------------------------------


def test_11_dsp():
    sr = audio.DEFAULT_SAMPLE_RATE
    spec = audio.stft(audio.tone(2.0, 440.0).samples, 1024, 800)
    chroma_ok = bool(np.all(np.argmax(audio.chroma(spec, sr), axis=1) == 9))
    track = audio.build_track(audio.click_track(8.0, 120.0), 20.0)
    gaps = np.diff(track.beat_frames)
    beats_ok = len(gaps) >= 7 and bool(np.all(np.abs(gaps - 10) <= 1))
    x = np.random.default_rng(11).standard_normal(sr)
    full = audio.stft(x, 1024, 800)
    padded = np.pad(x, 512, mode="reflect")
    w = audio.hann(1024)
    parseval = 0.0
    for t in range(full.shape[0]):
        frame = padded[t * 800 : t * 800 + 1024] * w
        p = np.abs(full[t]) ** 2
        spectral = (p[0] + p[-1] + 2 * p[1:-1].sum()) / 1024
        parseval = max(parseval, abs(spectral - np.sum(frame**2)) / np.sum(frame**2))
    clip = audio.click_track(5.0, 120.0)
    tr = audio.build_track(clip, 20.0)
    s = audio.stft(clip.samples, 1024, 800)
    f = tr.features.astype(np.float64)
    env = audio.onset_envelope(s)
    layout_ok = (
        f.shape == (100, 35)
        and np.allclose(f[:, audio.MFCC_COLS], audio.mfcc(s, sr), rtol=1e-6, atol=1e-4)
        and np.allclose(f[:, audio.CHROMA_COLS], audio.chroma(s, sr), atol=1e-6)
        and np.allclose(f[:, audio.ENVELOPE_COL], env, atol=1e-6)
        and np.array_equal(f[:, audio.PEAK_COL], audio.envelope_peaks(env))
        and np.array_equal(np.flatnonzero(f[:, audio.BEAT_COL]), tr.beat_frames)
    )
    ok = chroma_ok and beats_ok and parseval < 1e-4 and layout_ok
    record(11, "DSP checks", ok, f"A-tone chroma all frames: {chroma_ok}; 120 BPM gaps {sorted(set(gaps.tolist()))}; Parseval {parseval:.1e}; 35-d layout: {layout_ok}")


# 12 ----------------------------------------------------------------------------


def test_12_persistence(tmp_path):
    r = np.random.default_rng(12)
    frames = r.standard_normal((37, 9)).astype(np.float32)
    write_motb(tmp_path / "m.motb", frames, 20.0)
    back, fps = read_motb(tmp_path / "m.motb")
    write_motb(tmp_path / "m2.motb", back, fps)
    motion_ok = back.tobytes() == frames.tobytes() and (tmp_path / "m.motb").read_bytes() == (tmp_path / "m2.motb").read_bytes()
    seq = synth_motion("sine-walk", 30, 4)
    save_motion(seq, tmp_path / "s.motb")
    motion_ok = motion_ok and load_motion(tmp_path / "s.motb").frames.tobytes() == seq.frames.tobytes()

    tensors = {"a": r.standard_normal((3, 3)).astype(np.float32), "b": r.standard_normal(4), "c": np.arange(3, dtype=np.int64)}
    ck = ModelCheckpoint({"kind": "x", "step": "1"}, tensors)
    save_checkpoint(ck, tmp_path / "c.ckpt")
    ckpt_ok = encode_checkpoint(load_checkpoint(tmp_path / "c.ckpt")) == encode_checkpoint(ck)

    main(["synth-data", str(tmp_path / "raw"), "--n", "4", "--seconds", "3", "--dim", "6"])
    small = ["--out_dir", str(tmp_path / "w"), "--vq_steps", "100", "--dec_steps", "100", "--checkpoint_every", "25", "--vq_warmup", "10", "--dec_warmup", "10",
             "--vq_codebook_size", "16", "--vq_code_dim", "16", "--vq_window", "32", "--dec_d_model", "16", "--dec_window", "32"]  # fmt: skip
    main(["prepare", str(tmp_path / "raw"), str(tmp_path / "w")] + small)
    resume_ok = []
    for stage, extra in (("train-vqvae", []), ("train-decoder", ["--vqvae", str(tmp_path / "w" / "full-train-vqvae.ckpt")])):
        full, part = tmp_path / "w" / f"full-{stage}.ckpt", tmp_path / "w" / f"part-{stage}.ckpt"
        codes = [
            main([stage, "--checkpoint", str(full)] + extra + small),
            main([stage, "--checkpoint", str(part), "--until", "50"] + extra + small),
            main([stage, "--checkpoint", str(part), "--resume", str(part)] + extra + small),
        ]
        logs_equal = full.with_suffix(".log.csv").read_bytes() == part.with_suffix(".log.csv").read_bytes()
        n_rows = len(full.with_suffix(".log.csv").read_text().splitlines()) - 1
        fa, fb = load_checkpoint(full).tensors, load_checkpoint(part).tensors
        state_equal = fa.keys() == fb.keys() and all(fa[k].tobytes() == fb[k].tobytes() for k in fa)
        resume_ok.append(codes == [0, 0, 0] and logs_equal and state_equal and n_rows == 100)
    ok = motion_ok and ckpt_ok and all(resume_ok)
    record(12, "persistence", ok, f"MOTB bit-exact: {motion_ok}; checkpoint bit-exact: {ckpt_ok}; 100-step resume bitwise (vqvae, decoder): {resume_ok}")


# 13 ----------------------------------------------------------------------------


def test_13_end_to_end(e2e):
    rows = {}
    for line in e2e["report"].read_text().splitlines()[1:]:
        k, mean, std = line.split(",")
        rows[k] = float(mean)
    ba = rows.get("beat_align", 0.0)
    ok = all(c == 0 for c in e2e["codes"]) and e2e["seconds"] < 900 and ba > 0.9
    record(13, "end-to-end smoke", ok, f"exit codes {sorted(set(e2e['codes']))}; {e2e['seconds']:.0f}s; Beat Align {ba:.3f}; FID_k {rows.get('fid_k', float('nan')):.3f}")
