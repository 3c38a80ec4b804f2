"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run alone with ``pytest tests/test_acceptance.py -v``; the per-criterion
lines are also repeated in the terminal summary.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import decompose_oracle, si_sdr_oracle, sir_sar_oracle
from udtsep.checkpoint import load_checkpoint
from udtsep.corpus import ToyConfig, load_corpus, make_batch, synth_toy_corpus
from udtsep.dsp import MagSpectrogram, StftConfig, WaveClip, compress, decompress, istft, stft
from udtsep.metrics import bss_decompose, si_sdr, sir_sar
from udtsep.model import ModelConfig, SupervisedModel, TrainState, UdtModel, supervised_step, train_step
from udtsep.pipeline import RunConfig, evaluate_manifest, load_manifest, make_testset, run_training
from udtsep.tensor import SeededRng
from udtsep.verify import run_grad_checks

pytestmark = pytest.mark.acceptance

# reduced STFT for desk-scale training: 256-point frames, 128 of 129 bins
DESK_STFT = dict(window_size=256, hop=64, fft_size=256, kept_bins=128)


@pytest.fixture(scope="module")
def desk_corpora(tmp_path_factory):
    """40 clean / 40+40 mixture-stem training files, and a held-out corpus."""
    root = tmp_path_factory.mktemp("desk")
    synth_toy_corpus(root / "train", 40, ToyConfig(), seed=1)
    synth_toy_corpus(root / "heldout", 40, ToyConfig(), seed=2)
    return root


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(report_criterion):
    results = [run_grad_checks("double", seed=0), run_grad_checks("single", seed=0)]
    total = sum(r.seconds for r in results)
    passed = all(r.passed for r in results) and all(r.seconds < 120 for r in results)
    detail = "; ".join(f"{r.precision}: worst {r.worst:.2e} < {r.threshold:g} in {r.seconds:.1f}s "
                       f"({len(r.errors)} checks)" for r in results)
    report_criterion(1, "gradient correctness", passed, f"{detail}; total {total:.1f}s")
    for r in results:
        bad = {k: v for k, v in r.errors.items() if v >= r.threshold}
        assert not bad, f"{r.precision}: {bad}"
        assert r.seconds < 120


# 2 ---------------------------------------------------------------------------

def test_criterion_2_dsp_round_trip(report_criterion):
    rng = np.random.default_rng(2024)
    cfg = StftConfig()
    worst_rt = 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, 32000) * rng.uniform(0.01, 1.0)
        mag, phase = stft(WaveClip(x), cfg)
        y = istft(mag, phase, x.size).samples
        worst_rt = max(worst_rt, np.linalg.norm(y - x) / np.linalg.norm(x))
    v = rng.uniform(0, 10, (2001, 1024))
    back = decompress(compress(MagSpectrogram(v, False, cfg))).values
    worst_pc = float(np.max(np.abs(back - v) / np.maximum(np.abs(v), 1e-12)))
    passed = worst_rt < 1e-6 and worst_pc < 1e-6
    report_criterion(2, "dsp round trip", passed,
                     f"istft(stft(x)) worst rel err {worst_rt:.1e} over 100 clips; "
                     f"decompress(compress) worst rel err {worst_pc:.1e}")
    assert worst_rt < 1e-6
    assert worst_pc < 1e-6


# 3 ---------------------------------------------------------------------------

def _orthonormal(n, k, rng):
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return [q[:, j] for j in range(k)]


def test_criterion_3_metric_oracle(report_criterion):
    rng = np.random.default_rng(3)
    worst_db = 0.0
    worst_part = 0.0
    for i in range(1000):
        s1, s2 = rng.standard_normal(64), rng.standard_normal(64)
        if i % 2 == 0:
            est = rng.standard_normal(64)
        else:
            # inside span(s1, s2): SAR must come out infinite
            est = rng.normal() * s1 + rng.normal() * s2
        got = [si_sdr(s1, est), *sir_sar(bss_decompose(est, s1, s2))]
        want = [si_sdr_oracle(s1, est), *sir_sar_oracle(est, s1, s2)]
        if i % 2 == 1:
            assert got[2] == math.inf
            got, want = got[:2], want[:2]
        worst_db = max(worst_db, max(abs(g - w) for g, w in zip(got, want)))
        dec = bss_decompose(est, s1, s2)
        for g, w in zip((dec.target, dec.interference, dec.artifacts), decompose_oracle(est, s1, s2)):
            worst_part = max(worst_part, float(np.max(np.abs(g - w))) / np.linalg.norm(est))

    q1, q2, w = _orthonormal(32, 3, rng)
    examples = {
        "si_sdr([1,0],[1,1]) = 0 dB": (si_sdr([1.0, 0.0], [1.0, 1.0]), 0.0),
        "SIR of 0.8s1+0.2s2 = 12.04 dB": (sir_sar(bss_decompose(0.8 * q1 + 0.2 * q2, q1, q2))[0],
                                          10 * math.log10(0.64 / 0.04)),
        "SAR of s1+w, |w|=|s1| = 0 dB": (sir_sar(bss_decompose(q1 + w, q1, q2))[1], 0.0),
    }
    ex_err = max(abs(g - w) for g, w in examples.values())
    passed = worst_db < 1e-6 and ex_err < 1e-6
    report_criterion(3, "metric oracle equivalence", passed,
                     f"1000 instances, worst dB diff {worst_db:.1e}, worst component diff {worst_part:.1e}; "
                     f"worked examples worst diff {ex_err:.1e}")
    assert worst_db < 1e-6
    assert worst_part < 1e-9
    for name, (g, w) in examples.items():
        assert abs(g - w) < 1e-6, name


# 4 ---------------------------------------------------------------------------

def test_criterion_4_weight_sharing(desk_corpora, report_criterion):
    pool, clean = load_corpus(desk_corpora / "train")
    stft_cfg = StftConfig(**DESK_STFT)
    model = UdtModel(ModelConfig(n_bins=128, width=32), seed=4)
    state = TrainState.create(model, 5, lr=1e-3)
    data_rng = SeededRng(6)
    violations = 0
    shared = ("shared.enc", "shared.dec")
    before = {k: v.data.copy() for k, v in model.parameters().items() if k.startswith(shared)}
    for _ in range(1000):
        batch = make_batch(pool, clean, 4, "unpaired", data_rng, stft_cfg, crop_frames=32)
        train_step(model, state, batch)
        if not model.shared_blocks_identical():
            violations += 1
    moved = all(not np.array_equal(before[k], model.parameters()[k].data) for k in before)
    passed = violations == 0 and state.step == 1000 and moved
    report_criterion(4, "structural weight sharing", passed,
                     f"{state.step} toy-corpus steps, shared blocks bit-identical after every step "
                     f"({violations} violations), shared parameters updated: {moved}")
    assert violations == 0
    assert moved


# 5 ---------------------------------------------------------------------------

OVERFIT_LR = 1e-3


def _overfit(cls, step_fn, batch, max_steps=2000):
    model = cls(ModelConfig(n_bins=64, width=64), seed=0)
    state = TrainState.create(model, 1, lr=OVERFIT_LR)
    first = step_fn(model, state, batch).total
    ratio = 1.0
    for _ in range(max_steps - 1):
        ratio = step_fn(model, state, batch).total / first
        if ratio <= 0.2:
            break
    return ratio, state.step


def test_criterion_5_overfit(desk_corpora, report_criterion):
    pool, clean = load_corpus(desk_corpora / "train")
    cfg = StftConfig(128, 32, 128, 64)
    start = time.perf_counter()
    unpaired = make_batch(pool, clean, 8, "unpaired", SeededRng(0), cfg, crop_frames=64)
    paired = make_batch(pool, clean, 8, "paired", SeededRng(1), cfg, crop_frames=64)
    r_udt, n_udt = _overfit(UdtModel, train_step, unpaired)
    r_sup, n_sup = _overfit(SupervisedModel, supervised_step, paired)
    elapsed = time.perf_counter() - start
    passed = r_udt <= 0.2 and r_sup <= 0.2 and elapsed < 600
    report_criterion(5, "overfit sanity", passed,
                     f"UDT {r_udt:.3f} of initial after {n_udt} steps; supervised {r_sup:.3f} after "
                     f"{n_sup} steps; {elapsed:.0f}s")
    assert r_udt <= 0.2
    assert r_sup <= 0.2
    assert elapsed < 600


# 6 ---------------------------------------------------------------------------

SEPARATION = dict(
    DESK_STFT,
    steps=1000,
    batch_size=8,
    crop_frames=128,
    width=64,
    dropout=0.1,
    lr=1e-3,
    w_rec=1.0,
    w_cc=0.05,
    w_l2=1e-3,
)


def _train_and_score(corpora: Path, out: Path, mode: str, manifest):
    cfg = RunConfig(corpus=str(corpora / "train"), mode=mode, seed=6,
                    checkpoint=str(out / f"{mode}.udtw"), loss_log=str(out / f"{mode}.csv"),
                    **SEPARATION)
    model, _, _ = run_training(cfg)
    report = evaluate_manifest(load_manifest(manifest), model, cfg.stft_config())
    return report.summary()["si_sdr"]["median"]


def test_criterion_6_desk_separation(desk_corpora, tmp_path, report_criterion):
    start = time.perf_counter()
    manifest = make_testset(str(desk_corpora / "heldout"), str(tmp_path / "test"), 30, seed=7)
    baseline = evaluate_manifest(load_manifest(manifest)).summary()["si_sdr"]["median"]
    udt = _train_and_score(desk_corpora, tmp_path, "udt", manifest)
    sup = _train_and_score(desk_corpora, tmp_path, "supervised", manifest)
    elapsed = time.perf_counter() - start
    gain = udt - baseline
    passed = gain >= 5.0 and sup >= udt - 1.0 and elapsed <= 3600
    report_criterion(6, "desk-scale separation", passed,
                     f"median SI-SDR mixture {baseline:.2f} dB, UDT {udt:.2f} dB (+{gain:.2f}), "
                     f"supervised {sup:.2f} dB; {SEPARATION['steps']} steps each; {elapsed / 60:.1f} min")
    assert gain >= 5.0
    assert sup >= udt - 1.0
    assert elapsed <= 3600


# 7 ---------------------------------------------------------------------------

def _full_run(corpora: Path, out: Path):
    out.mkdir()
    cfg = RunConfig(corpus=str(corpora / "train"), mode="udt", seed=11, steps=20, batch_size=4,
                    crop_frames=32, width=16, lr=1e-3, checkpoint=str(out / "m.udtw"),
                    loss_log=str(out / "loss.csv"), recipe_log=str(out / "recipes.jsonl"), **DESK_STFT)
    model, _, _ = run_training(cfg)
    manifest = make_testset(str(corpora / "heldout"), str(out / "test"), 5, seed=12)
    report = evaluate_manifest(load_manifest(manifest), model, cfg.stft_config())
    report.write_csv(out / "eval.csv")
    files = [(out / name).read_bytes() for name in ("loss.csv", "eval.csv", "recipes.jsonl")]
    # the checkpoint header records output paths, so compare the stored arrays
    restored, _, _ = load_checkpoint(out / "m.udtw")
    arrays = b"".join(v.data.tobytes() for _, v in sorted(restored.parameters().items()))
    return files + [arrays]


def test_criterion_7_determinism(desk_corpora, tmp_path, report_criterion):
    a = _full_run(desk_corpora, tmp_path / "a")
    b = _full_run(desk_corpora, tmp_path / "b")
    names = ("loss log", "evaluation CSV", "recipe log", "checkpoint parameters")
    same = {n: x == y for n, x, y in zip(names, a, b)}
    passed = all(same.values())
    report_criterion(7, "determinism", passed,
                     ", ".join(f"{n} {'identical' if s else 'DIFFERENT'}" for n, s in same.items()))
    assert passed
