"""End-to-end acceptance criteria, each run at its stated tolerance.

Every test prints one ``ACCEPTANCE <n> PASS|FAIL`` line (visible in
``pytest -v`` output) before asserting.  Criteria 3-5 share one
session-scoped run: 250 phantoms (200 train / 50 test), 32x32, R = 4.
"""

import math
import time

import numpy as np
import pytest

from mrihallu.attack import AttackSpec, masked_iterative_fgsm
from mrihallu.cli import main as cli_main
from mrihallu.detect import run_detection_experiment, threshold_detector_eval
from mrihallu.metrics import METRICS, aggregate, nrmse, psnr, report_pair, ssim
from mrihallu.mri import CoilMaps, SamplingMask, forward_model, gen_phantom, make_coil_maps, make_sample, zero_fill
from mrihallu.numerics import fft2c
from mrihallu.recon import TrainConfig, build_model, load_checkpoint, save_checkpoint, train, tv_reconstruct
from gradcheck import check_graph
from oracles import dft2c_bruteforce, ssim_naive, tv1d_step_grid

N_TRAIN, N_TEST, SIZE, COILS, R, CF, SIGMA = 200, 50, 32, 4, 4.0, 0.08, 0.005
EPOCHS = 20
ATTACK = AttackSpec(epsilon=0.1, epsilon_mode="relative", iters=150)
TV_PARAMS = {"lam": 1e-3, "iters": 100, "eps_tv": 1e-2}


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def dataset():
    maps = make_coil_maps(SIZE, SIZE, COILS, 0)
    samples = [make_sample(i, h=SIZE, w=SIZE, n_coils=COILS, acceleration=R, center_fraction=CF,
                           noise_sigma=SIGMA, seed=0, coil_seed=0, maps=maps) for i in range(N_TRAIN + N_TEST)]
    return samples[:N_TRAIN], samples[N_TRAIN:], maps


@pytest.fixture(scope="session")
def trained(dataset):
    train_set, _, maps = dataset
    models, seconds = {}, {}
    for variant in ("unet_lite", "varnet_lite"):
        t0 = time.perf_counter()
        m = build_model(variant, (SIZE, SIZE)).init(0)
        train(m, train_set, TrainConfig(epochs=EPOCHS, batch_size=8, lr=0.05, seed=0), maps=maps)
        models[variant] = m
        seconds[variant] = time.perf_counter() - t0
    return models, seconds


@pytest.fixture(scope="session")
def attacked(dataset, trained):
    _, test_set, maps = dataset
    model = trained[0]["unet_lite"]
    t0 = time.perf_counter()
    results = []
    for i, s in enumerate(test_set):
        spec = AttackSpec(**{**ATTACK.to_dict(), "seed": i})
        results.append(masked_iterative_fgsm(model, s.kspace, spec, mask=s.mask, maps=maps))
    return results, time.perf_counter() - t0


def test_criterion_1_numerics(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    dft_err = float(np.max(np.abs(fft2c(x) - dft2c_bruteforce(x))))
    y = rng.normal(size=(4, 32, 32)) + 1j * rng.normal(size=(4, 32, 32))
    parseval = abs(np.linalg.norm(fft2c(y)) - np.linalg.norm(y))
    grad_errs = [check_graph(seed) for seed in range(25)]
    elapsed = time.perf_counter() - t0
    ok = dft_err <= 1e-12 and parseval <= 1e-10 and max(grad_errs) < 1e-4 and elapsed < 10
    report(capsys, 1, ok, f"dft err {dft_err:.2e}, parseval {parseval:.2e}, "
                          f"max grad rel err {max(grad_errs):.2e} over 25 graphs, {elapsed:.1f}s")
    assert ok


def test_criterion_2_tv(capsys):
    s = make_sample(0, h=SIZE, w=SIZE, n_coils=COILS, acceleration=R, center_fraction=CF,
                    noise_sigma=SIGMA, seed=1, coil_seed=0)
    _, info = tv_reconstruct(s.kspace, make_coil_maps(SIZE, SIZE, COILS, 0), 1e-3, 100, return_info=True)
    max_increase = float(np.max(np.diff(info.objective)))

    x = gen_phantom(16, 16, 6, seed=3)
    maps = make_coil_maps(16, 16, 3, 1)
    z = forward_model(x, maps, SamplingMask(np.ones(16, dtype=np.int8), 1.0, 0.5))
    full_err = float(np.max(np.abs(tv_reconstruct(z, maps, 1e-8, 50) - x)))

    lam = 0.08
    step = np.r_[np.full(8, 0.2), np.full(8, 0.8)]
    z1 = fft2c(step[:, None].astype(complex))[None]
    out = tv_reconstruct(z1, CoilMaps(np.ones((1, 16, 1), complex)), lam, 15000, eps_tv=2e-4)[:, 0]
    grid_err = float(np.max(np.abs(out - tv1d_step_grid(step, lam))))

    ok = max_increase <= 1e-12 and full_err < 1e-3 and grid_err < 1e-3
    report(capsys, 2, ok, f"max objective increase {max_increase:.2e}, full-sampling err {full_err:.2e}, "
                          f"1-D grid-search err {grid_err:.2e}")
    assert ok


def test_criterion_3_training(capsys, dataset, trained):
    _, test_set, maps = dataset
    models, seconds = trained
    zf = np.mean([ssim(s.ground_truth, zero_fill(s.kspace)) for s in test_set])
    scores = {v: float(np.mean([ssim(s.ground_truth, m.apply(s.kspace, s.mask, maps)) for s in test_set]))
              for v, m in models.items()}
    total = sum(seconds.values())
    ok = all(v > zf for v in scores.values()) and total < 300
    report(capsys, 3, ok, f"held-out SSIM zero-fill {zf:.4f}, unet_lite {scores['unet_lite']:.4f}, "
                          f"varnet_lite {scores['varnet_lite']:.4f}; training {total:.0f}s")
    assert ok


def test_criterion_4_attack(capsys, dataset, trained, attacked):
    _, test_set, maps = dataset
    model = trained[0]["unet_lite"]
    results, elapsed = attacked
    budget_ok = all(np.max(np.abs(r.delta_star)) <= r.epsilon for r in results)
    reports = [report_pair(s.kspace, r.delta_star, model, mask=s.mask, maps=maps, perturbed=r.perturbed_kspace)
               for s, r in zip(test_set, results)]
    agg = aggregate(reports)
    in_ssim = agg["input_pair"]["ssim"]["mean"]
    rec_ssim = agg["recon_pair"]["ssim"]["mean"]
    ratios = np.array([r.best_loss / r.baseline_loss for r in results])
    success = float(np.mean(ratios <= 0.1))
    parts = {"a": budget_ok, "b": in_ssim >= 0.99, "c": rec_ssim <= in_ssim - 0.03, "d": success >= 0.8,
             "time": elapsed < 600}
    ok = all(parts.values())
    report(capsys, 4, ok, f"(a) budget {'ok' if budget_ok else 'violated'}; (b) input SSIM {in_ssim:.4f} "
                          f"(need >= 0.99); (c) recon SSIM {rec_ssim:.4f} (need <= {in_ssim - 0.03:.4f}); "
                          f"(d) {success:.0%} of {len(results)} samples at best_loss <= 10% baseline "
                          f"(median ratio {np.median(ratios):.3f}, need 80%); {elapsed:.0f}s; "
                          f"failed parts: {[k for k, v in parts.items() if not v] or 'none'}")
    assert ok


def test_criterion_5_detection(capsys, dataset, trained, attacked):
    _, test_set, maps = dataset
    model = trained[0]["unet_lite"]
    results, _ = attacked
    t0 = time.perf_counter()
    perturbed = {s.id: r.perturbed_kspace for s, r in zip(test_set, results)}
    records = run_detection_experiment(test_set, model, ATTACK, TV_PARAMS, lambda s: maps, perturbed)
    evals = {m: threshold_detector_eval(records, m, 20) for m in METRICS}
    control = run_detection_experiment(test_set, model, ATTACK, TV_PARAMS, lambda s: maps,
                                       {s.id: s.kspace for s in test_set})
    control_aucs = [threshold_detector_eval(control, m).auc for m in METRICS]
    elapsed = time.perf_counter() - t0
    passing = [m for m, e in evals.items() if e.overlap >= 0.6 and e.auc <= 0.75]
    ok = (len(records) == 2 * len(test_set) and len(passing) >= 2
          and all(a == 0.5 for a in control_aucs) and elapsed < 600)
    detail = ", ".join(f"{m} overlap {e.overlap:.2f} auc {e.auc:.3f}" for m, e in evals.items())
    report(capsys, 5, ok, f"{detail}; {len(passing)}/3 metrics overlapping; control AUCs {control_aucs}; "
                          f"{elapsed:.0f}s")
    assert ok


def test_criterion_6_metric_axioms(capsys):
    rng = np.random.default_rng(6)
    a = rng.random((32, 32))
    identity = ssim(a, a) == 1.0 and nrmse(a, a) == 0.0
    try:
        nrmse(np.zeros((8, 8)), a[:8, :8])
        zero_ref_errors = False
    except ValueError:
        zero_ref_errors = True
    levels = [0.01, 0.02, 0.05, 0.1, 0.2]
    means = [np.mean([psnr(a, a + rng.normal(0, sd, a.shape)) for _ in range(20)]) for sd in levels]
    monotone = all(x > y for x, y in zip(means, means[1:]))
    b = rng.random((16, 16))
    oracle_err = abs(ssim(a[:16, :16], b) - ssim_naive(a[:16, :16], b))
    ok = identity and zero_ref_errors and monotone and oracle_err < 1e-10
    report(capsys, 6, ok, f"identities {identity}, zero-reference error {zero_ref_errors}, "
                          f"PSNR means {[round(float(m), 2) for m in means]}, SSIM oracle err {oracle_err:.1e}")
    assert ok


def _tree(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_7_determinism_and_formats(capsys, tmp_path):
    args = ["--n-samples", "8", "--n-test", "4", "--height", "16", "--width", "16", "--n-coils", "2",
            "--epochs", "2", "--iters", "10", "--tv-iters", "20"]
    trees = []
    for name in ("a", "b"):
        out = str(tmp_path / name)
        codes = [cli_main([stage, "--out", out, *args])
                 for stage in ("phantom-gen", "train", "attack", "eval", "detect", "report")]
        assert codes == [0] * 6
        trees.append(_tree(tmp_path / name))
    kinds = {"ksc": ("data/", "attack/unet_lite/perturbed/"), "checkpoint": ("models/",), "reports": ("reports/",)}
    identical = {}
    for kind, prefixes in kinds.items():
        names = [n for n in trees[0] if n.startswith(prefixes)]
        identical[kind] = bool(names) and all(trees[0][n] == trees[1].get(n) for n in names)

    from mrihallu import ksc
    s = ksc.read_dataset(tmp_path / "a" / "data")[0]
    ksc.write_sample(tmp_path / "rt", s, {k: v for k, v in s.meta.items()})
    ksc_rt = ((tmp_path / "rt" / f"{s.id}.ksp.bin").read_bytes() == trees[0][f"data/{s.id}.ksp.bin"]
              and (tmp_path / "rt" / f"{s.id}.json").read_bytes() == trees[0][f"data/{s.id}.json"])
    m = load_checkpoint(tmp_path / "a" / "models" / "unet_lite.json")
    save_checkpoint(m, tmp_path / "rt" / "unet_lite")
    ckpt_rt = all((tmp_path / "rt" / f"unet_lite.{ext}").read_bytes() == trees[0][f"models/unet_lite.{ext}"]
                  for ext in ("json", "bin"))
    ok = all(identical.values()) and ksc_rt and ckpt_rt
    report(capsys, 7, ok, f"byte-identical {identical}, KSC round trip {ksc_rt}, checkpoint round trip {ckpt_rt}")
    assert ok
