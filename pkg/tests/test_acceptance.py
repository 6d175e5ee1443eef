"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines as they
complete. The adaptation runs (criterion 7) dominate the runtime at a few
minutes on a laptop CPU.
"""

import math
import time

import numpy as np
import pytest

import aeroseg.tensor as T
from aeroseg import cli
from aeroseg import data as D
from aeroseg import metrics as M
from aeroseg import trainer as TR
from aeroseg.loss import (cross_entropy_pixelwise, dice_loss, domain_misalignment_loss,
                          soft_dice_loss, softmax_probabilities, total_loss)
from aeroseg.model import ArchConfig, forward, init_params, predict_mask
from aeroseg.tensor import Tensor, finite_difference_check, no_grad

SEEDS_PER_PRIMITIVE = 20
FD_TOL = 1e-4


def report_line(num, name, passed, detail=""):
    status = "PASS" if passed else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"[ACCEPTANCE {num}] {name}: {status}{suffix}")
    assert passed, f"criterion {num} ({name}) failed {suffix}"


# -- criterion 1: gradient fidelity ------------------------------------------------


def _primitive_checks(seed):
    """One finite-difference check per forward primitive at this seed.
    grad_reverse is excluded: its backward is a deliberate sign flip, not
    the derivative of its (identity) forward."""
    rng = np.random.default_rng(seed)
    kernel = Tensor(rng.normal(size=(3, 2, 3, 3)))
    bias = Tensor(rng.normal(size=3))
    weight = Tensor(rng.normal(size=(3, 5)))
    wvec = Tensor(rng.normal(size=3))
    probe = Tensor(rng.normal(size=(1, 2, 6, 6)))
    mix = Tensor(rng.normal(size=(1, 3, 4, 4)))
    up_weights = Tensor(rng.normal(size=(1, 2, 12, 12)))
    denominator = Tensor(np.abs(rng.normal(size=(3,))) + 1.0)

    def square_sum(t):
        return T.tensor_sum(T.mul(t, t))

    def away(shape, margin=0.05):
        values = rng.normal(size=shape)
        return Tensor(np.where(np.abs(values) < margin, values + np.sign(values) * margin, values))

    cases = {
        "conv2d": (lambda p: square_sum(T.conv2d(p, kernel, bias, 1, 1)), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "relu": (lambda p: square_sum(T.relu(p)), away((4, 4))),
        "log_softmax": (lambda p: T.tensor_sum(T.mul(T.log_softmax(p), mix)), Tensor(rng.normal(size=(1, 3, 4, 4)))),
        "upsample_nearest": (lambda p: T.tensor_sum(T.mul(T.upsample_nearest(p, 2), up_weights)), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "downsample_avg": (lambda p: square_sum(T.downsample_avg(p, 2)), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "global_average_pool": (lambda p: square_sum(T.global_average_pool(p)), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "linear": (lambda p: square_sum(T.linear(p, weight, wvec)), Tensor(rng.normal(size=(2, 5)))),
        "concat_channels": (lambda p: square_sum(T.concat_channels([p, probe])), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "clamp_min": (lambda p: square_sum(T.clamp_min(p, 0.0)), away((8,))),
        "add": (lambda p: square_sum(T.add(p, probe)), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "mul": (lambda p: T.tensor_sum(T.mul(p, probe)), Tensor(rng.normal(size=(1, 2, 6, 6)))),
        "div": (lambda p: square_sum(T.div(p, denominator)), Tensor(rng.normal(size=(3,)))),
        "exp": (lambda p: square_sum(T.exp(p)), Tensor(rng.normal(size=(4,)))),
        "sum": (lambda p: T.mul(T.tensor_sum(p), 2.0), Tensor(rng.normal(size=(5,)))),
    }
    return cases


def test_criterion_1_gradient_fidelity():
    started = time.monotonic()
    worst = {}
    for seed in range(SEEDS_PER_PRIMITIVE):
        for name, (f, point) in _primitive_checks(seed).items():
            result = finite_difference_check(f, point, tol=FD_TOL)
            worst[name] = max(worst.get(name, 0.0), result.max_rel_error)
            assert result.passed, f"{name} seed {seed}: rel error {result.max_rel_error}"

    # loss terms on random 16x16-or-smaller single-sample inputs
    for seed in range(SEEDS_PER_PRIMITIVE):
        rng = np.random.default_rng(9000 + seed)
        truth = rng.integers(0, 3, (1, 8, 8)).astype(np.uint8)
        point = Tensor(rng.normal(size=(1, 3, 8, 8)))
        assert finite_difference_check(lambda p: cross_entropy_pixelwise(p, truth),
                                       point, tol=FD_TOL).passed
        point = Tensor(rng.normal(size=(1, 3, 8, 8)))
        assert finite_difference_check(
            lambda p: dice_loss(softmax_probabilities(p), truth), point, tol=FD_TOL).passed
        labels = rng.integers(0, 3, 4)
        point = Tensor(rng.normal(size=(4, 3)))
        assert finite_difference_check(lambda p: domain_misalignment_loss(p, labels),
                                       point, tol=FD_TOL).passed

    # end-to-end objective on a 1-sample 16x16 batch, all named parameters
    arch = ArchConfig(num_classes=4, num_domains=3, stage_widths=(4, 6, 8, 10),
                      input_size=(16, 16))
    for seed in range(SEEDS_PER_PRIMITIVE):
        rng = np.random.default_rng(9500 + seed)
        params = init_params(arch, seed)
        images = rng.random((1, 3, 16, 16))
        masks = rng.integers(0, 4, (1, 16, 16)).astype(np.uint8)
        domains = rng.integers(0, 3, 1)

        def objective_fn(_p):
            out = forward(params, images)
            objective, _ = total_loss(out, masks, domains, 1.0, 1.0)
            return objective

        for name in params.tensors:
            # h an order smaller than the primitive checks: a relu kink within
            # +-h of a pre-activation corrupts the numeric estimate, and the
            # full network offers thousands of kinks
            result = finite_difference_check(objective_fn, params[name], h=1e-6,
                                             tol=FD_TOL, max_coords=3, seed=seed)
            assert result.passed, f"total loss wrt {name}, seed {seed}: {result.max_rel_error}"

    elapsed = time.monotonic() - started
    report_line(1, "gradient fidelity", elapsed < 120.0,
                f"all primitives/losses/objective < {FD_TOL} rel error, {elapsed:.0f}s")


# -- criterion 2: loss oracles ------------------------------------------------------


def test_criterion_2_loss_oracles():
    checks = []
    ce = cross_entropy_pixelwise(Tensor(np.zeros((1, 3, 1, 1))), np.zeros((1, 1, 1), dtype=np.uint8))
    checks.append(abs(ce.item() - math.log(3)) < 1e-12)

    probs = np.zeros((1, 2, 2, 2))
    truth = np.array([[[0, 1], [1, 0]]], dtype=np.uint8)
    for k in range(2):
        probs[0, k] = truth[0] == k
    checks.append(abs(dice_loss(Tensor(probs), truth, smoothing=0.0).item()) <= 1e-9)

    disjoint = np.zeros((1, 2, 1, 4))
    d_truth = np.array([[[1, 1, 0, 0]]], dtype=np.uint8)
    d_pred = np.array([0, 0, 1, 1])
    for k in range(2):
        disjoint[0, k, 0] = d_pred == k
    checks.append(abs(dice_loss(Tensor(disjoint), d_truth, smoothing=0.0).item() - 1.0) <= 1e-9)

    hand = soft_dice_loss(np.array([1.0, 1.0, 0.0, 0.0]),
                          Tensor(np.array([1.0, 0.0, 0.0, 0.0])), smoothing=0.0)
    checks.append(abs(hand.item() - 1.0 / 3.0) <= 1e-9)

    uniform = domain_misalignment_loss(Tensor(np.zeros((1, 3))), np.array([0]))
    checks.append(abs(uniform.item() - math.log(1.0 / 3.0)) <= 1e-9)

    clamped = domain_misalignment_loss(Tensor(np.array([[-50.0, 0.0, 0.0]])), np.array([0]),
                                       eps_clamp=1e-7)
    checks.append(abs(clamped.item() - math.log(1e-7)) <= 1e-9)

    report_line(2, "loss oracles", all(checks),
                "ln K, dice 0/1 and 1/3, ln(1/M), clamp at ln(1e-7)")


# -- criterion 3: metric oracle equivalence ------------------------------------------


def test_criterion_3_metric_oracle():
    exact = True
    for seed in range(50):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        truth = rng.integers(0, k, (6, 6)).astype(np.uint8)
        truth[rng.random((6, 6)) < 0.1] = 255
        pred = rng.integers(0, k, (6, 6)).astype(np.uint8)
        cm = M.ConfusionMatrix(k)
        M.confusion_accumulate(cm, pred, truth)
        fast = M.compute_report(cm)
        slow = M.brute_force_report([pred], [truth], k)
        exact &= fast.overall_accuracy == slow.overall_accuracy
        exact &= fast.per_class_f1 == slow.per_class_f1
        exact &= fast.per_class_iou == slow.per_class_iou

    cm = M.ConfusionMatrix(2)
    cm.counts[:] = [[1, 1], [1, 1]]
    fixture = M.compute_report(cm)
    exact &= fixture.overall_accuracy == 0.5
    exact &= all(abs(v - 1 / 3) < 1e-15 for v in fixture.per_class_iou)
    exact &= all(v == 0.5 for v in fixture.per_class_f1)

    report_line(3, "metric oracle equivalence", exact,
                "50 random mask pairs exact; binary fixture 0.5 / 1/3")


# -- criterion 4: published improvement arithmetic ------------------------------------


def test_criterion_4_improvement_arithmetic():
    ok = round(M.improvement(0.069, 0.047)) == 32
    ok &= round(M.improvement(0.052, 0.041)) == 21
    ok &= round(M.improvement(0.069, 0.064), 1) == 7.2
    report_line(4, "improvement arithmetic", ok, "32%, 21%, 7.2% before rounding")


# -- criterion 5: SPIE properties ------------------------------------------------------


def test_criterion_5_spie_properties():
    rng = np.random.default_rng(55)
    corpus = [rng.integers(0, 255, (16, 16, 3)).astype(np.uint8) for _ in range(10)]
    identical = M.spie(corpus, corpus)
    ok = identical.spie == 0.0 and identical.per_sample == [0.0] * 10

    boundary = np.zeros((8, 8), dtype=bool)
    boundary[1::2] = True
    ok &= M.boundary_disagreement(boundary, ~boundary) == 1.0

    other = [rng.integers(0, 255, (16, 16, 3)).astype(np.uint8) for _ in range(10)]
    first = M.spie(corpus, other)
    second = M.spie(corpus, other)
    ok &= all(0.0 <= v <= 1.0 for v in first.per_sample)
    ok &= first.per_sample == second.per_sample and first.spie == second.spie

    report_line(5, "SPIE properties", ok,
                "spie(x,x)=0, complementary=1, bounded, deterministic")


# -- criteria 6-7: training behavior ----------------------------------------------------

OVERFIT_ARCH = ArchConfig(num_classes=6, num_domains=3, input_size=(32, 32))


@pytest.fixture(scope="module")
def overfit_result(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit_corpus")
    D.synth_generate(seed=123, n_per_domain=8, size=(32, 32), num_classes=6, out_dir=root)
    datasets = [D.load_dataset(root / f"domain_{s}" / "manifest.txt") for s in ("a", "b")]
    config = TR.TrainConfig(epochs=200, batch_size=4, labelled_fraction=1.0, seed=0,
                            learning_rate=1e-2, optimizer="adam",
                            lambda1=1.0, lambda2=1.0, domain_loss_mode="literal")
    started = time.monotonic()
    checkpoint, log = TR.train_loop(datasets, OVERFIT_ARCH, config)
    elapsed = time.monotonic() - started
    train_sets, _ = TR.split_held_out(datasets, config.seed)
    train_samples = [s for d in train_sets for s in d.samples]
    report, _ = TR.evaluate_params(checkpoint.to_params(), train_samples)
    return log, report, elapsed


def test_criterion_6_overfit_capacity(overfit_result):
    log, report, elapsed = overfit_result
    final_ce = log.epochs[-1].mean_l0
    ok = final_ce < 0.05 and report.mean_iou > 0.90 and elapsed < 600.0
    report_line(6, "overfit capacity", ok,
                f"train CE {final_ce:.4f} < 0.05, train IoU {report.mean_iou:.3f} > 0.90, "
                f"{elapsed:.0f}s < 600s")


ADAPT_SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def adaptation_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("adapt_corpus")
    D.synth_generate(seed=777, n_per_domain=64, size=(32, 32), num_classes=6, out_dir=root)
    datasets = [D.load_dataset(root / f"domain_{s}" / "manifest.txt") for s in ("a", "b", "c")]
    hidden = D.load_hidden_truth(datasets[2].spec)

    def c_held_out_iou(checkpoint, seed):
        _, held = TR.split_held_out(datasets, seed)
        c_samples = [s for s in held if s.domain.symbol == "C"]
        params = checkpoint.to_params()
        cm = M.ConfusionMatrix(6)
        with no_grad():
            for sample in c_samples:
                out = forward(params, Tensor(sample.image[None]))
                M.confusion_accumulate(cm, predict_mask(out)[0], hidden[sample.id])
        return M.compute_report(cm).mean_iou

    results = {}
    for seed in ADAPT_SEEDS:
        for lam2 in (1.0, 0.0):
            config = TR.TrainConfig(epochs=50, batch_size=8, labelled_fraction=0.5,
                                    seed=seed, learning_rate=1e-2, optimizer="adam",
                                    lambda1=1.0, lambda2=lam2, domain_loss_mode="literal")
            checkpoint, log = TR.train_loop(datasets, OVERFIT_ARCH, config)
            results[(seed, lam2)] = {
                "first_l2": log.epochs[0].mean_l2,
                "last_l2": log.epochs[-1].mean_l2,
                "domain_acc": log.epochs[-1].domain_accuracy,
                "c_iou": c_held_out_iou(checkpoint, seed),
            }
    return results


def test_criterion_7_adaptation_behavior(adaptation_runs):
    ok = True
    details = []
    for seed in ADAPT_SEEDS:
        run = adaptation_runs[(seed, 1.0)]
        ok &= run["last_l2"] <= run["first_l2"]
        ok &= run["domain_acc"] <= 1.0 / 3.0 + 0.15
        details.append(f"seed {seed}: L2 {run['first_l2']:.2f}->{run['last_l2']:.2f}, "
                       f"domAcc {run['domain_acc']:.2f}")
    with_adapt = float(np.mean([adaptation_runs[(s, 1.0)]["c_iou"] for s in ADAPT_SEEDS]))
    without = float(np.mean([adaptation_runs[(s, 0.0)]["c_iou"] for s in ADAPT_SEEDS]))
    ok &= with_adapt >= without - 0.02
    details.append(f"C IoU {with_adapt:.3f} vs {without:.3f} (lambda2 1 vs 0)")
    report_line(7, "adaptation behavior", ok, "; ".join(details))


# -- criterion 8: reproducibility ---------------------------------------------------------


def test_criterion_8_reproducibility(tmp_path):
    corpus = tmp_path / "corpus"
    assert cli.main(["--seed", "5", "--out", str(corpus), "synth", "--n", "8",
                     "--size", "16x16", "--classes", "4"]) == 0
    outs = []
    for name in ("one", "two"):
        out = tmp_path / name
        config = tmp_path / f"{name}.cfg"
        config.write_text("\n".join([
            f"manifests = {corpus}/domain_a/manifest.txt, {corpus}/domain_b/manifest.txt, "
            f"{corpus}/domain_c/manifest.txt",
            f"out_dir = {out}",
            "epochs = 2",
            "batch_size = 4",
            "labelled_fraction = 0.5",
            "seed = 3",
            "input_size = 16x16",
            "num_classes = 4",
            "stage_widths = 4,6,8,10",
        ]) + "\n")
        assert cli.main(["train", "--config", str(config)]) == 0
        outs.append(out)

    ok = (outs[0] / "checkpoint.bin").read_bytes() == (outs[1] / "checkpoint.bin").read_bytes()
    ok &= (outs[0] / "steps.csv").read_bytes() == (outs[1] / "steps.csv").read_bytes()
    ok &= (outs[0] / "epochs.csv").read_bytes() == (outs[1] / "epochs.csv").read_bytes()

    checkpoint = TR.load_checkpoint(outs[0] / "checkpoint.bin")
    reloaded = TR.load_checkpoint(outs[0] / "checkpoint.bin")
    probe = np.random.default_rng(0).random((2, 3, 16, 16))
    with no_grad():
        a = forward(checkpoint.to_params(), Tensor(probe)).seg_logits.data
        b = forward(reloaded.to_params(), Tensor(probe)).seg_logits.data
    ok &= bool((a == b).all())
    report_line(8, "reproducibility", ok,
                "bit-identical checkpoints/logs; round-trip forward bit-identical")
