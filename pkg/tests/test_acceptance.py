"""End-to-end acceptance checks, one test per criterion.

Each test records a single ``criterion N: PASS|FAIL ...`` line with the measured
values; the lines are repeated in the terminal summary so a plain ``pytest -v``
run shows all of them together.
"""

import json
import math
import time

import numpy as np
import pytest

from resmatch import autodiff as ad
from resmatch.autodiff import Tensor, backward
from resmatch.cli import main
from resmatch.data import LabeledDataset, load_cifar
from resmatch.distiller import DistillConfig, clamp_normalized, distill, init_patches
from resmatch.evaluator import StudentHyper, generate_soft_labels, train_student
from resmatch.metrics import entropy_bound, pixel_entropy
from resmatch.models import ModelSpec, build_model
from resmatch.recovery import AdamState, grad_step, recovery_loss
from resmatch.resample import make_plan, resample, resample_backward

from conftest import ACCEPTANCE, PRETRAIN_SECONDS, conv_reference, numerical_grad, rel_err

SEEDS = [0, 1, 2]


def record(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


# -- 1: closed-form cost ratio ------------------------------------------------------------

def test_criterion_01_cost_ratio(tmp_path, capsys):
    cfg = tmp_path / "cost.cfg"
    cfg.write_text("B = 2000\nk = 3\nd_ds = 200\nd_orig = 224\n")
    start = time.perf_counter()
    code = main(["cost", "--config", str(cfg), "--arch", "cnn-m"])
    elapsed = time.perf_counter() - start
    rep = json.loads(capsys.readouterr().out)
    analytic, measured = rep["analytic_ratio"], rep["measured_ratio"]
    ok = (code == 0 and rep["b"] == 500 and abs(analytic - 0.8986) <= 1e-4
          and abs(measured - analytic) <= 0.10 * analytic and elapsed < 1.0)
    assert record(1, ok, f"analytic={analytic:.6f} measured={measured:.6f} "
                         f"b={rep['b']} runtime={elapsed:.2f}s")


# -- 2: stage schedule counters -----------------------------------------------------------

def test_criterion_02_schedule_counters(shapes, teacher_s):
    cfg = DistillConfig(B=2000, k=3, d_ds=24, d_orig=32, ipc=1, n_candidates=2)
    start = time.perf_counter()
    ds = distill(cfg, [teacher_s], shapes.train, classes=[0, 1], workers=1)
    elapsed = time.perf_counter() - start
    (job,) = ds.jobs
    ok = (job.grad_steps == 2000 and job.arc_merges == 3
          and job.stage_resolutions == [24, 32, 24, 32] and elapsed < 60)
    assert record(2, ok, f"grad_steps={job.grad_steps} arc_merges={job.arc_merges} "
                         f"stages={job.stage_resolutions} runtime={elapsed:.1f}s")


# -- 3: ARC identity ----------------------------------------------------------------------

def test_criterion_03_arc_identity(shapes, teacher_s):
    base = dict(B=40, k=3, d_ds=24, d_orig=32, ipc=2, n_candidates=2, seed=5)
    with_arc = distill(DistillConfig(alpha=1.0, arc=True, **base), [teacher_s], shapes.train,
                       classes=[0, 1, 2], workers=1)
    without = distill(DistillConfig(alpha=1.0, arc=False, **base), [teacher_s], shapes.train,
                      classes=[0, 1, 2], workers=1)
    same = with_arc.images.tobytes() == without.images.tobytes()
    merges = sum(j.arc_merges for j in with_arc.jobs)
    assert record(3, same and merges > 0,
                  f"bit-identical={same} images={len(with_arc.images)} merges_applied={merges}")


# -- 4: gradient suite ----------------------------------------------------------------------

def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _gradient_cases(r):
    """(name, autodiff loss builder, float64 reference, input) with at most 64 inputs each."""
    x4 = r.standard_normal((1, 2, 4, 4))
    w = r.standard_normal((2, 2, 3, 3)) * 0.5
    b = r.standard_normal(2)
    probe = r.standard_normal((1, 2, 4, 4))
    probe2 = r.standard_normal((1, 2, 2, 2))
    gamma, beta = r.random(2) + 0.5, r.standard_normal(2)
    W, bias = r.standard_normal((3, 8)), r.standard_normal(3)
    y = np.array([0, 2, 1])
    target = _softmax(r.standard_normal((3, 5)))
    up = r.standard_normal((1, 2, 5, 3))
    probe_bn = r.standard_normal((2, 2, 2, 2))

    def pool_ref(v, op):
        return op(v.reshape(1, 2, 2, 2, 2, 2), axis=(3, 5))

    def bn_ref(v):
        mu = v.mean(axis=(0, 2, 3), keepdims=True)
        var = ((v - mu) ** 2).mean(axis=(0, 2, 3), keepdims=True)
        return gamma.reshape(1, -1, 1, 1) * (v - mu) / np.sqrt(var + 1e-5) + beta.reshape(1, -1, 1, 1)

    def log_softmax(z):
        z = z - z.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def bn_loss(t):
        out, (mu, var) = ad.batchnorm(t, Tensor(gamma), Tensor(beta), None, None, "train")
        return (out * Tensor(probe_bn)).sum() + ad.l2norm(mu) + ad.l2norm(var)

    def bn_loss_ref(v):
        mu = v.mean(axis=(0, 2, 3))
        var = ((v - mu.reshape(1, -1, 1, 1)) ** 2).mean(axis=(0, 2, 3))
        return (bn_ref(v) * probe_bn).sum() + np.linalg.norm(mu) + np.linalg.norm(var)

    def resample_ref(v):
        out = np.array([[[_bilinear_pixel(v[0, c], i, j, 5, 3) for j in range(3)] for i in range(5)]
                        for c in range(2)])
        return (out[None] * up).sum()

    return [
        ("conv2d", lambda t: (ad.conv2d(t, Tensor(w), Tensor(b), 1, 1) * Tensor(probe)).sum(),
         lambda v: (conv_reference(v, w, b, 1, 1) * probe).sum(), x4),
        ("conv2d-weight", lambda t: (ad.conv2d(Tensor(x4), t, Tensor(b), 2, 1)
                                     * Tensor(probe2)).sum(),
         lambda v: (conv_reference(x4, v, b, 2, 1) * probe2).sum(), w),
        ("batchnorm", bn_loss, bn_loss_ref, r.standard_normal((2, 2, 2, 2))),
        ("relu", lambda t: (ad.relu(t) * Tensor(probe)).sum(),
         lambda v: (np.maximum(v, 0) * probe).sum(), x4),
        ("maxpool2d", lambda t: (ad.maxpool2d(t) * Tensor(probe2)).sum(),
         lambda v: (pool_ref(v, np.max) * probe2).sum(), x4),
        ("avgpool2d", lambda t: (ad.avgpool2d(t) * Tensor(probe2)).sum(),
         lambda v: (pool_ref(v, np.mean) * probe2).sum(), x4),
        ("global_avgpool", lambda t: (ad.global_avgpool(t) * Tensor(probe2[:, :, 0, 0])).sum(),
         lambda v: (v.mean(axis=(2, 3)) * probe2[:, :, 0, 0]).sum(), x4),
        ("flatten", lambda t: (ad.flatten(t) * Tensor(probe.reshape(1, -1))).sum(),
         lambda v: (v.reshape(1, -1) * probe.reshape(1, -1)).sum(), x4),
        ("linear", lambda t: (ad.linear(t, Tensor(W), Tensor(bias)) * Tensor(target[:, :3])).sum(),
         lambda v: ((v @ W.T + bias) * target[:, :3]).sum(), r.standard_normal((3, 8))),
        ("cross_entropy", lambda t: ad.cross_entropy(t, y),
         lambda v: -log_softmax(v)[np.arange(3), y].mean(), r.standard_normal((3, 5))),
        ("kl_div", lambda t: ad.kl_div(t, target),
         lambda v: (target * (np.log(target) - log_softmax(v))).sum(axis=1).mean(),
         r.standard_normal((3, 5))),
        ("l2norm", lambda t: ad.l2norm(t), lambda v: np.sqrt((v ** 2).sum()), x4),
        ("channel_mean", lambda t: ad.l2norm(ad.channel_mean(t) - Tensor(b)),
         lambda v: np.linalg.norm(v.mean(axis=(0, 2, 3)) - b), x4),
        ("channel_var", lambda t: ad.l2norm(ad.channel_var(t) - Tensor(b)),
         lambda v: np.linalg.norm(((v - v.mean(axis=(0, 2, 3), keepdims=True)) ** 2)
                                  .mean(axis=(0, 2, 3)) - b), x4),
        ("mul/sub", lambda t: ((t * t - Tensor(probe)) * Tensor(probe)).sum(),
         lambda v: ((v * v - probe) * probe).sum(), x4),
        ("resample", lambda t: (resample(t, (5, 3)) * Tensor(up)).sum(), resample_ref, x4),
    ]


def test_criterion_04_gradient_suite():
    r = np.random.default_rng(4)
    errors = {}
    for name, build, ref, x in _gradient_cases(r):
        assert x.size <= 64, name
        t = Tensor(np.asarray(x, np.float32), requires_grad=True)
        backward(build(t))
        errors[name] = rel_err(t.grad, numerical_grad(ref, x))
    worst = max(errors, key=errors.get)

    adjoint_gaps = []
    for _ in range(50):
        h, w, th, tw = (int(v) for v in r.integers(1, 17, 4))
        x = r.standard_normal((1, 2, h, w)).astype(np.float32)
        yv = r.standard_normal((1, 2, th, tw)).astype(np.float32)
        lhs = float((resample(Tensor(x), (th, tw)).data.astype(np.float64) * yv).sum())
        back = resample_backward(Tensor(yv), make_plan((h, w), (th, tw))).data.astype(np.float64)
        rhs = float((x.astype(np.float64) * back).sum())
        adjoint_gaps.append(abs(lhs - rhs) / max(1.0, abs(lhs)))
    ok = all(e < 1e-3 for e in errors.values()) and max(adjoint_gaps) < 1e-5
    assert record(4, ok, f"ops={len(errors)} max_rel_err={errors[worst]:.2e} ({worst}) "
                         f"max_adjoint_gap={max(adjoint_gaps):.2e}")


# -- 5: bilinear oracle ------------------------------------------------------------------

def _bilinear_pixel(img, i_out, j_out, th, tw):
    h, w = img.shape
    ip = min(max((i_out + 0.5) * h / th - 0.5, 0.0), h - 1)
    jp = min(max((j_out + 0.5) * w / tw - 0.5, 0.0), w - 1)
    i, j = math.floor(ip), math.floor(jp)
    a, b = ip - i, jp - j
    i1, j1 = min(i + 1, h - 1), min(j + 1, w - 1)
    return ((1 - a) * (1 - b) * img[i, j] + a * (1 - b) * img[i1, j]
            + (1 - a) * b * img[i, j1] + a * b * img[i1, j1])


def test_criterion_05_bilinear_oracle():
    r = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        h, w, th, tw = (int(v) for v in r.integers(1, 17, 4))
        img = r.random((h, w)).astype(np.float32)
        got = resample(Tensor(img[None, None]), (th, tw)).data[0, 0].astype(np.float64)
        ref = np.array([[_bilinear_pixel(img.astype(np.float64), i, j, th, tw) for j in range(tw)]
                        for i in range(th)])
        worst = max(worst, float(np.abs(got - ref).max()))
    assert record(5, worst < 1e-6, f"pairs=50 max|delta|={worst:.2e}")


# -- 6: recovery descent on the toy instance ----------------------------------------------

def test_criterion_06_recovery_descent(teacher_s):
    # toy instance: batch of 4 Gaussian images at 32x32, labels 0..3, lambda 1, Adam lr 0.02
    y = np.array([0, 1, 2, 3])
    ratios, monotone = [], []
    for seed in SEEDS:
        x = np.random.default_rng(seed).standard_normal((4, 3, 32, 32)).astype(np.float32)
        state = AdamState.zeros_like(x, lr=0.02)
        totals, d_glob = [], []
        for _ in range(200):
            rep, grad = recovery_loss(teacher_s, x, y)
            totals.append(rep.total)
            d_glob.append(rep.d_global)
            x, state = grad_step(x, grad, state)
        final, _ = recovery_loss(teacher_s, x, y)
        ratios.append(final.total / totals[0])
        monotone.append(all(b < a for a, b in zip(d_glob[:50], d_glob[1:51])))
    ok = all(q <= 0.5 for q in ratios) and sum(monotone) >= 2
    assert record(6, ok, f"final/initial={[round(q, 4) for q in ratios]} "
                         f"d_global_strictly_decreasing={monotone}")


# -- 7 and 9: the shapes end-to-end pipeline ---------------------------------------------

E2E = DistillConfig(B=600, k=3, d_ds=24, d_orig=32, ipc=10, alpha=0.5, lam=1.0)
STUDENT = StudentHyper(epochs=200, lr=0.01)


def _student_report(teacher, images, labels, shapes):
    spec = ModelSpec("cnn-s", shapes.train.input_dims, shapes.train.num_classes)
    train = LabeledDataset(images, labels, shapes.train.num_classes, shapes.train.normalization,
                           "train", "eval-set")
    return train_student(spec, train, generate_soft_labels(teacher, images), STUDENT, SEEDS,
                         shapes.test)


@pytest.fixture(scope="module")
def pipeline(shapes, teacher_m):
    out = {"pretrain_s": PRETRAIN_SECONDS.get("cnn-m", float("nan"))}
    start = time.perf_counter()
    bank = init_patches(shapes.train, teacher_m, E2E)
    ds = distill(E2E, [teacher_m], shapes.train, bank=bank)
    out["distill_s"] = time.perf_counter() - start
    out["fadrm"] = _student_report(teacher_m, ds.images, ds.labels, shapes)
    out["eval_s"] = time.perf_counter() - start - out["distill_s"]

    patches, labels = bank.images()
    out["patch"] = _student_report(teacher_m, clamp_normalized(patches, shapes.train.normalization),
                                   labels, shapes)
    noise01 = np.random.default_rng(0).random(patches.shape).astype(np.float32)
    out["noise"] = _student_report(teacher_m, shapes.train.normalization.apply(noise01), labels, shapes)
    out["fadrm_images"] = ds.images
    return out


def test_criterion_07_precision_parity(shapes, teacher_m, pipeline):
    half_cfg = DistillConfig.from_dict({**E2E.to_dict(), "precision": "half16"})
    ds = distill(half_cfg, [teacher_m], shapes.train)
    half = _student_report(teacher_m, ds.images, ds.labels, shapes)
    full = pipeline["fadrm"]
    gap = abs(half.mean - full.mean)
    bytes_full = teacher_m.param_bytes()
    bytes_half = teacher_m.cast("half16").param_bytes()
    ok = gap <= 0.01 and bytes_half * 2 == bytes_full
    assert record(7, ok, f"full32={full.mean:.4f} {[round(a, 3) for a in full.accuracies]} "
                         f"half16={half.mean:.4f} {[round(a, 3) for a in half.accuracies]} "
                         f"gap={100 * gap:.2f}pt param_bytes {bytes_full}->{bytes_half}")


def test_criterion_09_end_to_end_efficacy(pipeline):
    fadrm, patch, noise = (pipeline[k].mean for k in ("fadrm", "patch", "noise"))
    wall = pipeline["pretrain_s"] + pipeline["distill_s"] + pipeline["eval_s"]
    ok = fadrm >= patch + 0.01 and fadrm >= noise + 0.10 and wall < 30 * 60
    assert record(9, ok, f"fadrm={fadrm:.4f} patch={patch:.4f} noise={noise:.4f} "
                         f"(pretrain {pipeline['pretrain_s']:.0f}s + distill "
                         f"{pipeline['distill_s']:.0f}s + eval {pipeline['eval_s']:.0f}s)")


# -- 8: information vanishing direction ---------------------------------------------------

def test_criterion_08_entropy_direction(shapes, teacher_s):
    exported = {0.5: [], 1.0: []}
    unclamped = {0.5: [], 1.0: []}
    for seed in SEEDS:
        for alpha in exported:
            cfg = DistillConfig.from_dict({**E2E.to_dict(), "alpha": alpha, "seed": seed})
            ds = distill(cfg, [teacher_s], shapes.train)
            exported[alpha].append(pixel_entropy(ds.images))
            unclamped[alpha].append(pixel_entropy(np.concatenate([j.images for j in ds.jobs])))
    arc, plain = float(np.mean(exported[0.5])), float(np.mean(exported[1.0]))
    assert record(8, arc > plain,
                  f"pixel_entropy alpha=0.5: {arc:.4f} bits, alpha=1.0: {plain:.4f} bits "
                  f"(before export clamp {np.mean(unclamped[0.5]):.4f} vs "
                  f"{np.mean(unclamped[1.0]):.4f})")


# -- 10: output-entropy bound ----------------------------------------------------------------

def test_criterion_10_entropy_bound(shapes, teacher_s, teacher_m):
    images = shapes.test.images[:64]
    ln_k = math.log(shapes.train.num_classes)
    untrained = build_model(ModelSpec("cnn-s", shapes.train.input_dims, shapes.train.num_classes), 3)
    zero_head = untrained.copy()
    for k in zero_head.params:
        if k.startswith("fc"):
            zero_head.params[k] = np.zeros_like(zero_head.params[k])
    worst, linear = -np.inf, True
    for model in (teacher_s, teacher_m, untrained, zero_head):
        h_max, _ = entropy_bound(model, images, 1)
        worst = max(worst, h_max - ln_k)
        for size in (1, 7, 80, 1000):
            linear &= entropy_bound(model, images, size)[1] == size * h_max
    ok = worst <= 1e-9 and linear
    assert record(10, ok, f"max(H_max - ln K)={worst:.3e} models=4 exact_linear_in_|C|={linear}")


# -- 11: reproducibility ----------------------------------------------------------------------

def test_criterion_11_reproducibility(tmp_path, capsys):
    root = tmp_path
    assert main(["gen-data", "--out", str(root / "data"), "--num-classes", "4", "--per-class", "10",
                 "--size", "16"]) == 0
    assert main(["pretrain", "--data", str(root / "data"), "--arch", "cnn-s", "--epochs", "2",
                 "--out", str(root / "teacher")]) == 0
    (root / "run.cfg").write_text(f"B = 16\nk = 3\nd_ds = 12\nd_orig = 16\nipc = 2\n"
                                  f"dataset = {root / 'data'}\n")
    assert main(["distill", "--config", str(root / "run.cfg"), "--teachers", str(root / "teacher"),
                 "--out", str(root / "first")]) == 0
    assert main(["distill", "--manifest", str(root / "first" / "manifest.json"),
                 "--out", str(root / "again")]) == 0
    capsys.readouterr()

    def blobs(out):
        return {p.relative_to(out).as_posix(): p.read_bytes()
                for p in sorted((out / "images").rglob("*")) if p.is_file()}

    first, again = blobs(root / "first"), blobs(root / "again")
    identical = bool(first) and first == again

    r = np.random.default_rng(11)
    labels = r.integers(0, 10, 50)
    pixels = r.integers(0, 256, (50, 3, 32, 32), dtype=np.uint8)
    ref = root / "data_batch_ref.bin"
    ref.write_bytes(b"".join(bytes([int(lab)]) + px.tobytes() for lab, px in zip(labels, pixels)))
    ds = load_cifar(ref)
    back = np.round(ds.normalization.invert(ds.images) * 255.0).astype(np.uint8)
    stride = ref.stat().st_size // len(ds)
    cifar_ok = (stride == 3073 and np.array_equal(ds.labels, labels) and np.array_equal(back, pixels))
    assert record(11, identical and cifar_ok,
                  f"rerun_byte_identical={identical} files={len(first)} "
                  f"cifar_stride={stride} cifar_round_trip={cifar_ok}")
