"""End-to-end acceptance checks, one test per criterion.

Each test records PASS or FAIL under its criterion number; the terminal
summary (see conftest.py) prints one line per criterion.
"""

import contextlib
import csv
import itertools
import math
import time

import numpy as np
import pytest

from facadet import functional as F
from facadet.cli import TABLE_COLUMNS, run
from facadet.data import SceneSpec, TARGET_PROPORTIONS, dataset_stats, generate_scene, scene_samples, \
    split_dataset, tiny_scene_spec
from facadet.fbsm import FBSM
from facadet.gradcheck import check_gradients
from facadet.metrics import ERROR_TYPES, ap50, area_bucket, evaluate_ap, match_detections, nms_indices, \
    tide_analysis
from facadet.model import ModelConfig, ablation_config, build_model, center_receptive_box, erf_map
from facadet.pmesa import PMESA, RetBlock, manhattan_decay_mask
from facadet.structures import Annotation, Detection
from facadet.tdath import TDATH, HeadOutputs, make_anchors
from facadet.tensor import Tensor, softmax_lastdim, softplus
from facadet.train import assign_batch, ciou_loss, desk_train_config, detection_loss, fit, samples_ap50, \
    tal_assign

from oracles import ap_reference, conv2d_loop, nms_reference, tal_reference

RESULTS: dict[int, tuple[str, str]] = {}

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(number: int, title: str):
    try:
        yield
    except BaseException as exc:
        RESULTS[number] = ("FAIL", f"{title}: {type(exc).__name__}: {exc}".splitlines()[0][:160])
        raise
    RESULTS.setdefault(number, ("PASS", title))


def leaf(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def det(box, score, cls=0, img=0):
    return Detection(img, cls, tuple(float(v) for v in box), float(score))


def gt(box, cls=0, img=0):
    return Annotation(img, cls, tuple(float(v) for v in box))


def test_1_ablation_harness(tmp_path):
    with criterion(1, "ablation harness runs all 8 configurations"):
        out = tmp_path / "ablate"
        assert run(["ablate", "--tiny", "--epochs", "2", "--scenes", "4", "--out", str(out)]) == 0
        with open(out / "ablation.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert tuple(rows[0]) == TABLE_COLUMNS
        assert [r["model"] for r in rows] == ["Baseline", "M1", "M2", "M3", "M4", "M5", "M6", "M7"]
        for r in rows:
            assert 0.0 <= float(r["AP50"]) <= 100.0 and int(r["params"]) > 0


def _gradient_cases(rng):
    """(name, fn, params) triples covering every differentiable building block."""
    x = leaf(rng, (2, 4, 6, 6))
    w = leaf(rng, (4, 2, 3, 3))
    b = leaf(rng, (4,))
    yield "conv2d", lambda: F.conv2d(x, w, b, 2, 1, 2), [x, w, b]

    dw = leaf(rng, (4, 1, 5, 5))
    yield "depthwise", lambda: F.depthwise_conv2d(x, dw, b), [x, dw, b]

    gamma, beta = leaf(rng, (4,), 0.5, 1.5), leaf(rng, (4,))
    yield "group_norm", lambda: F.group_norm(x, 2, gamma, beta), [x, gamma, beta]

    img = leaf(rng, (1, 2, 5, 5))
    u = Tensor(rng.uniform(0.1, 3.9, (1, 7)) + 0.05, requires_grad=True)
    v = Tensor(rng.uniform(0.1, 3.9, (1, 7)) + 0.05, requires_grad=True)
    yield "bilinear", lambda: F.bilinear_sample(img, u, v), [img, u, v]

    xd = leaf(rng, (1, 2, 5, 5))
    wd = leaf(rng, (3, 2, 3, 3))
    off = Tensor(rng.uniform(-0.8, 0.8, (1, 18, 5, 5)) + 0.013, requires_grad=True)
    yield "deformable", lambda: F.deformable_conv2d(xd, wd, None, off), [xd, wd, off]

    scores = leaf(rng, (3, 5), -2, 2)
    yield "softmax", lambda: softmax_lastdim(scores), [scores]

    ret = RetBlock(4, 2, 0.8, rng=rng).astype(np.float64)
    xr = leaf(rng, (1, 4, 3, 3))
    yield "attention", lambda: ret(xr), [xr, ret.q.weight, ret.k.weight, ret.v.weight, ret.relpos.weight]

    fb = FBSM(4, rng=rng).astype(np.float64)
    yield "fbsm", lambda: fb(x), [x, fb.entry.weight, fb.branches[2].weight, fb.exit.weight]

    pm = PMESA(4, 4, 2, rng=rng).astype(np.float64)
    xp = leaf(rng, (1, 4, 3, 3))
    yield "pmesa", lambda: pm(xp), [xp, pm.cv1.conv.weight, pm.blocks[1].q.weight, pm.cv2.conv.weight]

    head = TDATH((4, 4, 4), 2, rng=rng).astype(np.float64)
    lvl = head.levels[0]
    lvl.offset.weight.data[...] = 0.3 * rng.standard_normal(lvl.offset.weight.shape)
    for proj in lvl.crcs.proj:
        proj.weight.data[...] = rng.standard_normal(proj.weight.shape)
    feats = [leaf(rng, (1, 4, 4 >> i, 4 >> i)) for i in range(3)]

    def head_out():
        out = head(feats)
        return out.cls[0].sum() + out.ltrb[0].sum() * 0.5 + out.ltrb[1].sum()

    yield "tdath", head_out, feats + [lvl.gn1.conv.weight, lvl.split.fc_reg.weight, lvl.dcn_weight,
                                      lvl.cls_out.weight]

    pred = Tensor(np.array([[1.0, 1.5, 4.0, 6.0], [0.0, 0.0, 2.0, 3.0]]), requires_grad=True)
    target = np.array([[2.0, 1.0, 5.0, 5.5], [3.0, 1.0, 6.0, 2.5]])
    yield "ciou", lambda: ciou_loss(pred, target), [pred]

    cls = [leaf(rng, (1, 2, 4, 4), -3, 1), leaf(rng, (1, 2, 2, 2), -3, 1)]
    raw = [leaf(rng, (1, 4, 4, 4), -0.5, 1.5), leaf(rng, (1, 4, 2, 2), -0.5, 1.5)]
    targets = [(np.array([[2.0, 3.0, 14.0, 13.0], [10.0, 12.0, 30.0, 30.0]]), np.array([0, 1]))]
    build = lambda: HeadOutputs(cls, [softplus(r) for r in raw], (8, 16))
    frozen = assign_batch(build(), targets)
    yield "detection_loss", lambda: detection_loss(build(), targets, assignments=frozen).total, cls + raw


def test_2_gradient_integrity():
    with criterion(2, "finite-difference gradients within 1e-3, suite under 2 min"):
        rng = np.random.default_rng(7)
        start = time.perf_counter()
        worst = {}
        for name, fn, params in _gradient_cases(rng):
            worst[name] = max(check_gradients(fn, params, eps=1e-5, max_entries=40))
        elapsed = time.perf_counter() - start
        bad = {k: v for k, v in worst.items() if not v <= 1e-3}
        assert not bad, f"relative errors above 1e-3: {bad}"
        assert elapsed < 120, f"gradient suite took {elapsed:.1f}s"


def _conv_configs():
    # stride, padding, groups, kernel, input channels
    return list(itertools.product((1, 2), (0, 1, 2), (1, 2), (1, 3, 5), (2, 4)))


def _tal_case(seed):
    g = np.random.default_rng(seed)
    points, _ = make_anchors([(4, 4)], [8])
    scores = g.uniform(0.05, 0.95, (16, 3))
    pred = np.concatenate([points - g.uniform(2, 14, (16, 2)), points + g.uniform(2, 14, (16, 2))], axis=1)
    n = int(g.integers(0, 5))
    xy = g.uniform(0, 24, (n, 2))
    gts = np.concatenate([xy, xy + g.uniform(6, 20, (n, 2))], axis=1)
    return points, scores, pred, gts, g.integers(0, 3, n)


def test_3_oracle_equivalence():
    with criterion(3, "conv, zero-offset deformable, NMS and TAL match brute-force references"):
        rng = np.random.default_rng(3)
        configs = _conv_configs()
        assert len(configs) >= 50
        for stride, pad, groups, k, c in configs:
            x = rng.uniform(-1, 1, (2, c, 7, 6))
            w = rng.uniform(-1, 1, (4, c // groups, k, k))
            b = rng.uniform(-1, 1, 4)
            got = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, groups).data
            np.testing.assert_allclose(got, conv2d_loop(x, w, b, stride, pad, groups), atol=1e-5, rtol=0)

        for stride in (1, 2):
            x = rng.standard_normal((2, 3, 7, 6))
            w = rng.standard_normal((4, 3, 3, 3))
            ho, wo = (7 + 2 - 3) // stride + 1, (6 + 2 - 3) // stride + 1
            got = F.deformable_conv2d(Tensor(x), Tensor(w), None, Tensor(np.zeros((2, 18, ho, wo))), stride).data
            np.testing.assert_allclose(got, F.conv2d(Tensor(x), Tensor(w), None, stride, 1).data, atol=1e-5)

        for seed in range(80):
            g = np.random.default_rng(seed)
            n = int(g.integers(0, 7))
            boxes = []
            for _ in range(n):
                x0, y0 = g.integers(0, 3, 2)
                boxes.append((x0 * 8.0, y0 * 8.0, g.integers(x0 + 1, 5) * 8.0, g.integers(y0 + 1, 5) * 8.0))
            scores = [float(s) for s in g.integers(1, 4, n) / 4]
            for thr in (0.3, 0.5, 0.65):
                assert nms_indices(boxes, scores, thr) == nms_reference(boxes, scores, thr)

        for seed in range(60):
            points, scores, pred, gts, classes = _tal_case(seed)
            for topk in (3, 10):
                a = tal_assign(points, scores, pred, gts, classes, topk=topk)
                idx, _ = tal_reference(points, scores, pred, gts, classes, topk=topk)
                assert a.gt_index.tolist() == idx


class _Const:
    def __init__(self, value):
        self.value = value

    def __call__(self, x, value=None):
        return Tensor(np.full(x.shape, self.value, x.dtype))


@pytest.mark.parametrize("n", [1, 3, 6])
def test_4_branch_mean_exactness(n, monkeypatch):
    with criterion(4, "PMESA core equals the mean of stubbed branch constants bit-exactly"):
        rng = np.random.default_rng(n)
        blk = PMESA(8, 8, n, rng=rng)
        cs = rng.uniform(-2, 2, n).astype(np.float32)
        rs = rng.uniform(-2, 2, n).astype(np.float32)
        for b, c, r in zip(blk.blocks, cs, rs):
            monkeypatch.setattr(b, "attention", _Const(c))
            monkeypatch.setattr(b, "relpos_forward", _Const(r))
        out = blk.core(Tensor(np.zeros((1, 4, 5, 5), np.float32))).data
        total = np.float32(0)
        for c, r in zip(cs, rs):
            total = total + (c + r)
        assert np.all(out == total / np.float32(n))


def test_5_decay_mask_law():
    with criterion(5, "decay mask equals gamma**manhattan on all grids up to 6x6"):
        for gamma in (0.5, 0.9):
            for h, w in itertools.product(range(1, 7), repeat=2):
                d = np.asarray(manhattan_decay_mask(h, w, gamma).matrix)
                cells = [(r, c) for r in range(h) for c in range(w)]
                want = np.array([[gamma ** (abs(p[0] - q[0]) + abs(p[1] - q[1])) for q in cells] for p in cells])
                assert d.dtype == np.float32 and np.array_equal(d, want.astype(np.float32))
                assert np.array_equal(d, d.T)
                assert np.all(np.diag(d) == 1.0)


def _random_instance(seed):
    g = np.random.default_rng(seed)

    def box():
        x0, y0 = g.integers(0, 5, 2)
        return (x0 * 8.0, y0 * 8.0, g.integers(x0 + 1, 7) * 8.0, g.integers(y0 + 1, 7) * 8.0)

    gts = [gt(box(), int(g.integers(0, 2)), int(g.integers(0, 2))) for _ in range(g.integers(0, 4))]
    dets = []
    for _ in range(g.integers(0, 6)):
        if gts and g.random() < 0.6:
            base = gts[g.integers(len(gts))]
            b = np.array(base.box) + g.integers(-1, 2, 4) * 4.0
            if b[2] <= b[0] or b[3] <= b[1]:
                b = np.array(base.box)
            dets.append(det(b, g.integers(1, 5) / 5, base.class_id, base.image_id))
        else:
            dets.append(det(box(), g.integers(1, 5) / 5, int(g.integers(0, 2)), int(g.integers(0, 2))))
    return dets, gts


def test_6_metric_fidelity():
    with criterion(6, "AP matches the exhaustive reference; hand cases and bucket boundary exact"):
        ranges = [(0.0, math.inf), (0.0, 1024.0), (1024.0, 9216.0), (9216.0, math.inf)]
        for seed in range(300):
            dets, gts = _random_instance(seed)
            assert len(dets) <= 5 and len(gts) <= 3
            ref_dets = [(d.image_id, d.class_id, d.box, d.score) for d in dets]
            ref_gts = [(g.image_id, g.class_id, g.box) for g in gts]
            for thr in (0.5, 0.75):
                for rng_ in ranges:
                    got = evaluate_ap(dets, gts, thr, rng_).ap
                    want = ap_reference(ref_dets, ref_gts, thr, rng_)
                    assert (got is None and want is None) or got == pytest.approx(want, abs=1e-12)
        assert evaluate_ap([det((0, 0, 10, 10), 0.9)], [gt((0, 0, 10, 10))]).ap == 1.0
        assert evaluate_ap([det((50, 50, 60, 60), 0.9), det((0, 0, 10, 10), 0.8)], [gt((0, 0, 10, 10))]).ap == 0.5
        assert area_bucket(1024.0) == "small"
        assert area_bucket(1024.0 + 1e-9) == "medium"
        assert area_bucket(9216.0) == "medium" and area_bucket(9216.5) == "large"


def test_7_tide_partition():
    with criterion(7, "TIDE labels partition false positives; Bkg fix never hurts; fixtures match"):
        gts = [gt((0, 0, 10, 10)), gt((100, 0, 110, 10)), gt((200, 0, 210, 10)), gt((300, 0, 310, 10)),
               gt((500, 0, 510, 10))]
        dets = [det((0, 0, 10, 10), 0.95), det((0, 0, 10, 10), 0.90), det((100, 0, 110, 10), 0.85, cls=1),
                det((200, 0, 206, 5), 0.80), det((300, 0, 306, 5), 0.75, cls=1), det((400, 0, 410, 10), 0.70)]
        rep = tide_analysis(dets, gts, num_classes=2)
        assert rep.labels == [None, "Dupe", "Cls", "Loc", "Both", "Bkg"]
        assert rep.counts == {"Cls": 1, "Loc": 1, "Both": 1, "Dupe": 1, "Bkg": 1, "Miss": 1}

        for seed in range(200):
            g = np.random.default_rng(seed)
            dets, gts = _random_instance(seed)
            dets = dets + [det((g.integers(0, 40), 60, g.integers(41, 60), 70), 0.3)]
            rep = tide_analysis(dets, gts, num_classes=2)
            order, matched = match_detections(dets, gts, 0.5)
            fps = [i for i, m in zip(order, matched) if m < 0]
            assert all(rep.labels[i] in ERROR_TYPES[:5] for i in fps)
            assert all(rep.labels[i] is None for i, m in zip(order, matched) if m >= 0)
            assert rep.num_fp == len(fps) == sum(rep.counts[t] for t in ERROR_TYPES[:5])
            assert rep.delta_ap["Bkg"] >= 0.0
            kept = [d for d, lab in zip(dets, rep.labels) if lab != "Bkg"]
            assert rep.delta_ap["Bkg"] == pytest.approx(ap50(kept, gts, 2) - rep.baseline_ap50)


def _overfit_run(samples):
    model = build_model(ablation_config("M7", ModelConfig(width=16, input_size=128)))
    cfg = desk_train_config(epochs=60)
    log = fit(model, samples, cfg)
    return [r.loss for r in log.records], samples_ap50(model, samples)


@pytest.mark.slow
def test_8_end_to_end_overfit():
    with criterion(8, "tiny M7 overfits 8 scenes: AP50 >= 0.5, loss down >= 80%, reproducible, <= 10 min"):
        samples = scene_samples(tiny_scene_spec(), 8)
        assert samples[0].image.shape == (3, 128, 128)
        start = time.perf_counter()
        curve, ap = _overfit_run(samples)
        elapsed = time.perf_counter() - start
        assert elapsed <= 600, f"training took {elapsed:.0f}s"
        reduction = 1.0 - curve[-1] / curve[0]
        assert ap >= 0.5, f"training-set AP50 {ap:.3f}"
        assert reduction >= 0.8, f"loss {curve[0]:.3f} -> {curve[-1]:.3f}"
        again, ap_again = _overfit_run(samples)
        assert again == curve and ap_again == ap


def test_9_effective_receptive_field():
    with criterion(9, "attention ERF reaches beyond the conv receptive field; conv ERF is zero there"):
        base = ModelConfig(width=8, input_size=64)
        conv = build_model(ablation_config("Baseline", base))
        attn = build_model(ablation_config("M3", base))
        r0, r1, c0, c1 = center_receptive_box(conv, 64, stage=1)
        outside = np.ones((64, 64), bool)
        outside[max(r0, 0):r1 + 1, max(c0, 0):c1 + 1] = False
        assert outside.any()
        conv_map = erf_map(conv, 64, trials=2, stage=1)
        attn_map = erf_map(attn, 64, trials=2, stage=1)
        assert np.all(conv_map[outside] == 0.0)
        assert attn_map[outside].sum() > 0


def test_10_dataset_statistics():
    with criterion(10, "200-scene class proportions within 3 points; 1240 splits to 992/124/124"):
        anns = []
        for i in range(200):
            anns += generate_scene(SceneSpec(), i, image_id=i).annotations
        props = dataset_stats({"train": anns}).proportions()
        for name, target in TARGET_PROPORTIONS.items():
            assert abs(props[name] - target) <= 0.03, f"{name}: {props[name]:.4f} vs {target:.4f}"
        assert {area_bucket(a.area) for a in anns} == {"small", "medium", "large"}
        parts = split_dataset(list(range(1240)), seed=0)
        assert tuple(map(len, parts)) == (992, 124, 124)
        assert sorted(sum(parts, [])) == list(range(1240))
