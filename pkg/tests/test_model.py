import numpy as np
import pytest

from facadet import functional as F
from facadet.layers import C2f, ConvAct, Module
from facadet.model import (ABLATIONS, ConfigError, ModelConfig, ablation_config, build_model,
                           center_receptive_box, erf_map, load_checkpoint, model_forward,
                           read_checkpoint, receptive_box, save_checkpoint)
from facadet.tdath import PlainHead
from facadet.tensor import ShapeError, Tensor, backward, concat_channels, use_tape

SMALL = ModelConfig(width=8, input_size=64)


def small(name="M7", **kw):
    d = ablation_config(name, SMALL).to_json()
    d.update(kw)
    return ModelConfig.from_json(d)


@pytest.fixture(scope="module")
def m7():
    return build_model(small("M7"))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.num_classes, cfg.width, cfg.input_size) == (7, 16, 128)
        assert cfg.pmesa_n == (3, 6, 6, 3)
        assert cfg.widths == (16, 32, 64, 128, 256)

    @pytest.mark.parametrize("kw, fragment", [
        ({"width": 6}, "multiple of 4"),
        ({"width": 12, "heads": 8}, "heads"),
        ({"input_size": 100}, "multiple of 32"),
        ({"depths": (1, 0, 1, 1)}, "depths"),
        ({"pmesa_n": (3, 6, 6)}, "pmesa_n"),
        ({"num_classes": 0}, "num_classes"),
    ])
    def test_each_problem_named(self, kw, fragment):
        with pytest.raises(ConfigError, match=fragment):
            ModelConfig(**kw).validate()

    def test_all_problems_reported_together(self):
        with pytest.raises(ConfigError) as exc:
            ModelConfig(width=6, input_size=100).validate()
        assert "multiple of 4" in str(exc.value) and "multiple of 32" in str(exc.value)

    def test_json_round_trip(self):
        cfg = small("M5", seed=4)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_ablation_table(self):
        assert len(ABLATIONS) == 8
        assert len(set(ABLATIONS.values())) == 8
        cfg = ablation_config("Baseline")
        assert not (cfg.use_fbsm or cfg.use_tdath or cfg.use_pmesa)


class TestStructure:
    def test_output_scales(self):
        model = build_model(ablation_config("Baseline"))
        out = model_forward(model, Tensor(np.zeros((1, 3, 128, 128), np.float32)))
        assert [c.shape[2:] for c in out.cls] == [(16, 16), (8, 8), (4, 4)]
        assert out.strides == (8, 16, 32)

    def test_backbone_shapes_shared(self):
        off = dict(build_model(small("Baseline")).named_parameters())
        on = dict(build_model(small("M7")).named_parameters())
        names = ["stem.conv.weight"] + [f"down.{i}.conv.weight" for i in range(4)]
        for name in names:
            assert off[name].shape == on[name].shape

    @pytest.mark.parametrize("switch", ["use_fbsm", "use_tdath"])
    def test_switch_adds_parameters(self, switch):
        for name, flags in ABLATIONS.items():
            cfg = small(name)
            if getattr(cfg, switch):
                continue
            on = build_model(small(name, **{switch: True})).num_parameters()
            assert on > build_model(cfg).num_parameters()

    def test_pmesa_parameter_delta_matches_closed_form(self):
        cfg = ModelConfig()
        delta = 0
        for i, n in enumerate(cfg.pmesa_n):
            c = cfg.widths[i + 1] // 2
            # retention branches: four 1x1 projections + depthwise 3x3, replacing one
            # two-conv 3x3 bottleneck and its extra concat slice
            delta += n * (4 * c * c + 14 * c) - (20 * c * c + 2 * c)
        base = build_model(ablation_config("Baseline")).num_parameters()
        assert build_model(ablation_config("M3")).num_parameters() - base == delta

    @pytest.mark.xfail(strict=True, reason="retention branches carry fewer weights than the 3x3 bottleneck chain at depth 1")
    def test_pmesa_switch_adds_parameters(self):
        base = build_model(ablation_config("Baseline")).num_parameters()
        assert build_model(ablation_config("M3")).num_parameters() > base

    def test_nested_layer_lists_are_registered(self):
        class Holder(Module):
            def __init__(self):
                self.grid = [[ConvAct(1, 2, 1)], [ConvAct(2, 2, 1), ConvAct(2, 1, 1)]]

        names = [n for n, _ in Holder().named_parameters()]
        assert "grid.1.1.conv.weight" in names and len(names) == 6

    @pytest.mark.parametrize("name", ["Baseline", "M7"])
    def test_head_parameters_are_trainable(self, name):
        model = build_model(small(name))
        head = [n for n, _ in model.named_parameters() if n.startswith("head.")]
        assert len(head) > 0
        if name == "M7":
            assert any(".crcs.down." in n for n in head)

    def test_bad_input_shape(self, m7):
        with pytest.raises(ShapeError):
            m7(Tensor(np.zeros((1, 3, 48, 64), np.float32)))
        with pytest.raises(ShapeError):
            m7(Tensor(np.zeros((1, 1, 64, 64), np.float32)))


class TestForward:
    def test_zeros_finite(self, m7):
        out = m7(Tensor(np.zeros((1, 3, 64, 64), np.float32)))
        assert all(np.isfinite(t.data).all() for t in out.cls + out.ltrb)

    def test_deterministic(self, m7, rng):
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        a, b = m7(x), m7(x)
        assert all(p.data.tobytes() == q.data.tobytes() for p, q in zip(a.cls + a.ltrb, b.cls + b.ltrb))

    def test_batch_equivalence(self, m7, rng):
        x = rng.standard_normal((2, 3, 64, 64)).astype(np.float32)
        joint = m7(Tensor(x))
        parts = [m7(Tensor(x[i:i + 1])) for i in range(2)]
        for lvl in range(3):
            for attr in ("cls", "ltrb"):
                got = getattr(joint, attr)[lvl].data
                want = np.concatenate([getattr(p, attr)[lvl].data for p in parts])
                np.testing.assert_allclose(got, want, atol=1e-5)

    @pytest.mark.parametrize("name", list(ABLATIONS))
    def test_every_ablation_runs_forward_backward(self, name, rng):
        model = build_model(small(name))
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        with use_tape():
            out = model(x)
            cls, reg = out.flatten()
            backward(cls.sum() + reg.sum())
        grads = [p.grad for p in model.parameters()]
        assert all(g is not None and np.isfinite(g).all() for g in grads)


class _ReferenceBaseline(Module):
    """Baseline detector wired by hand from the plain building blocks."""

    def __init__(self, w, num_classes):
        g = np.random.default_rng(99)
        self.convs = [ConvAct(3, w[0], 3, 2, rng=g)] + [ConvAct(w[i], w[i + 1], 3, 2, rng=g) for i in range(4)]
        self.stages = [C2f(w[i + 1], w[i + 1], 1, shortcut=True, rng=g) for i in range(4)]
        p3, p4, p5 = w[2:]
        self.fuse = [C2f(p5 + p4, p4, rng=g), C2f(p4 + p3, p3, rng=g), C2f(p3 + p4, p4, rng=g), C2f(p4 + p5, p5, rng=g)]
        self.downs = [ConvAct(p3, p3, 3, 2, rng=g), ConvAct(p4, p4, 3, 2, rng=g)]
        self.head = PlainHead((p3, p4, p5), num_classes, rng=g)

    def forward(self, x):
        x = self.convs[0](x)
        feats = []
        for conv, stage in zip(self.convs[1:], self.stages):
            x = stage(conv(x))
            feats.append(x)
        _, p3, p4, p5 = feats
        n4 = self.fuse[0](concat_channels([F.upsample_nearest2x(p5), p4]))
        o3 = self.fuse[1](concat_channels([F.upsample_nearest2x(n4), p3]))
        o4 = self.fuse[2](concat_channels([self.downs[0](o3), n4]))
        o5 = self.fuse[3](concat_channels([self.downs[1](o4), p5]))
        return self.head([o3, o4, o5])


def test_baseline_equals_hand_wired_network(rng):
    cfg = small("Baseline")
    model = build_model(cfg)
    ref = _ReferenceBaseline(cfg.widths, cfg.num_classes)
    src = [p for _, p in model.named_parameters()]
    dst = ref.parameters()
    # same parameter multiset, then copy by matching construction order of each part
    order = (["stem"] + [f"down.{i}" for i in range(4)] + [f"blocks.{i}" for i in range(4)]
             + ["td4", "td3", "bu4_fuse", "bu5_fuse", "bu3", "bu4", "head"])
    named = dict(model.named_parameters())
    ordered = [named[n] for prefix in order for n in named if n == prefix or n.startswith(prefix + ".")]
    assert len(ordered) == len(src) == len(dst)
    for a, b in zip(ordered, dst):
        assert a.shape == b.shape
        b.data = a.data.copy()
    x = Tensor(rng.standard_normal((2, 3, 64, 64)).astype(np.float32))
    got, want = model(x), ref(x)
    for a, b in zip(got.cls + got.ltrb, want.cls + want.ltrb):
        assert a.data.tobytes() == b.data.tobytes()


class TestCheckpoint:
    def test_round_trip_bit_exact(self, m7, tmp_path, rng):
        path = tmp_path / "m.ckpt"
        save_checkpoint(m7, path, extra={"epoch": 3})
        manifest, state = read_checkpoint(path)
        assert manifest["extra"] == {"epoch": 3} and manifest["version"] == 1
        loaded = load_checkpoint(path)
        assert loaded.cfg == m7.cfg
        for (n1, p1), (n2, p2) in zip(m7.named_parameters(), loaded.named_parameters()):
            assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
        x = Tensor(rng.standard_normal((1, 3, 64, 64)).astype(np.float32))
        assert m7(x).cls[0].data.tobytes() == loaded(x).cls[0].data.tobytes()

    def test_payload_is_little_endian_float32(self, m7, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(m7, path)
        manifest, _ = read_checkpoint(path)
        total = sum(e["count"] for e in manifest["tensors"])
        assert total == m7.num_parameters()
        raw = path.read_bytes()
        first = manifest["tensors"][0]
        start = len(raw) - 4 * total + 4 * first["offset"]
        head = np.frombuffer(raw[start:start + 16], "<f4")
        np.testing.assert_array_equal(head, dict(m7.named_parameters())[first["name"]].data.ravel()[:4])

    def test_rejects_foreign_file(self, tmp_path):
        bad = tmp_path / "x.bin"
        bad.write_bytes(b"nope" + bytes(20))
        with pytest.raises(ValueError):
            read_checkpoint(bad)


class TestReceptiveField:
    def test_receptive_box_single_conv(self):
        assert receptive_box([(3, 2, 1)], (0, 0)) == (-1, 1, -1, 1)
        assert receptive_box([(3, 2, 1)], (4, 2)) == (7, 9, 3, 5)

    def test_receptive_box_chain(self):
        # two stride-1 3x3 convs: 5x5 window centred on the cell
        assert receptive_box([(3, 1, 1), (3, 1, 1)], (5, 5)) == (3, 7, 3, 7)

    def test_stem_support_inside_box(self):
        model = build_model(small("Baseline"))
        x = Tensor(np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32), requires_grad=True)
        with use_tape():
            backward(model.stem(x)[:, :, 8, 8].sum())
        rows, cols = np.nonzero(np.abs(x.grad).sum(axis=(0, 1)))
        r0, r1, c0, c1 = receptive_box([(3, 2, 1)], (8, 8))
        assert rows.min() >= r0 and rows.max() <= r1 and cols.min() >= c0 and cols.max() <= c1

    def test_erf_conv_zero_outside_pmesa_reaches_beyond(self):
        conv = build_model(small("Baseline"))
        attn = build_model(small("M3"))
        box = center_receptive_box(conv, 64, stage=1)
        assert center_receptive_box(attn, 64, stage=1) is None
        r0, r1, c0, c1 = box
        outside = np.ones((64, 64), bool)
        outside[max(r0, 0):r1 + 1, max(c0, 0):c1 + 1] = False
        assert outside.any()
        conv_map = erf_map(conv, 64, trials=2, stage=1)
        attn_map = erf_map(attn, 64, trials=2, stage=1)
        assert conv_map.max() == 1.0 and attn_map.max() == 1.0
        assert np.all(conv_map[outside] == 0.0)
        assert attn_map[outside].sum() > 0
        assert np.all(attn_map[conv_map > 0] > 0)

    def test_erf_trials_validated(self, m7):
        with pytest.raises(ValueError):
            erf_map(m7, 64, trials=0)
