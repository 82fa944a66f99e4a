import dataclasses
import threading

import numpy as np
import pytest

from evolving_boxes import autodiff as ad
from evolving_boxes.config import desk_preset, paper_preset
from evolving_boxes.data import generate_scene
from evolving_boxes.errors import ConfigError, InvalidShapeError
from evolving_boxes.model import EvolvingBoxes

from helpers import loss_probe, probe_error


@pytest.fixture(scope="module")
def desk():
    return desk_preset()


@pytest.fixture(scope="module")
def model(desk):
    return EvolvingBoxes.build(desk.model, seed=0)


@pytest.fixture(scope="module")
def image(desk):
    return generate_scene(desk.scene, 0).image


def hand_count(w=(8, 16, 32, 32, 32), fused=(1, 3, 5), c61=4, c62=16, pn_fc=128, ftn_fc=512,
               roi=14, concat=True):
    total, c_in = 0, 3
    for width in w:
        total += width * c_in * 9 + width
        c_in = width
    total += sum(2 * w[b - 1] for b in fused)
    c = sum(w[b - 1] for b in fused)
    total += c61 * c * 9 + c61
    total += pn_fc * c61 * roi * roi + pn_fc
    total += 5 * pn_fc + 5
    total += c62 * c * 9 + c62
    total += ftn_fc * c62 * roi * roi + ftn_fc
    total += 5 * (ftn_fc + (pn_fc if concat else 0)) + 5
    return total


def test_same_seed_same_parameters(desk):
    a = EvolvingBoxes.build(desk.model, seed=3)
    b = EvolvingBoxes.build(desk.model, seed=3)
    c = EvolvingBoxes.build(desk.model, seed=4)
    for name in a.params:
        assert a.params[name].value.tobytes() == b.params[name].value.tobytes()
    assert any(not np.array_equal(a.params[n].value, c.params[n].value)
               for n in a.params if n.endswith("weight"))


def test_parameter_count_closed_form(desk, model):
    assert model.num_parameters() == hand_count()
    flat = dataclasses.replace(desk.model, concat_mode="ftn-only")
    assert EvolvingBoxes.build(flat).num_parameters() == hand_count(concat=False)
    last = dataclasses.replace(desk.model, fusion_mode="last-layer-only")
    assert EvolvingBoxes.build(last).num_parameters() == hand_count(fused=(5,))


def test_head_weights_are_small_gaussians(model):
    w = model.params["ftn.fc.weight"].value.ravel()
    assert w.size > 10_000
    assert abs(w.mean()) < 3 * 0.01 / np.sqrt(w.size)
    assert abs(w.std() - 0.01) < 0.001
    for name, p in model.params.items():
        if name.endswith(".bias") or name.endswith(".beta"):
            assert not p.value.any(), name
        if name.endswith(".gamma"):
            assert (p.value == 1).all(), name


def test_gaussian_backbone_init_option(desk):
    cfg = dataclasses.replace(desk.model, backbone_init="gaussian")
    w = EvolvingBoxes.build(cfg).params["dcn.block5.conv.weight"].value.ravel()
    assert w.size > 9000
    assert abs(w.std() - 0.01) < 0.001


def test_inconsistent_config_is_rejected(desk):
    with pytest.raises(ConfigError):
        EvolvingBoxes.build(dataclasses.replace(desk.model, fusion_layers=(3, 1)))
    with pytest.raises(ConfigError):
        EvolvingBoxes.build(dataclasses.replace(desk.model, pn_keep=0))


def test_zero_image_gives_finite_hyper_map(desk, model):
    g = ad.Graph()
    h = model.dcn_forward(g, np.zeros((3, 96, 128), np.float32), train=True, update_stats=False)
    assert np.isfinite(h.map.value).all()
    assert model.detect(np.zeros((3, 96, 128), np.float32)) is not None


def test_hyper_channels_follow_fusion_mode(desk, model, image):
    g = ad.Graph()
    h = model.dcn_forward(g, image)
    assert h.map.shape == (8 + 32 + 32, 24, 32)
    assert h.stride == 4
    last = EvolvingBoxes.build(dataclasses.replace(desk.model, fusion_mode="last-layer-only"))
    h5 = last.dcn_forward(ad.Graph(), image)
    assert h5.map.shape == (32, 6, 8)
    assert h5.stride == 16


def test_wrong_image_shape(model):
    with pytest.raises(InvalidShapeError):
        model.dcn_forward(ad.Graph(), np.zeros((3, 10, 10), np.float32))


def test_paper_geometry_gives_256_by_144():
    cfg = dataclasses.replace(paper_preset().model, backbone_widths=(1, 1, 1, 1, 1))
    m = EvolvingBoxes.build(cfg)
    h = m.dcn_forward(ad.Graph(), np.zeros((3, 540, 960), np.float32))
    assert h.map.shape[1:] == (144, 256)
    assert h.stride == pytest.approx(3.75)


def test_paper_ftn_head_reads_640(model):
    cfg = paper_preset().model
    assert cfg.ftn_fc_dim + cfg.pn_fc_dim == 640
    from evolving_boxes.model import parameter_shapes
    assert parameter_shapes(cfg)["ftn.head.weight"] == (5, 640)
    flat = dataclasses.replace(cfg, concat_mode="ftn-only")
    assert parameter_shapes(flat)["ftn.head.weight"] == (5, 512)
    assert model.params["ftn.head.weight"].shape == (5, 640)


def zero_heads(model):
    m = EvolvingBoxes(model.config, {n: ad.Parameter(n, p.value.copy())
                                     for n, p in model.params.items()}, model.bn)
    for name in ("pn.head.weight", "pn.head.bias", "ftn.head.weight", "ftn.head.bias"):
        m.params[name].value[...] = 0
    return m


def test_zero_heads_give_identity_boxes(model, image):
    m = zero_heads(model)
    g = ad.Graph()
    hyper = m.dcn_forward(g, image)
    pn = m.pn_forward(g, hyper)
    assert len(pn.boxes) == len(m.anchors) == 1728
    inside = ((m.anchors[:, 0] - m.anchors[:, 2] / 2 >= 0) & (m.anchors[:, 0] + m.anchors[:, 2] / 2 <= 128)
              & (m.anchors[:, 1] - m.anchors[:, 3] / 2 >= 0) & (m.anchors[:, 1] + m.anchors[:, 3] / 2 <= 96))
    np.testing.assert_allclose(pn.boxes[inside], m.anchors[inside], atol=1e-4)
    assert (pn.scores == 0.5).all()
    props = m.filter_proposals(pn)
    assert 0 < len(props) <= m.config.pn_keep
    out = m.ftn_forward(g, hyper, props)
    assert len(out.boxes) == len(props)
    np.testing.assert_allclose(out.boxes, props.boxes, atol=1e-4)
    assert (out.scores == 0.5).all()


def test_proposal_features_come_from_generating_anchor(model, image):
    g = ad.Graph()
    pn = model.pn_forward(g, model.dcn_forward(g, image))
    props = model.filter_proposals(pn)
    assert props.features.shape == (len(props), 128)
    np.testing.assert_array_equal(props.features.value, pn.fc.value[props.anchor_index])
    assert (props.scores > 0).all() and (props.scores < 1).all()


def test_empty_proposals_give_empty_output(model, image):
    g = ad.Graph()
    hyper = model.dcn_forward(g, image)
    props = model.filter_proposals(model.pn_forward(g, hyper)).subset(np.zeros(0, int))
    out = model.ftn_forward(g, hyper, props)
    assert len(out.boxes) == 0 and len(out.scores) == 0


def test_detect_contracts(model, image):
    dets = model.detect(image, score_threshold=0.0, nms_threshold=1.0)
    assert len(dets) <= model.config.pn_keep
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        assert d.box.x_min >= 0 and d.box.y_min >= 0
        assert d.box.x_max <= 128 + 1e-9 and d.box.y_max <= 96 + 1e-9
    assert model.detect(image, 0.0, 1.0) == dets


def test_detect_is_thread_safe(model, desk):
    images = [generate_scene(desk.scene, k).image for k in range(4)]
    expected = [model.detect(im, 0.0) for im in images]
    got = [None] * 4

    def run(k):
        got[k] = model.detect(images[k], 0.0)

    threads = [threading.Thread(target=run, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got == expected


def test_backbone_weight_probe_matches_gradient(desk):
    m = EvolvingBoxes.build(desk.model, seed=1)
    sample = generate_scene(desk.scene, 2)
    rng = np.random.default_rng(7)
    probes = []
    for b in range(1, 6):
        w = m.params[f"dcn.block{b}.conv.weight"].value
        probes.append((f"dcn.block{b}.conv.weight", int(rng.integers(w.size))))
    analytic, numeric = loss_probe(m, sample, desk.train, probes)
    live = np.abs(analytic) + np.abs(numeric) > 0
    assert live.any()
    assert probe_error(analytic, numeric).max() < 1e-2
