import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from trafficflow.blocks import ConvGRUCell
from trafficflow.geometry import DegenerateGeometryError, GridSpec, SE3Transform, SizeError
from trafficflow.model import (LevelOutput, ModelConfig, MultiScaleEncoder, PointGRU,
                               PointLevelEmbedding, SegmentationHead, TemporalHidden, TrafficAwareFlowNet,
                               TVFDecoder, TVFEncoder, FlowHead, weighted_kabsch)
from trafficflow.od_stub import PillarBEVStub

from conftest import random_se3

pytestmark = pytest.mark.usefixtures("f64")


def tiny_config(**kw):
    base = dict(levels=2, gamma=2, point_channels=8, embed_channels=16, tvf_channels=8, axial_blocks=1,
                k_cross=4, k_self=4, k_encoder=4, k_tvf=5, grid=GridSpec((0.0, -8.0), 4.0, (4, 4)),
                variant="superego", supervision="cross_plus", od_channels=8, od_base_shape=(8, 8))
    base.update(kw)
    return ModelConfig(**base)


def frame(rng, n=12, spread=6.0):
    pos = np.column_stack([rng.uniform(2, 14, n), rng.uniform(-6, 6, n), rng.uniform(0, 2, n)])
    return SimpleNamespace(positions=pos, rrv=rng.normal(size=n), rcs=rng.normal(size=n),
                           class_id=rng.integers(0, 5, n))


# ----------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(k_tvf=7)
    with pytest.raises(ValueError):
        tiny_config(levels=1)
    with pytest.raises(ValueError):
        tiny_config(variant="ego", supervision="cross_plus")
    with pytest.raises(ValueError):
        tiny_config(variant="superego", supervision="cross")
    assert ModelConfig.vod().gamma == 1 and ModelConfig.vod().k_tvf == 9


def test_level_sizes():
    assert tiny_config(levels=4, gamma=2).level_sizes(256) == [32, 64, 128, 256]
    assert ModelConfig(levels=4, gamma=1).level_sizes(100) == [100] * 4


def test_fingerprint_stable():
    assert tiny_config().fingerprint() == tiny_config().fingerprint()
    assert tiny_config().fingerprint() != tiny_config(k_tvf=9).fingerprint()


# ------------------------------------------------------------------ kabsch

def test_kabsch_identity(rng):
    p = torch.tensor(rng.normal(size=(10, 3)))
    torch.testing.assert_close(weighted_kabsch(p, p, torch.ones(10)), torch.eye(4, dtype=p.dtype),
                               rtol=0, atol=1e-12)


def test_kabsch_recovery_and_zero_weight_outlier(rng):
    t = random_se3(rng)
    p = rng.normal(size=(20, 3)) * 4
    q = t.transform_points(p)
    m = weighted_kabsch(torch.tensor(p), torch.tensor(q), torch.ones(20)).numpy()
    np.testing.assert_allclose(m, t.matrix, atol=1e-9)
    q_out = q.copy()
    q_out[3] += [10.0, -4.0, 2.0]
    w = torch.ones(20)
    w[3] = 0.0
    m2 = weighted_kabsch(torch.tensor(p), torch.tensor(q_out), w).numpy()
    np.testing.assert_allclose(m2, t.matrix, atol=1e-9)
    SE3Transform(m2)  # satisfies the rigid-transform invariants


def test_kabsch_degenerate(rng):
    line = torch.tensor([[float(i), 0.0, 0.0] for i in range(6)])
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(line, line + 1.0, torch.ones(6))
    p = torch.tensor(rng.normal(size=(5, 3)))
    w = torch.tensor([1.0, 1.0, 0.0, 0.0, 0.0])
    with pytest.raises(DegenerateGeometryError):
        weighted_kabsch(p, p, w)


def test_kabsch_gradient(rng):
    from conftest import check_gradients
    p = torch.tensor(rng.normal(size=(8, 3)))
    q = torch.tensor(random_se3(rng).transform_points(p.numpy()) + rng.normal(size=(8, 3)) * 0.1,
                     requires_grad=True)
    w = torch.tensor(rng.uniform(0.2, 1.0, 8), requires_grad=True)
    probe = torch.tensor(rng.normal(size=(4, 4)))
    assert check_gradients(lambda: (weighted_kabsch(p, q, w) * probe).sum(), [q, w]) < 1e-4


# ----------------------------------------------------------------- modules

def test_encoder_level_sizes_and_errors(rng):
    cfg = tiny_config(levels=3, gamma=2)
    enc = MultiScaleEncoder(cfg)
    pos = rng.normal(size=(40, 3))
    levels = enc(pos, torch.randn(40, 8))
    assert [len(i) for i, _ in levels] == [10, 20, 40]
    assert [f.shape for _, f in levels] == [(10, 8), (20, 8), (40, 8)]
    np.testing.assert_array_equal(levels[-1][0], np.arange(40))
    with pytest.raises(SizeError):
        enc.level_indices(rng.normal(size=(3, 3)))
    same = MultiScaleEncoder(tiny_config(levels=3, gamma=1)).level_indices(pos)
    assert all(len(i) == 40 for i in same)


def test_set_abstraction_single_neighbour(rng):
    enc = MultiScaleEncoder(tiny_config(k_encoder=1))
    sa = enc.stages[0]
    sa.k = 1
    pos = rng.normal(size=(5, 3))
    feat = torch.randn(5, 8)
    expected = sa.mlp(torch.cat([feat, torch.zeros(5, 3)], dim=-1))
    torch.testing.assert_close(sa(pos, pos, feat), expected, rtol=0, atol=1e-14)


def test_point_embedding_single_cross_neighbour(rng):
    cfg = tiny_config(k_cross=1, k_self=1)
    emb = PointLevelEmbedding(cfg)
    p = rng.normal(size=(6, 3))
    q = p + 0.01
    pf, qf = torch.randn(6, 8), torch.randn(6, 8)
    e_cross_expected = emb.cross.v(qf + emb.cross.pe(torch.tensor(q - p)))
    expected = emb.self_attn.v(e_cross_expected + emb.self_attn.pe(torch.zeros(6, 3)))
    torch.testing.assert_close(emb(torch.tensor(p), q, pf, qf), expected, rtol=0, atol=1e-12)
    with pytest.raises(SizeError):
        PointLevelEmbedding(tiny_config(k_cross=7))(torch.tensor(p), q, pf, qf)


def test_point_embedding_translation_invariance(rng):
    emb = PointLevelEmbedding(tiny_config())
    p, q = rng.normal(size=(10, 3)), rng.normal(size=(9, 3))
    pf, qf = torch.randn(10, 8), torch.randn(9, 8)
    shift = np.array([3.0, -2.0, 0.5])
    a = emb(torch.tensor(p), q, pf, qf)
    b = emb(torch.tensor(p + shift), q + shift, pf, qf)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_point_embedding_exact_warp_hits_correspondence(rng):
    from trafficflow.geometry import knn_points
    p = rng.normal(size=(10, 3)) * 3
    t = np.array([0.4, 0.1, 0.0])
    q = p + t
    idx = knn_points(p + t, q, 1)
    np.testing.assert_array_equal(idx[:, 0], np.arange(10))


def _zero_module(m):
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()


def test_tvf_encoder_zero_case(rng):
    cfg = tiny_config()
    enc = TVFEncoder(cfg, ConvGRUCell(8, 8))
    _zero_module(enc)
    prev = LevelOutput(np.arange(6), rng.normal(size=(6, 3)) + [6, 0, 0], torch.randn(6, 8),
                       torch.zeros(6, 3), torch.randn(6, 16), None)
    tvf = enc(prev, torch.zeros(8, 8, 8), None)
    assert tvf.shape == (4, 4, 8)
    assert torch.equal(tvf, torch.zeros_like(tvf))


def test_tvf_motion_single_cell(rng):
    cfg = tiny_config()
    enc = TVFEncoder(cfg, ConvGRUCell(8, 8))
    pos = np.array([[5.0, -7.0, 0.0], [5.5, -6.5, 1.0], [6.0, -7.5, 0.3]])
    motion = enc.motion(pos, torch.randn(3, 24))
    nz = motion.abs().sum(-1) > 0
    assert nz.sum() == 1 and nz[1, 0]


def test_tvf_decoder_neighbourhood_and_uniform_field():
    cfg = tiny_config(k_tvf=9, grid=GridSpec((0.0, 0.0), 1.0, (5, 5)))
    dec = TVFDecoder(cfg)
    center = np.array([[2.5, 2.5, 0.0]])
    cells = sorted(dec.neighbor_cells(center)[0].tolist())
    assert cells == sorted(r * 5 + c for r in (1, 2, 3) for c in (1, 2, 3))
    uniform = torch.randn(8).expand(5, 5, 8)
    query = torch.randn(1, 24).expand(2, 24)
    pts = torch.tensor([[1.5, 1.5, 0.0], [3.5, 2.5, 0.0]])
    # relative offsets differ but keys/values share one feature; with PE zeroed the output is position-free
    _zero_module(dec.attn.pe)
    out = dec(pts, query, uniform)
    torch.testing.assert_close(out[0], out[1], rtol=0, atol=1e-12)


def test_tvf_decoder_single_cell_is_value():
    cfg = tiny_config(k_tvf=5)
    dec = TVFDecoder(cfg)
    dec.k = 1
    tvf = torch.randn(4, 4, 8)
    pt = torch.tensor([[6.0, -2.0, 0.0]])  # row 1, col 1
    ctr = torch.tensor(cfg.grid.cell_centers()[5])
    expected = dec.attn.v(tvf[1, 1] + dec.attn.pe(ctr - pt[0, :2]))
    torch.testing.assert_close(dec(pt, torch.randn(1, 24), tvf)[0], expected, rtol=0, atol=1e-12)


def test_flow_head_residual(rng):
    cfg = tiny_config()
    head = FlowHead(16, cfg)
    with torch.no_grad():
        head.out.weight.zero_()
        head.out.bias.zero_()
    coarse = torch.randn(7, 3)
    flow, emb = head(torch.tensor(rng.normal(size=(7, 3))), [torch.randn(7, 16)], coarse)
    assert torch.equal(flow, coarse)
    assert emb.shape == (7, 16)


def test_segmentation_head():
    seg = SegmentationHead(16)
    with torch.no_grad():
        seg.mlp.layers[-1].weight.zero_()
        seg.mlp.layers[-1].bias.zero_()
    assert torch.equal(seg(torch.randn(5, 16)), torch.full((5,), 0.5))
    # probability increases with the final bias
    e = torch.randn(5, 16)
    lo = seg(e)
    with torch.no_grad():
        seg.mlp.layers[-1].bias += 1e-3
    assert torch.all(seg(e) > lo)


def test_point_gru(rng):
    gru = PointGRU(4, k=3)
    feats = torch.randn(5, 4)
    pos = rng.normal(size=(5, 3))
    out, hidden = gru(feats, pos, None)
    np.testing.assert_array_equal(hidden.positions, pos)
    with torch.no_grad():
        gru.gates.weight.zero_()
        gru.gates.bias[4:] = 60.0
    kept, _ = gru(feats, pos, None)
    torch.testing.assert_close(kept, feats, rtol=0, atol=1e-14)
    prev = TemporalHidden(pos, torch.randn(5, 4))
    carried, _ = gru(torch.randn(5, 4), pos, prev)
    torch.testing.assert_close(carried, prev.features, rtol=0, atol=1e-14)


def test_point_gru_unrolled_oracle(rng):
    gru = PointGRU(1, k=1)
    clouds = [np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0]]) + 0.01 * t for t in range(3)]
    xs = [torch.randn(3, 1) for _ in range(3)]
    hidden, outs = None, []
    for pos, x in zip(clouds, xs):
        h, hidden = gru(x, pos, hidden)
        outs.append(h)
    wg, bg = gru.gates.weight.detach(), gru.gates.bias.detach()
    wc, bc = gru.cand.weight.detach(), gru.cand.bias.detach()
    sig = lambda v: 1 / (1 + math.exp(-v))
    state = [x.item() for x in xs[0]]
    for t in range(3):
        new = []
        for i in range(3):
            x, old = xs[t][i].item(), state[i]
            r = sig(wg[0, 0] * x + wg[0, 1] * old + bg[0])
            z = sig(wg[1, 0] * x + wg[1, 1] * old + bg[1])
            c = math.tanh(wc[0, 0] * x + wc[0, 1] * r * old + bc[0])
            new.append(z * old + (1 - z) * c)
        state = new
        np.testing.assert_allclose(outs[t][:, 0].detach().numpy(), state, rtol=1e-12)


# ------------------------------------------------------------ full network

def _net(cfg, seed=0):
    torch.manual_seed(seed)
    return TrafficAwareFlowNet(cfg).double()


def test_forward_shapes_and_determinism(rng):
    cfg = tiny_config(levels=3, gamma=2)
    p, q = frame(rng, 24), frame(rng, 20)
    stub = PillarBEVStub(GridSpec((0.0, -8.0), 2.0, (8, 8)), 3, 8).double()
    out = _net(cfg)(p, q, od_pyramid=stub(q))
    assert [len(l.index) for l in out.levels] == [6, 12, 24]
    assert out.flow.shape == (24, 3)
    assert all(l.tvf.shape == (4, 4, 8) for l in out.levels[1:])
    again = _net(cfg)(p, q, od_pyramid=stub(q))
    assert torch.equal(out.flow, again.flow)


def test_level_one_zero_params_gives_zero_flow(rng):
    cfg = tiny_config()
    net = _net(cfg)
    _zero_module(net)
    out = net(frame(rng), frame(rng))
    assert torch.equal(out.levels[0].flow, torch.zeros(6, 3))
    assert torch.equal(out.flow, torch.zeros(12, 3))


def test_ego_correction_touches_only_static_points(rng):
    cfg = tiny_config(variant="ego", supervision="cross")
    net = _net(cfg)
    p, q = frame(rng, 16), frame(rng, 16)
    out = net(p, q)
    raw = out.levels[-1].flow
    static = out.static_mask
    moving = ~static
    assert torch.equal(out.flow[moving], raw[moving])
    if static.sum() >= 3:
        omega = out.omega.detach().numpy()
        pos = p.positions[static.numpy()]
        expected = pos @ omega[:3, :3].T + omega[:3, 3] - pos
        np.testing.assert_allclose(out.flow[static].detach().numpy(), expected, atol=1e-10)
    assert torch.equal(out.static_mask, out.seg_prob <= 0.5)


def test_ego_correction_override_mask(rng):
    cfg = tiny_config(variant="ego", supervision="cross")
    net = _net(cfg)
    p, q = frame(rng, 16), frame(rng, 16)
    override = np.zeros(16, dtype=bool)
    override[:8] = True
    out = net(p, q, static_override=override)
    raw = out.levels[-1].flow
    assert torch.equal(out.flow[8:], raw[8:])
    assert torch.equal(out.static_mask, torch.tensor(override))


def test_point_only_config_has_no_tvf(rng):
    net = _net(tiny_config(use_tvf=False, use_od=False))
    out = net(frame(rng), frame(rng))
    assert out.levels[1].tvf is None and out.levels[1].e_traffic is None
