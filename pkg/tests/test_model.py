import numpy as np
import pytest

from lightvit import tensor as T
from lightvit.attention import local_attention
from lightvit.errors import ConfigError, ResolutionError
from lightvit.gradcheck import gradcheck
from lightvit.model import (
    TINY,
    VARIANTS,
    Block,
    ModelConfig,
    ResidualPatchMerging,
    Toggles,
    build,
    get_config,
    perturb,
    project_global_tokens,
)
from lightvit.nn import Linear

from conftest import t64

TABLE = {
    "T": (64, [(2, 64, 2), (6, 128, 4), (6, 256, 8)], 8),
    "S": (96, [(2, 96, 3), (6, 192, 6), (6, 384, 12)], 16),
    "B": (128, [(3, 128, 4), (8, 256, 8), (6, 512, 16)], 24),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_variant_cells(name):
    cfg = get_config(name)
    stem, stages, tokens = TABLE[name]
    assert cfg.stem_width == stem
    assert list(zip(cfg.depths, cfg.widths, cfg.heads)) == stages
    assert cfg.global_tokens == tokens and cfg.window == 7 and cfg.reduction == 4


def test_config_validation():
    with pytest.raises(ConfigError, match="heads 3 must divide width 64"):
        ModelConfig(heads=(3, 4, 8)).validate()
    with pytest.raises(ConfigError):
        build(ModelConfig(widths=(64, 100, 256)))
    with pytest.raises(ConfigError):
        get_config("XL")
    with pytest.raises(ConfigError):
        ModelConfig(toggles=Toggles(local=False, global_=False)).validate()
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"bogus": 1})


def test_config_dict_roundtrip():
    for cfg in list(VARIANTS.values()) + [TINY]:
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.digest() == cfg.digest()
    assert VARIANTS["T"].digest() != VARIANTS["T"].replace(global_tokens=4).digest()


@pytest.fixture(scope="module")
def model_t():
    return build(get_config("T"), seed=0)


def test_stage_shapes_224(model_t):
    with T.no_grad():
        out = model_t.forward_features(T.tensor(np.random.default_rng(0).standard_normal((3, 224, 224)), dtype=np.float32))
    assert [f.shape for f in out.features] == [(28, 28, 64), (14, 14, 128), (7, 7, 256)]
    assert out.global_tokens.shape == (8, 256)


def test_stage_shapes_448(model_t):
    with T.no_grad():
        out = model_t.forward_features(T.tensor(np.zeros((3, 448, 448), dtype=np.float32)))
    assert [f.shape for f in out.features] == [(56, 56, 64), (28, 28, 128), (14, 14, 256)]


def test_resolution_256_rejected_with_hint(model_t):
    with pytest.raises(ResolutionError, match="multiple of 224"):
        model_t.forward_features(T.tensor(np.zeros((3, 256, 256), dtype=np.float32)))
    with pytest.raises(ResolutionError, match="multiples of 32"):
        model_t.check_resolution(200, 224)


def test_stem_shapes_and_zero_image(model_t):
    assert model_t.stem(T.tensor(np.ones((3, 64, 64), dtype=np.float32))).shape == (8, 8, 64)
    assert not np.any(model_t.stem(T.tensor(np.zeros((3, 64, 64), dtype=np.float32))).data)


def test_same_seed_bitwise_and_different_seed():
    a, b, c = build(TINY, 3), build(TINY, 3), build(TINY, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    assert any(not np.array_equal(sa[k], sc[k]) for k in sa)
    img = T.tensor(np.random.default_rng(0).standard_normal((3, 32, 32)).astype(np.float32))
    assert np.array_equal(a.classify(img).data, b.classify(img).data)


def test_init_scheme():
    m = build(TINY, 0)
    sd = m.state_dict()
    assert np.all(sd["stages.0.blocks.0.norm1.weight"] == 1) and not np.any(sd["stages.0.blocks.0.norm1.bias"])
    assert not np.any(sd["stages.0.blocks.0.ffn.bidim.channel.weight"])
    assert not np.any(sd["head.bias"])
    w = sd["stages.1.blocks.0.attn.q.weight"]
    assert np.all(np.abs(w) <= 0.04) and w.std() > 0.01


def test_classify_outputs(model_t):
    img = T.tensor(np.random.default_rng(1).standard_normal((3, 224, 224)).astype(np.float32))
    with T.no_grad():
        logits = model_t.classify(img)
        assert logits.shape == (1000,)
        assert abs(float(T.softmax(logits.astype(np.float64)).data.sum()) - 1.0) < 1e-6
    m = build(TINY, 0)
    m.head.weight.data[...] = 0
    assert not np.any(m.classify(T.tensor(np.ones((3, 32, 32), dtype=np.float32))).data)


# --- patch merging ---------------------------------------------------------------


def ref_merge(x, merge):
    H, W, C = x.shape
    gamma, beta = merge.norm.weight.data, merge.norm.bias.data
    out = np.zeros((H // 2, W // 2, 2 * C))
    for i in range(H // 2):
        for j in range(W // 2):
            quad = []
            for di, dj in ((0, 0), (1, 0), (0, 1), (1, 1)):
                quad.extend(x[2 * i + di, 2 * j + dj])
            quad = np.array(quad)
            mu, var = quad.mean(), ((quad - quad.mean()) ** 2).mean()
            normed = (quad - mu) / np.sqrt(var + 1e-5) * gamma + beta
            pooled = sum(x[2 * i + di, 2 * j + dj] for di in (0, 1) for dj in (0, 1)) / 4
            for o in range(2 * C):
                out[i, j, o] = sum(normed[q] * merge.reduction.weight.data[q, o] for q in range(4 * C)) + sum(
                    pooled[c] * merge.residual.weight.data[c, o] for c in range(C)
                )
    return out


def _random_merge(C, rng):
    m = ResidualPatchMerging(C).astype(np.float64)
    for _, p in m.named_parameters():
        p.data[...] = rng.standard_normal(p.shape)
    return m


def test_patch_merging_matches_scalar_loop(rng):
    m = _random_merge(2, rng)
    x = rng.standard_normal((4, 4, 2))
    np.testing.assert_allclose(m(t64(x)).data, ref_merge(x, m), atol=1e-12)


def test_patch_merging_branches(rng):
    m = _random_merge(3, rng)
    x = t64(rng.standard_normal((2, 2, 3)))
    assert m(x).shape == (1, 1, 6)
    assert np.array_equal(m(x).data, (m.main_branch(x) + m.residual_branch(x)).data)
    m.reduction.weight.data[...] = 0
    assert np.array_equal(m(x).data, m.residual_branch(x).data)
    with pytest.raises(ConfigError):
        m(t64(np.zeros((3, 2, 3))))


# --- global-token projection -------------------------------------------------------


def test_project_global_tokens(rng):
    m = build(get_config("T"), 0)
    stage = m.stages[1]
    g = T.tensor(rng.standard_normal((8, 64)).astype(np.float32))
    assert project_global_tokens(g, stage).shape == (8, 128)
    stage.global_proj.weight.data = np.concatenate([np.eye(64), np.eye(64)], axis=1).astype(np.float32)
    stage.global_proj.bias.data[...] = 0
    out = project_global_tokens(g, stage).data
    assert np.array_equal(out[:, :64], g.data) and np.array_equal(out[:, 64:], g.data)
    stage.global_proj.weight.data[...] = 0
    assert not np.any(project_global_tokens(g, stage).data)


# --- blocks ---------------------------------------------------------------------------


def test_local_only_block_is_plain_windowed_block(rng):
    cfg = TINY.replace(global_tokens=0, toggles=Toggles(True, False, False, False))
    blk = Block(8, 2, cfg).astype(np.float64)
    perturb(blk, 1)
    assert not hasattr(blk.ffn, "bidim")
    x = t64(rng.standard_normal((4, 4, 8)))
    out, g = blk(x, None)
    h = x + local_attention(blk.norm1(x), blk.attn, 2)
    flat = h.reshape(16, 8)
    ref = flat + blk.ffn.fc2(T.gelu(blk.ffn.fc1(blk.ffn.norm(flat))))
    assert g is None
    assert np.array_equal(out.data, ref.reshape(4, 4, 8).data)


def test_block_shape_preserved(rng):
    blk = Block(8, 2, TINY).astype(np.float64)
    x, g = t64(rng.standard_normal((4, 6, 8))), t64(rng.standard_normal((2, 8)))
    xo, go = blk(x, g)
    assert xo.shape == x.shape and go.shape == g.shape


def test_block_gradcheck(rng):
    blk = perturb(Block(8, 2, TINY).astype(np.float64), 5)
    x, g = t64(rng.standard_normal((4, 4, 8))), t64(rng.standard_normal((2, 8)))
    wx, wg = rng.standard_normal((4, 4, 8)), rng.standard_normal((2, 8))

    def loss():
        xo, go = blk(x, g)
        return (xo * wx).sum() + (go * wg).sum()

    names, params = zip(*blk.named_parameters())
    for r in gradcheck(loss, [x, g, *params], ["x", "g", *names]):
        assert r.rel_err < 1e-4, r


def test_global_tokens_change_image_features(rng):
    m = perturb(build(TINY, 0, np.float64), 1)
    img = t64(rng.standard_normal((3, 32, 32)), grad=False)
    a = m.forward_features(img).features[0].data.copy()
    m.global_tokens.data += rng.standard_normal(m.global_tokens.shape)  # a constant shift would be normalized away
    b = m.forward_features(img).features[0].data
    assert not np.allclose(a, b)


def test_linear_param_layout():
    lin = Linear(4, 3)
    assert lin.weight.shape == (4, 3) and sum(p.size for p in lin.parameters()) == 15
