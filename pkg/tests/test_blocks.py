import numpy as np
import pytest

from stpnet.autodiff import Tensor, no_grad
from stpnet.blocks import SSM, EnBlock, MTBlock, StpnetConfig, UpBlock, UTrans, build_model, text_global_mean
from stpnet.errors import InvalidArgumentError
from stpnet.gradsuite import REDUCED_CONFIG, model_mix_check, run_gradient_suite, suite_names
from stpnet.textbank import CATEGORY_SIZES


def _x(rng, *shape):
    return Tensor(rng.standard_normal(shape).astype(np.float32))


def _labels(rng, n):
    return np.stack([rng.integers(0, k, n) for k in CATEGORY_SIZES], axis=1)


class TestShapes:
    def test_enblock(self, rng):
        assert EnBlock(1, 4)(_x(rng, 2, 1, 16, 16)).shape == (2, 4, 16, 16)

    def test_mtblock_halves(self, rng):
        m = MTBlock(4, 6)
        out = m(_x(rng, 2, 4, 8, 8), rng.standard_normal((2, 3, 5)))
        assert out.shape == (2, 6, 4, 4)
        assert (out.data >= 0).all()

    def test_mtblock_rejects_odd(self, rng):
        with pytest.raises(InvalidArgumentError):
            MTBlock(2, 2)(_x(rng, 1, 2, 5, 4), np.zeros((1, 2, 3)))

    def test_text_global_mean(self):
        t = np.arange(12.0).reshape(2, 2, 3)
        np.testing.assert_allclose(text_global_mean(t), [2.5, 8.5])

    def test_utrans_keeps_image_tokens(self, rng):
        ut = UTrans(8, 16, 5, heads=2)
        out, w = ut(_x(rng, 2, 8, 4, 4), rng.standard_normal((2, 3, 5)), return_weights=True)
        assert out.shape == (2, 8, 4, 4)
        assert w.shape == (2, 2, 19, 19)

    def test_utrans_token_count_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            UTrans(8, 16, 5, heads=2)(_x(rng, 1, 8, 2, 2))

    def test_utrans_heads_must_divide(self):
        with pytest.raises(InvalidArgumentError):
            UTrans(6, 4, 5, heads=4)

    def test_upblock(self, rng):
        up = UpBlock(8, 4, 4)
        assert up(_x(rng, 2, 8, 2, 2), _x(rng, 2, 4, 4, 4)).shape == (2, 4, 4, 4)

    def test_upblock_skip_mismatch(self, rng):
        with pytest.raises(InvalidArgumentError):
            UpBlock(8, 4, 4)(_x(rng, 2, 8, 2, 2), _x(rng, 2, 4, 6, 6))


def test_fresh_ssm_is_bit_identity(rng):
    x = _x(rng, 2, 4, 8, 8)
    out = SSM(4, (1, 2))(x)
    assert np.array_equal(out.data, x.data)


class TestModel:
    def test_forward_shapes(self, rng):
        model, bank = build_model(REDUCED_CONFIG)
        with no_grad():
            out = model(_x(rng, 2, 1, 32, 32), bank)
        assert out.logits.shape == (2, 1, 32, 32)
        assert out.f_v.shape == (2, REDUCED_CONFIG.text_dim)
        assert len(out.retrieval) == 2
        assert [t.shape for t in out.text] == [(2, 4, 8)] * 4
        assert out.mask().dtype == np.uint8

    def test_no_text_zeroes_features(self, rng):
        cfg = StpnetConfig(**{**REDUCED_CONFIG.to_dict(), "no_text": True})
        model, bank = build_model(cfg)
        with no_grad():
            out = model(_x(rng, 2, 1, 32, 32), bank)
        assert all(not t.any() for t in out.text)

    def test_teacher_forcing_uses_given_indices(self, rng):
        model, bank = build_model(REDUCED_CONFIG)
        lab = _labels(rng, 2)
        with no_grad():
            out = model(_x(rng, 2, 1, 32, 32), bank, text_indices=lab)
        np.testing.assert_array_equal(out.text[0][0], bank.tokens[0][lab[0, 0]].astype(np.float32))

    def test_wrong_image_shape(self, rng):
        model, bank = build_model(REDUCED_CONFIG)
        with pytest.raises(InvalidArgumentError):
            model(_x(rng, 1, 1, 16, 16), bank)

    def test_activations_kept(self, rng):
        model, bank = build_model(REDUCED_CONFIG)
        with no_grad():
            out = model(_x(rng, 1, 1, 32, 32), bank, keep_activations=True)
        assert sorted(out.activations) == ["up1", "up2", "up3", "up4"]

    @pytest.mark.parametrize("flag", ["no_text", "no_utrans_text", "swap_loc_order"])
    def test_ablation_shares_initialization(self, flag):
        full, _ = build_model(REDUCED_CONFIG)
        abl, _ = build_model(StpnetConfig(**{**REDUCED_CONFIG.to_dict(), flag: True}))
        a, b = full.state_dict(), abl.state_dict()
        assert list(a) == list(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_no_ssm_shares_remaining_weights(self):
        full, _ = build_model(REDUCED_CONFIG)
        abl, _ = build_model(StpnetConfig(**{**REDUCED_CONFIG.to_dict(), "no_ssm": True}))
        a, b = full.state_dict(), abl.state_dict()
        assert set(b) < set(a)
        assert all(np.array_equal(a[k], b[k]) for k in b)

    def test_same_seed_same_weights(self):
        a = build_model(REDUCED_CONFIG)[0].state_dict()
        b = build_model(REDUCED_CONFIG)[0].state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_roundtrip(self):
        assert StpnetConfig.from_dict(REDUCED_CONFIG.to_dict()) == REDUCED_CONFIG

    @pytest.mark.parametrize(
        "kw",
        [
            {"base_channels": (4, 8)},
            {"image_size": 40},
            {"utrans_stages": (5,)},
            {"heads": 3},
            {"retrieval_widths": (4, 4)},
            {"tau": 0.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            StpnetConfig(**kw)


def test_suite_names_cover_every_block():
    names = suite_names()
    for n in ("EnBlock", "MTBlock", "SSM", "UTrans", "UpBlock", "RetrievalEncoder", "seg_loss", "focal_loss"):
        assert n in names


def test_gradient_suite_blocks():
    reports = run_gradient_suite(include=["MTBlock", "SSM", "UTrans"], n_samples=30)
    assert len(reports) == 3
    assert all(r.passed for r in reports), [str(r) for r in reports]


@pytest.mark.slow
def test_end_to_end_mixed_loss_gradient():
    rep = model_mix_check(seed=0)
    assert rep.passed, str(rep)
