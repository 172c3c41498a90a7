import pytest
import torch

from codecrestore.degradation_prior import DpEncoder, encode_dp
from codecrestore.errors import ShapeError
from codecrestore.v2t import (
    PatchEnhancer,
    TextCondition,
    V2TAdapter,
    V2TPath,
    VisualEncoder,
)


class TestDpEncoder:
    def setup_method(self):
        torch.manual_seed(0)
        self.enc = DpEncoder(d_dp=64).eval()

    def test_eval_deterministic(self):
        x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
        assert torch.equal(self.enc(x), self.enc(x))

    def test_output_dim_default_64(self):
        x = torch.rand(2, 3, 64, 64)
        out = self.enc(x)
        assert out.shape == (2, 64)
        assert torch.isfinite(out).all()

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ShapeError):
            self.enc(torch.rand(1, 3, 40, 40))

    def test_finite_for_all_01_inputs(self):
        for x in (torch.zeros(1, 3, 32, 32), torch.ones(1, 3, 32, 32)):
            assert torch.isfinite(self.enc(x)).all()

    def test_encode_dp_wrapper_carries_hint(self):
        emb = encode_dp(self.enc, torch.rand(3, 64, 64), task_hint="jpeg_qf05")
        assert emb.vector.shape == (64,)
        assert emb.source_task_hint == "jpeg_qf05"

    def test_single_image_unbatched(self):
        out = self.enc(torch.rand(3, 32, 32))
        assert out.shape == (64,)


class TestPatchEnhancer:
    def test_identity_at_init(self):
        torch.manual_seed(2)
        enh = PatchEnhancer(patch=8, dim=16, depth=2)
        x = torch.rand(2, 3, 32, 32)
        torch.testing.assert_close(enh(x), x)

    def test_output_shape(self):
        torch.manual_seed(3)
        enh = PatchEnhancer(patch=8, dim=16, depth=2)
        with torch.no_grad():
            enh.unembed.weight.normal_()
        x = torch.rand(1, 3, 48, 48)
        assert enh(x).shape == x.shape

    def test_patch_divisibility(self):
        enh = PatchEnhancer(patch=8)
        with pytest.raises(ShapeError):
            enh(torch.rand(1, 3, 36, 36))

    def test_patchify_roundtrip(self):
        from codecrestore.v2t import _patchify, _unpatchify

        x = torch.arange(2 * 3 * 16 * 16, dtype=torch.float32).reshape(2, 3, 16, 16)
        tokens = _patchify(x, 8)
        assert tokens.shape == (2, 4, 3 * 64)
        torch.testing.assert_close(_unpatchify(tokens, 8, 3, 16, 16), x)


class TestVisualEncoder:
    def setup_method(self):
        torch.manual_seed(4)
        self.enc = VisualEncoder(patch=8, dim=32, depth=4, d_vis=128).eval()

    def test_eval_deterministic(self):
        x = torch.rand(1, 3, 32, 32, generator=torch.Generator().manual_seed(5))
        assert torch.equal(self.enc(x), self.enc(x))

    def test_output_dim_default(self):
        assert self.enc(torch.rand(2, 3, 32, 32)).shape == (2, 128)

    def test_constant_image_shift_invariant(self):
        const = torch.full((1, 3, 32, 32), 0.5)
        shifted = torch.roll(const, shifts=(3, 7), dims=(2, 3))
        torch.testing.assert_close(self.enc(const), self.enc(shifted))


class TestV2TAdapter:
    def test_zero_input_gives_bias_pattern(self):
        torch.manual_seed(6)
        adapter = V2TAdapter(d_vis=16, n_tok=4, d_text=8)
        out1 = adapter(torch.zeros(16))
        out2 = adapter(torch.zeros(16))
        assert torch.equal(out1, out2)
        assert out1.shape == (4, 8)

    def test_default_shape_4x64(self):
        torch.manual_seed(7)
        adapter = V2TAdapter()
        assert adapter(torch.zeros(128)).shape == (4, 64)


class TestV2TPath:
    def test_enabled_path_shapes(self):
        torch.manual_seed(8)
        path = V2TPath(enabled=True, patch=8, n_tok=4, d_text=16).eval()
        tokens = path(torch.rand(2, 3, 32, 32))
        assert tokens.shape == (2, 4, 16)
        cond = path.condition(torch.rand(3, 32, 32))
        assert isinstance(cond, TextCondition)
        assert cond.tokens.shape == (4, 16)

    def test_disabled_path_uses_null_tokens(self):
        torch.manual_seed(9)
        path = V2TPath(enabled=False, n_tok=4, d_text=16)
        x1 = torch.rand(2, 3, 32, 32)
        x2 = torch.rand(2, 3, 32, 32)
        t1 = path(x1)
        t2 = path(x2)
        assert torch.equal(t1, t2)  # independent of the image
        torch.testing.assert_close(t1[0], path.null_tokens)
        assert path.null_tokens.requires_grad


def test_end_to_end_v2t_differentiable():
    torch.manual_seed(10)
    path = V2TPath(enabled=True, patch=8, n_tok=2, d_text=8).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    path(x).sum().backward()
    assert x.grad is not None and torch.isfinite(x.grad).all()
    assert float(x.grad.abs().sum()) > 0
