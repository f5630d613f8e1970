import torch

from nde import reconstruction as rc
from nde.utils import state_dict_digest

from .test_decomposition import assert_grad_close, fd_gradient


def _t(values, shape):
    return torch.tensor(values, dtype=torch.float64).view(shape)


def rand_set(seed, h=4, w=4):
    g = torch.Generator().manual_seed(seed)
    mk = lambda c, grad=False: torch.rand(1, c, h, w, generator=g, dtype=torch.float64, requires_grad=grad)
    return mk(3, True), mk(3), mk(1, True), mk(1), mk(3, True), mk(3)


class TestLossMse:
    def test_perfect_inputs_zero(self):
        s_y, _, i_y, _, r_y, _ = rand_set(0)
        value = rc.loss_mse(s_y, s_y.detach(), i_y, i_y.detach(), r_y, r_y.detach())
        assert value.item() == 0.0

    def test_image_term_only(self):
        # S differs by 0.1 on every channel, I and R equal: 1.0 * 0.1^2 = 0.01
        s_y = _t([0.5, 0.5, 0.5], (1, 3, 1, 1))
        s_d = _t([0.6, 0.6, 0.6], (1, 3, 1, 1))
        i = _t([0.4], (1, 1, 1, 1))
        r = _t([0.2, 0.3, 0.4], (1, 3, 1, 1))
        value = rc.loss_mse(s_y, s_d, i, i, r, r)
        assert abs(value.item() - 0.01) < 1e-9

    def test_three_term_oracle(self):
        # hand arithmetic: 1*0.01 + 0.01*0.04 + 0.05*(0.01+0.04+0.09)/3
        s_y = _t([0.5, 0.5, 0.5], (1, 3, 1, 1))
        s_d = _t([0.6, 0.6, 0.6], (1, 3, 1, 1))
        i_y = _t([0.4], (1, 1, 1, 1))
        i_d = _t([0.6], (1, 1, 1, 1))
        r_y = _t([0.2, 0.3, 0.4], (1, 3, 1, 1))
        r_d = _t([0.3, 0.5, 0.7], (1, 3, 1, 1))
        expected = 1.0 * 0.01 + 0.01 * 0.04 + 0.05 * (0.01 + 0.04 + 0.09) / 3.0
        assert abs(rc.loss_mse(s_y, s_d, i_y, i_d, r_y, r_d).item() - expected) < 1e-9

    def test_invariant_under_joint_pixel_permutation(self):
        s_y, s_d, i_y, i_d, r_y, r_d = (x.detach() for x in rand_set(1))
        before = rc.loss_mse(s_y, s_d, i_y, i_d, r_y, r_d).item()
        perm = torch.randperm(16, generator=torch.Generator().manual_seed(2))
        shuffle = lambda x: x.reshape(1, x.shape[1], -1)[:, :, perm].reshape(x.shape)
        after = rc.loss_mse(*(shuffle(x) for x in (s_y, s_d, i_y, i_d, r_y, r_d))).item()
        assert abs(before - after) < 1e-12

    def test_gradients_match_finite_differences(self):
        s_y, s_d, i_y, i_d, r_y, r_d = rand_set(3)

        def fn():
            return rc.loss_mse(s_y, s_d, i_y, i_d, r_y, r_d)

        fn().backward()
        for x in (s_y, i_y, r_y):
            assert_grad_close(x.grad, fd_gradient(fn, x.data))


class TestFeatureExtractor:
    def test_four_taps(self):
        ext = rc.FeatureExtractor(base_channels=8, seed=0)
        taps = ext(torch.rand(1, 3, 16, 16))
        assert len(taps) == 4
        assert [t.shape[1] for t in taps] == [8, 16, 32, 64]

    def test_seeded_weights_deterministic(self):
        a = rc.FeatureExtractor(base_channels=8, seed=5)
        b = rc.FeatureExtractor(base_channels=8, seed=5)
        assert state_dict_digest(a.state_dict()) == state_dict_digest(b.state_dict())

    def test_small_input_stages_clamp_pooling(self):
        ext = rc.FeatureExtractor(base_channels=4, seed=1, dtype=torch.float64)
        taps = ext(torch.rand(1, 3, 4, 4, dtype=torch.float64))
        assert [t.shape[-1] for t in taps] == [4, 2, 1, 1]

    def test_archive_round_trip(self, tmp_path):
        ext = rc.FeatureExtractor(base_channels=8, seed=9)
        path = tmp_path / "features.ckpt"
        rc.save_feature_extractor(ext, str(path))
        back = rc.load_feature_extractor(str(path))
        assert state_dict_digest(back.state_dict()) == state_dict_digest(ext.state_dict())

    def test_frozen_through_a_training_step(self):
        ext = rc.FeatureExtractor(base_channels=8, seed=2, dtype=torch.float64)
        before = state_dict_digest(ext.state_dict())
        img = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        opt = torch.optim.Adam([img], lr=0.1)
        loss = rc.loss_vgg(img, target, ext)
        loss.backward()
        opt.step()
        assert state_dict_digest(ext.state_dict()) == before
        assert all(not p.requires_grad for p in ext.parameters())

    def test_train_mode_request_is_ignored(self):
        ext = rc.FeatureExtractor(base_channels=4, seed=3)
        ext.train()
        assert not ext.training


class TestLossVgg:
    def setup_method(self):
        self.ext = rc.FeatureExtractor(base_channels=4, seed=4, dtype=torch.float64)

    def test_identical_images_zero(self):
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        assert rc.loss_vgg(x, x.clone(), self.ext).item() == 0.0

    def test_linear_in_lambda(self):
        g = torch.Generator().manual_seed(5)
        a = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        b = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        base = rc.loss_vgg(a, b, self.ext, rc.ReconLossWeights(lambda_feat=1.0)).item()
        scaled = rc.loss_vgg(a, b, self.ext, rc.ReconLossWeights(lambda_feat=3.5)).item()
        assert abs(scaled - 3.5 * base) < 1e-9

    def test_linear_in_layer_weights(self):
        g = torch.Generator().manual_seed(6)
        a = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        b = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
        w1 = rc.ReconLossWeights(layer_weights=(8.0, 4.0, 2.0, 1.0))
        w2 = rc.ReconLossWeights(layer_weights=(16.0, 8.0, 4.0, 2.0))
        assert abs(rc.loss_vgg(a, b, self.ext, w2).item() - 2 * rc.loss_vgg(a, b, self.ext, w1).item()) < 1e-9

    def test_gradients_match_finite_differences(self):
        g = torch.Generator().manual_seed(7)
        s_y = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
        s_d = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)

        def fn():
            return rc.loss_vgg(s_y, s_d, self.ext)

        fn().backward()
        assert_grad_close(s_y.grad, fd_gradient(fn, s_y.data))
        assert_grad_close(s_d.grad, fd_gradient(fn, s_d.data))


class TestTotal:
    def test_zero_components(self):
        ext = rc.FeatureExtractor(base_channels=4, seed=8, dtype=torch.float64)
        s = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        i = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        r = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        assert rc.loss_reconstruction_total(s, s.clone(), i, i.clone(), r, r.clone(), ext).item() == 0.0

    def test_additivity(self):
        ext = rc.FeatureExtractor(base_channels=4, seed=9, dtype=torch.float64)
        s_y, s_d, i_y, i_d, r_y, r_d = (x.detach() for x in rand_set(10, 8, 8))
        total = rc.loss_reconstruction_total(s_y, s_d, i_y, i_d, r_y, r_d, ext).item()
        parts = rc.loss_vgg(s_y, s_d, ext).item() + rc.loss_mse(s_y, s_d, i_y, i_d, r_y, r_d).item()
        assert abs(total - parts) < 1e-12

    def test_gradient_of_sum_is_sum_of_gradients(self):
        ext = rc.FeatureExtractor(base_channels=4, seed=11, dtype=torch.float64)
        s_y, s_d, i_y, i_d, r_y, r_d = rand_set(12)

        def fn():
            return rc.loss_reconstruction_total(s_y, s_d, i_y, i_d, r_y, r_d, ext)

        fn().backward()
        assert_grad_close(s_y.grad, fd_gradient(fn, s_y.data))
