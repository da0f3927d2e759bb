import torch
from django.test import SimpleTestCase
from hypothesis import given, settings as hsettings, strategies as st

from changedetection.bitab import StageFeature
from changedetection.bridging import (
    BridgingModule, bridge_forward, bridge_param_count, cross_resample, fuse, project_and_normalize,
    resize_tokens,
)
from changedetection.encoder import PatchTokens
from changedetection.exceptions import ConfigurationError, ShapeError

from .helpers import bilinear_oracle, brute_force_attention, finite_difference


def layer_norm_oracle(tokens, gain, bias, eps=1e-5):
    out = torch.zeros_like(tokens, dtype=torch.float64)
    for n in range(tokens.shape[0]):
        row = tokens[n].double()
        mean = sum(row.tolist()) / len(row)
        var = sum((v - mean) ** 2 for v in row.tolist()) / len(row)
        for c in range(len(row)):
            out[n, c] = (row[c] - mean) / (var + eps) ** 0.5 * gain[c] + bias[c]
    return out


def linear_oracle(x, weight, bias):
    out = torch.zeros(x.shape[0], weight.shape[0], dtype=torch.float64)
    for n in range(x.shape[0]):
        for o in range(weight.shape[0]):
            out[n, o] = sum(float(x[n, i]) * float(weight[o, i]) for i in range(x.shape[1])) + float(bias[o])
    return out


def random_bridge(fm_channels, cm_channels, seed=0, init_range=0.5):
    torch.manual_seed(seed)
    bridge = BridgingModule(fm_channels, cm_channels).reset_parameters(init_range=init_range)
    with torch.no_grad():
        bridge.ln.weight.uniform_(0.5, 1.5)
        bridge.ln.bias.uniform_(-0.5, 0.5)
        bridge.proj.bias.uniform_(-0.5, 0.5)
    return bridge


class ProjectAndNormalizeTests(SimpleTestCase):
    def test_matches_scalar_loop(self):
        bridge = random_bridge(6, 3)
        tokens = torch.randn(4, 6)
        with torch.no_grad():
            out = project_and_normalize(tokens, bridge.ln, bridge.proj).double()
            normed = layer_norm_oracle(tokens, bridge.ln.weight.double(), bridge.ln.bias.double())
            expected = linear_oracle(normed, bridge.proj.weight, bridge.proj.bias)
        self.assertTrue(torch.allclose(out, expected, atol=1e-5))

    def test_constant_token_maps_to_bias(self):
        bridge = BridgingModule(6, 3).reset_parameters()
        with torch.no_grad():
            bridge.proj.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
            out = project_and_normalize(torch.full((1, 6), 7.0), bridge.ln, bridge.proj)
        self.assertTrue(torch.allclose(out[0], bridge.proj.bias, atol=1e-6))

    def test_pre_affine_statistics(self):
        bridge = BridgingModule(32, 4)
        normed = bridge.ln(torch.randn(10, 32) * 5 + 3).detach().double()
        self.assertTrue(torch.allclose(normed.mean(-1), torch.zeros(10, dtype=torch.float64), atol=1e-6))
        self.assertTrue(torch.allclose(normed.var(-1, unbiased=False), torch.ones(10, dtype=torch.float64),
                                       atol=1e-4))

    def test_channel_mismatch(self):
        bridge = BridgingModule(6, 3)
        with self.assertRaises(ShapeError):
            project_and_normalize(torch.randn(4, 5), bridge.ln, bridge.proj)


class CrossResampleTests(SimpleTestCase):
    def test_matches_brute_force(self):
        torch.manual_seed(1)
        x_cm, x_tilde = torch.randn(1, 4, 3), torch.randn(1, 6, 3)
        x_cf, _, attn = cross_resample(x_cm, x_tilde)
        expected, rows = brute_force_attention(x_cm, x_tilde)
        self.assertTrue(torch.allclose(x_cf.double(), expected, atol=1e-6))
        self.assertTrue(torch.allclose(attn.double(), rows, atol=1e-6))

    def test_matches_brute_force_on_random_instances(self):
        generator = torch.Generator().manual_seed(7)
        for _ in range(100):
            n_c, n_f, channels = (int(v) for v in torch.randint(1, 9, (3,), generator=generator))
            x_cm = torch.randn(1, n_c, channels, generator=generator, dtype=torch.float64)
            x_tilde = torch.randn(1, n_f, channels, generator=generator, dtype=torch.float64)
            x_cf, _, _ = cross_resample(x_cm, x_tilde)
            expected, _ = brute_force_attention(x_cm, x_tilde)
            self.assertTrue(torch.allclose(x_cf, expected, atol=1e-9))

    def test_cosine_affinity_matches_brute_force(self):
        torch.manual_seed(2)
        x_cm, x_tilde = torch.randn(2, 5, 4), torch.randn(2, 3, 4)
        x_cf, _, _ = cross_resample(x_cm, x_tilde, affinity='cosine')
        expected, _ = brute_force_attention(x_cm, x_tilde, affinity='cosine')
        self.assertTrue(torch.allclose(x_cf.double(), expected, atol=1e-6))

    def test_single_token_broadcasts(self):
        x_tilde = torch.randn(1, 1, 3)
        x_cf, _, attn = cross_resample(torch.randn(1, 5, 3), x_tilde)
        self.assertTrue(torch.equal(attn, torch.ones(1, 5, 1)))
        self.assertTrue(torch.allclose(x_cf, x_tilde.expand(1, 5, 3)))

    def test_zero_queries_average_tokens(self):
        x_tilde = torch.randn(1, 6, 3)
        x_cf, logits, _ = cross_resample(torch.zeros(1, 4, 3), x_tilde)
        self.assertTrue(torch.equal(logits, torch.zeros(1, 4, 6)))
        self.assertTrue(torch.allclose(x_cf, x_tilde.mean(1, keepdim=True).expand(1, 4, 3), atol=1e-6))

    @hsettings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 6), st.floats(0.1, 20.0))
    def test_rows_are_stochastic(self, n_c, n_f, channels, scale):
        _, _, attn = cross_resample(torch.randn(2, n_c, channels) * scale, torch.randn(2, n_f, channels) * scale)
        self.assertTrue(torch.all(attn >= 0))
        self.assertTrue(torch.allclose(attn.sum(-1), torch.ones(2, n_c), atol=1e-6))

    def test_token_permutation_leaves_output_unchanged(self):
        torch.manual_seed(3)
        x_cm, x_tilde = torch.randn(1, 8, 4), torch.randn(1, 9, 4)
        shuffled = x_tilde[:, torch.randperm(9)]
        a, _, _ = cross_resample(x_cm, x_tilde)
        b, _, _ = cross_resample(x_cm, shuffled)
        self.assertTrue(torch.allclose(a, b, atol=1e-6))

    def test_channel_mismatch(self):
        with self.assertRaises(ShapeError):
            cross_resample(torch.randn(1, 4, 3), torch.randn(1, 6, 4))

    def test_no_tokens(self):
        with self.assertRaises(ConfigurationError):
            cross_resample(torch.randn(1, 4, 3), torch.randn(1, 0, 3))

    def test_unknown_affinity(self):
        with self.assertRaises(ConfigurationError):
            cross_resample(torch.randn(1, 4, 3), torch.randn(1, 6, 3), affinity='l1')


class FuseTests(SimpleTestCase):
    def test_zero_injection_is_exact_identity(self):
        x_cm = torch.randn(1, 3, 4, 4)
        out = fuse(torch.zeros(1, 16, 3), torch.zeros(1, 4, 3), (2, 2), x_cm)
        self.assertTrue(torch.equal(out, x_cm))

    def test_single_token_grid(self):
        token = torch.randn(1, 1, 3)
        x_cm = torch.randn(1, 3, 4, 4)
        x_cf, _, _ = cross_resample(torch.randn(1, 16, 3), token)
        out = fuse(x_cf, token, (1, 1), x_cm)
        expected = x_cm + 2 * token.view(1, 3, 1, 1)
        self.assertTrue(torch.allclose(out, expected, atol=1e-6))

    def test_resize_matches_bilinear_oracle(self):
        ramp = torch.tensor([0.0, 1.0, 2.0, 3.0]).view(1, 4, 1)
        out = resize_tokens(ramp, (2, 2), (4, 4))[0, 0].double()
        self.assertTrue(torch.allclose(out, bilinear_oracle(ramp.view(2, 2).double(), 4, 4), atol=1e-6))

    def test_grid_not_factorable(self):
        with self.assertRaises(ShapeError):
            fuse(torch.zeros(1, 16, 3), torch.zeros(1, 5, 3), (2, 2), torch.zeros(1, 3, 4, 4))

    def test_channel_disagreement(self):
        with self.assertRaises(ShapeError):
            fuse(torch.zeros(1, 16, 3), torch.zeros(1, 4, 2), (2, 2), torch.zeros(1, 3, 4, 4))


class BridgeForwardTests(SimpleTestCase):
    def test_zero_init_is_no_op(self):
        bridge = BridgingModule(8, 4).reset_parameters(zero_init=True)
        x_cm = StageFeature(torch.randn(2, 4, 8, 8), 1)
        out = bridge_forward(PatchTokens(torch.randn(2, 16, 8), 4, 4), x_cm, bridge)
        self.assertTrue(torch.equal(out.map, x_cm.map))
        self.assertEqual(out.stage_index, 1)

    def test_matches_composed_oracle(self):
        bridge = random_bridge(8, 4, seed=5)
        x_fm = PatchTokens(torch.randn(1, 16, 8), 4, 4)
        x_cm = StageFeature(torch.randn(1, 4, 8, 8), 2)
        with torch.no_grad():
            out = bridge_forward(x_fm, x_cm, bridge).map.double()
            normed = layer_norm_oracle(x_fm.tokens[0], bridge.ln.weight.double(), bridge.ln.bias.double())
            x_tilde = linear_oracle(normed, bridge.proj.weight, bridge.proj.bias)
            queries = x_cm.map[0].double().reshape(4, 64).t()
            x_cf, _ = brute_force_attention(queries.unsqueeze(0), x_tilde.unsqueeze(0))
            resized = torch.stack([bilinear_oracle(x_tilde[:, c].view(4, 4), 8, 8) for c in range(4)])
            expected = x_cf[0].t().reshape(4, 8, 8) + resized + x_cm.map[0].double()
        self.assertTrue(torch.allclose(out[0], expected, atol=1e-5))

    def test_trace_holds_intermediates(self):
        bridge = random_bridge(8, 4)
        x_cm = StageFeature(torch.randn(1, 4, 8, 8), 1)
        out, trace = bridge_forward(PatchTokens(torch.randn(1, 4, 8), 2, 2), x_cm, bridge, return_trace=True)
        self.assertEqual(tuple(trace.attn.shape), (1, 64, 4))
        self.assertEqual(tuple(trace.x_tilde_fm.shape), (1, 4, 4))
        self.assertEqual((trace.fm_grid, trace.cm_grid), ((2, 2), (8, 8)))
        self.assertTrue(torch.equal(trace.x_bm, out.map))
        self.assertEqual(set(trace.as_tensors()), {'x_fm', 'x_tilde_fm', 'affinity', 'attn', 'x_cf', 'x_bm'})

    def test_output_shape_follows_stage_feature(self):
        torch.manual_seed(0)
        for fm_grid in (16, 24):
            for cm_grid, channels in ((64, 4), (32, 8), (16, 8), (8, 16)):
                bridge = BridgingModule(12, channels).reset_parameters()
                x_cm = StageFeature(torch.randn(1, channels, cm_grid, cm_grid), 1)
                with torch.no_grad():
                    out = bridge_forward(PatchTokens(torch.randn(1, fm_grid ** 2, 12), fm_grid, fm_grid),
                                         x_cm, bridge)
                self.assertEqual(out.map.shape, x_cm.map.shape)

    def test_gradients_match_finite_differences(self):
        bridge = random_bridge(6, 3, seed=11).double()
        x_fm = PatchTokens(torch.randn(1, 4, 6, dtype=torch.float64), 2, 2)
        x_cm = StageFeature(torch.randn(1, 3, 4, 4, dtype=torch.float64), 1)
        weights = torch.randn(1, 3, 4, 4, dtype=torch.float64)

        def loss():
            return (bridge_forward(x_fm, x_cm, bridge).map * weights).sum()

        loss().backward()
        for param, index in ((bridge.proj.weight, (1, 2)), (bridge.proj.weight, (0, 5)),
                             (bridge.ln.weight, (3,)), (bridge.ln.bias, (0,))):
            numeric = finite_difference(loss, param, index, step=1e-6)
            analytic = param.grad[index].item()
            self.assertAlmostEqual(analytic, numeric, delta=1e-3 * max(abs(numeric), 1e-3))


class BridgeParamCountTests(SimpleTestCase):
    def test_formula(self):
        self.assertEqual(bridge_param_count(8, 4), 52)
        bridge = BridgingModule(8, 4)
        self.assertEqual(sum(p.numel() for p in bridge.parameters()), 52)

    def test_large_encoder_total(self):
        total = sum(bridge_param_count(1024, c) for c in (32, 64, 160, 256))
        self.assertEqual(total, 532992)

    def test_unknown_affinity(self):
        with self.assertRaises(ConfigurationError):
            BridgingModule(8, 4, affinity='l2')
