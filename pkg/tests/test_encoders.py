import numpy as np
import pytest

import oracles
from vlmr.autodiff import Graph, finite_diff_check
from vlmr.encoders import (EncoderError, featurize_proposals, gru_encode,
                           init_gru_params, init_projection_params,
                           pool_proposals)
from vlmr.proposals import generate_segment_groups


def make_leaves(graph, params):
    return {name: graph.param(value, name) for name, value in params.items()}


def random_params(d_emb, d_hidden, d_raw, d_model, seed=0):
    rng = np.random.default_rng(seed)
    params = init_gru_params(d_emb, d_hidden, rng)
    params.update(init_projection_params(d_hidden, d_raw, d_model, rng))
    return params


class TestGruEncode:
    def test_zero_weights_give_zero_rows(self):
        # h0 = 0 and tanh(0) = 0 pin every hidden state at zero; the
        # normalization guard then maps the zero rows to zero.
        params = {name: np.zeros_like(value)
                  for name, value in random_params(3, 4, 2, 4).items()}
        g = Graph()
        leaves = make_leaves(g, params)
        rng = np.random.default_rng(5)
        repr_ = gru_encode(g, leaves, rng.standard_normal((6, 3)))
        assert np.array_equal(repr_.matrix.value, np.zeros((6, 4)))
        assert np.array_equal(repr_.final.value, np.zeros(4))

    def test_single_token(self):
        params = random_params(3, 4, 2, 4, seed=1)
        g = Graph()
        leaves = make_leaves(g, params)
        repr_ = gru_encode(g, leaves, np.ones((1, 3)))
        assert repr_.matrix.shape == (1, 4)
        np.testing.assert_array_equal(repr_.matrix.value[0], repr_.final.value)

    def test_rows_unit_norm(self):
        params = random_params(3, 4, 2, 4, seed=2)
        g = Graph()
        leaves = make_leaves(g, params)
        rng = np.random.default_rng(3)
        repr_ = gru_encode(g, leaves, rng.standard_normal((7, 3)))
        norms = np.linalg.norm(repr_.matrix.value, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-10)

    def test_empty_tokens_rejected(self):
        params = random_params(3, 4, 2, 4)
        g = Graph()
        leaves = make_leaves(g, params)
        with pytest.raises(EncoderError):
            gru_encode(g, leaves, np.empty((0, 3)))

    def test_recurrence_matches_hand_rollout(self):
        params = random_params(2, 3, 2, 3, seed=9)
        tokens = np.random.default_rng(10).standard_normal((4, 2))
        g = Graph()
        leaves = make_leaves(g, params)
        repr_ = gru_encode(g, leaves, tokens)

        def sig(a):
            return 1.0 / (1.0 + np.exp(-a))

        h = np.zeros(3)
        rows = []
        for x in tokens:
            z = sig(x @ params["gru/w_z"] + h @ params["gru/u_z"] + params["gru/b_z"])
            r = sig(x @ params["gru/w_r"] + h @ params["gru/u_r"] + params["gru/b_r"])
            cand = np.tanh(x @ params["gru/w_h"] + (r * h) @ params["gru/u_h"]
                           + params["gru/b_h"])
            h = (1 - z) * h + z * cand
            p = h @ params["proj/query_w"] + params["proj/query_b"]
            rows.append(p / np.linalg.norm(p))
        np.testing.assert_allclose(repr_.matrix.value, np.array(rows), atol=1e-12)

    def test_gradients_pass_finite_diff(self):
        params = random_params(3, 4, 2, 4, seed=4)
        g = Graph()
        leaves = make_leaves(g, params)
        tokens = np.random.default_rng(6).standard_normal((3, 3))
        repr_ = gru_encode(g, leaves, tokens)
        target = g.constant(np.random.default_rng(7).standard_normal(4))
        loss = g.dot(repr_.final, target)
        report = finite_diff_check(g, loss, tolerance=1e-4)
        assert report.passed, [str(l) for l in report.lines()]


class TestFeaturizeProposals:
    def grid(self):
        return generate_segment_groups(24, 8, [8, 16])

    def identity_leaves(self, g, d_raw):
        params = {
            "proj/video_w": np.eye(d_raw),
            "proj/video_b": np.zeros(d_raw),
        }
        return make_leaves(g, params)

    def test_identical_frames_identity_projection(self):
        v = np.array([1.0, 2.0, 2.0])
        frames = np.tile(v, (24, 1))
        g = Graph()
        leaves = self.identity_leaves(g, 3)
        out = featurize_proposals(g, leaves, frames, self.grid())
        expected = v / np.linalg.norm(v)
        for row in out.value:
            np.testing.assert_allclose(row, expected, atol=1e-12)

    def test_length_one_interval_is_single_frame(self):
        from vlmr.proposals import generate_segment_groups
        grid = generate_segment_groups(4, 1, [1])
        rng = np.random.default_rng(0)
        frames = rng.standard_normal((4, 3))
        pooled = pool_proposals(frames, grid)
        np.testing.assert_array_equal(pooled, frames)

    def test_pooling_matches_two_pass_oracle(self):
        rng = np.random.default_rng(12)
        grid = generate_segment_groups(30, 4, [4, 9, 17])
        frames = rng.standard_normal((30, 5))
        pooled = pool_proposals(frames, grid)
        for row, iv in enumerate(grid.intervals_scale_major()):
            np.testing.assert_allclose(
                pooled[row], oracles.mean_pool(frames, iv.start, iv.end), atol=1e-12)

    def test_interval_outside_frames_rejected(self):
        grid = generate_segment_groups(24, 8, [8, 16])
        with pytest.raises(EncoderError, match="outside frame range"):
            pool_proposals(np.zeros((16, 3)), grid)  # grid built for 24 frames

    def test_rows_unit_norm_after_projection(self):
        rng = np.random.default_rng(13)
        params = random_params(3, 4, 5, 4, seed=13)
        g = Graph()
        leaves = make_leaves(g, params)
        out = featurize_proposals(g, leaves, rng.standard_normal((24, 5)), self.grid())
        np.testing.assert_allclose(np.linalg.norm(out.value, axis=1), 1.0, atol=1e-10)

    def test_frames_outside_interval_do_not_matter(self):
        rng = np.random.default_rng(14)
        grid = generate_segment_groups(24, 8, [8])
        frames = rng.standard_normal((24, 3))
        shuffled = frames.copy()
        shuffled[8:16] = frames[8:16][::-1]  # permute inside another window
        pooled_a = pool_proposals(frames, grid)
        pooled_b = pool_proposals(shuffled, grid)
        np.testing.assert_array_equal(pooled_a[0], pooled_b[0])
        np.testing.assert_array_equal(pooled_a[2], pooled_b[2])

    def test_gradients_pass_finite_diff(self):
        rng = np.random.default_rng(15)
        params = random_params(3, 4, 5, 4, seed=15)
        g = Graph()
        leaves = make_leaves(g, params)
        out = featurize_proposals(g, leaves, rng.standard_normal((24, 5)), self.grid())
        loss = g.dot(g.sum_rows(out), g.constant(rng.standard_normal(4)))
        report = finite_diff_check(g, loss, tolerance=1e-4)
        assert report.passed


class TestModuleSeparation:
    def test_query_encoding_ignores_frames_and_vice_versa(self):
        params = random_params(3, 4, 5, 4, seed=20)
        rng = np.random.default_rng(21)
        tokens = rng.standard_normal((4, 3))
        frames_a = rng.standard_normal((24, 5))
        frames_b = rng.standard_normal((24, 5))
        grid = generate_segment_groups(24, 8, [8, 16])

        def query_matrix(frames):
            g = Graph()
            leaves = make_leaves(g, params)
            featurize_proposals(g, leaves, frames, grid)
            return gru_encode(g, leaves, tokens).matrix.value

        np.testing.assert_array_equal(query_matrix(frames_a), query_matrix(frames_b))

        def video_matrix(toks):
            g = Graph()
            leaves = make_leaves(g, params)
            gru_encode(g, leaves, toks)
            return featurize_proposals(g, leaves, frames_a, grid).value

        np.testing.assert_array_equal(
            video_matrix(tokens), video_matrix(rng.standard_normal((6, 3))))
