"""Haar sampling on O(3) and the sign-corrected QR map, including its tape
gradient against finite differences."""

import numpy as np
import pytest

from symdiff import ortho
from symdiff.equitest import perm_two_sample_test
from symdiff.numcore import RngStream, autodiff as ad, backward, leaf
from test_numcore import fd_grad, rel_err


def orth_defect(q):
    return np.abs(q.T @ q - np.eye(3)).max()


class TestSampleHaar:
    def test_outputs_orthogonal(self):
        stream = RngStream(101)
        for _ in range(200):
            q = ortho.sample_haar(stream).data
            assert orth_defect(q) < 1e-10
            assert abs(abs(np.linalg.det(q)) - 1.0) < 1e-10

    def test_elementwise_mean_near_zero(self):
        qs = ortho.sample_haar_batch(RngStream(202), 100_000)
        assert np.abs(qs.mean(axis=0)).max() < 0.02

    def test_batch_orthogonal_and_both_components(self):
        qs = ortho.sample_haar_batch(RngStream(303), 4000)
        defect = np.abs(np.einsum("kji,kjl->kil", qs, qs) - np.eye(3)).max()
        assert defect < 1e-10
        dets = np.linalg.det(qs)
        frac_rot = np.mean(dets > 0)
        # Haar on O(3) weights the two components equally
        assert 0.45 < frac_rot < 0.55

    def test_left_and_right_invariance(self):
        n = 5000
        a = ortho.sample_haar_batch(RngStream(404), n).reshape(n, 9)
        b = ortho.sample_haar_batch(RngStream(405), n)
        r0 = ortho.sample_haar(RngStream(406)).data
        left = (r0 @ b).reshape(n, 9)
        right = (b @ r0).reshape(n, 9)
        rep_l = perm_two_sample_test(a, left, 200, 0.01, RngStream(407))
        rep_r = perm_two_sample_test(a, right, 200, 0.01, RngStream(408))
        assert not rep_l.reject, rep_l.to_text()
        assert not rep_r.reject, rep_r.to_text()


class TestQrOrthogonalize:
    def test_identity_fixed(self):
        np.testing.assert_allclose(ortho.qr_orthogonalize(np.eye(3)).data,
                                   np.eye(3), atol=1e-14)

    def test_positive_diagonal_fixed(self):
        out = ortho.qr_orthogonalize(np.diag([2.0, 3.0, 4.0])).data
        np.testing.assert_allclose(out, np.eye(3), atol=1e-14)

    def test_negated_column_still_orthogonal(self):
        m = np.diag([2.0, 3.0, 4.0])
        m[:, 1] *= -1
        out = ortho.qr_orthogonalize(m).data
        assert orth_defect(out) < 1e-10
        assert abs(abs(np.linalg.det(out)) - 1.0) < 1e-10

    def test_exact_left_equivariance(self):
        stream = RngStream(505)
        rng = np.random.default_rng(505)
        for _ in range(50):
            m = rng.normal(size=(3, 3))
            r = ortho.sample_haar(stream).data
            lhs = ortho.qr_orthogonalize(r @ m).data
            rhs = r @ ortho.qr_orthogonalize(m).data
            assert np.abs(lhs - rhs).max() < 1e-9

    def test_degenerate_falls_back_to_identity(self):
        ortho.reset_degenerate_count()
        m = np.outer([1.0, 2.0, 3.0], [1.0, 0.0, 0.0])  # rank 1
        out = ortho.qr_orthogonalize(m).data
        np.testing.assert_array_equal(out, np.eye(3))
        assert ortho.degenerate_count() == 1
        ortho.reset_degenerate_count()
        assert ortho.degenerate_count() == 0

    def test_healthy_inputs_do_not_flag(self):
        ortho.reset_degenerate_count()
        rng = np.random.default_rng(9)
        for _ in range(100):
            ortho.qr_orthogonalize(rng.normal(size=(3, 3)))
        assert ortho.degenerate_count() == 0


class TestQrOrthogonalizeNode:
    def test_value_matches_plain(self):
        rng = np.random.default_rng(606)
        for _ in range(20):
            m = rng.normal(size=(3, 3))
            node = ortho.qr_orthogonalize_node(leaf(m, name="m"))
            plain = ortho.qr_orthogonalize(m).data
            assert np.abs(node.value.data - plain).max() < 1e-14

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(707)
        for _ in range(10):
            m = rng.normal(size=(3, 3))
            w = rng.normal(size=(3, 3))

            def scalar(arr):
                return float((ortho.qr_orthogonalize(arr).data * w).sum())

            node = leaf(m, name="m")
            loss = ad.sum_(ad.mul(ortho.qr_orthogonalize_node(node), w))
            got = backward(loss)["m"]
            want = fd_grad(scalar, [m.copy()])[0]
            assert rel_err(got, want) < 1e-5

    def test_degenerate_gradient_is_zero(self):
        ortho.reset_degenerate_count()
        m = np.zeros((3, 3))
        node = leaf(m, name="m")
        out = ortho.qr_orthogonalize_node(node)
        np.testing.assert_array_equal(out.value.data, np.eye(3))
        grads = backward(ad.sum_(out))
        np.testing.assert_array_equal(grads["m"], np.zeros((3, 3)))
        assert ortho.degenerate_count() == 1
        ortho.reset_degenerate_count()

    def test_plain_input_passthrough(self):
        out = ortho.qr_orthogonalize_node(np.eye(3))
        assert not isinstance(out, ad.Node)


class TestEnsureOrthogonal:
    def test_orthogonal_input_unchanged(self):
        q = ortho.sample_haar(RngStream(808)).data
        out = ortho.ensure_orthogonal(q)
        np.testing.assert_array_equal(out, q)

    def test_drifted_input_repaired(self):
        q = ortho.sample_haar(RngStream(809)).data
        drifted = q + 1e-6 * np.ones((3, 3))
        out = ortho.ensure_orthogonal(drifted)
        assert orth_defect(out) < 1e-12
        assert np.abs(out - q).max() < 1e-5
