import math

import numpy as np
import pytest

from tacuv import engine as eg
from tacuv import model as md
from tacuv.errors import DataError, EngineError
from tacuv.layouts import default_glove_layout
from tacuv.robot import default_hand


@pytest.fixture(scope="module")
def config():
    return md.ModelConfig.from_layouts(default_glove_layout(), default_hand())


@pytest.fixture(scope="module")
def model(config):
    return md.AlignmentModel(config)


def _random_batch(rng, b, uv_dim=391):
    return {
        "t_h": rng.random((b, 137), dtype=np.float32),
        "p_h": rng.standard_normal((b, 60), dtype=np.float32) * 0.05,
        "u_h": rng.random((b, uv_dim), dtype=np.float32),
        "t_r": rng.random((b, 1062), dtype=np.float32),
        "p_r": rng.standard_normal((b, 6), dtype=np.float32) * 0.3,
        "u_r": rng.random((b, uv_dim), dtype=np.float32),
    }


class TestArchitecture:
    def test_latent_dims(self, model):
        rng = np.random.default_rng(0)
        b = _random_batch(rng, 3)
        e_h, z_h = model.encode_human(b["t_h"], b["p_h"])
        e_r, z_r = model.encode_robot(b["t_r"], b["p_r"])
        assert e_h.shape == (3, 64) and z_h.shape == (3, 32)
        assert e_r.shape == (3, 64) and z_r.shape == (3, 32)

    def test_decoder_output_dim_and_range(self, model):
        rng = np.random.default_rng(1)
        e = eg.tensor(rng.standard_normal((4, 64), dtype=np.float32))
        for dom in ("human", "robot"):
            out = model.decode(e, dom)
            assert out.shape == (4, 391)
            assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_unknown_domain_rejected(self, model):
        with pytest.raises(DataError):
            model.decode(eg.tensor(np.zeros((1, 64), np.float32)), "alien")

    def test_encoders_deterministic(self, model):
        rng = np.random.default_rng(2)
        b = _random_batch(rng, 2)
        _, z1 = model.encode_human(b["t_h"], b["p_h"])
        _, z2 = model.encode_human(b["t_h"], b["p_h"])
        assert np.array_equal(z1.data, z2.data)

    def test_zero_inputs_finite(self, model):
        z = np.zeros((2, 137), np.float32)
        e_h, z_h = model.encode_human(z, np.zeros((2, 60), np.float32))
        assert np.isfinite(z_h.data).all()

    def test_patch_order_matters(self, config):
        rng = np.random.default_rng(3)
        t_r = rng.random((2, 1062), dtype=np.float32)
        p_r = rng.standard_normal((2, 6), dtype=np.float32)
        m1 = md.AlignmentModel(config)
        _, z1 = m1.encode_robot(t_r, p_r)
        swapped = md.ModelConfig(
            human_regions=config.human_regions,
            robot_patches=[config.robot_patches[1], config.robot_patches[0]]
            + config.robot_patches[2:],
            seed=config.seed)
        m2 = md.AlignmentModel(swapped)
        # same parameter count, different routing: embeddings must differ
        _, z2 = m2.encode_robot(t_r, p_r)
        assert not np.allclose(z1.data, z2.data)

    def test_wrong_tactile_dim_rejected(self, model):
        with pytest.raises(DataError):
            model.encode_human(np.zeros((1, 130), np.float32),
                               np.zeros((1, 60), np.float32))
        with pytest.raises(DataError):
            model.encode_robot(np.zeros((1, 1000), np.float32),
                               np.zeros((1, 6), np.float32))

    def test_raw_tactile_decoder_dims(self):
        cfg = md.ModelConfig.from_layouts(default_glove_layout(), default_hand(),
                                          decoder_mode="raw_tactile")
        m = md.AlignmentModel(cfg)
        assert m.decoder_dims() == (137, 1062)
        e = eg.tensor(np.zeros((2, 64), np.float32))
        assert m.decode(e, "human").shape == (2, 137)
        assert m.decode(e, "robot").shape == (2, 1062)

    def test_seed_reproducible_init(self, config):
        a = md.AlignmentModel(config)
        b = md.AlignmentModel(config)
        for n in a.params:
            assert np.array_equal(a.params[n].data, b.params[n].data)


class TestInfoNce:
    def test_single_pair_is_exactly_zero(self):
        z = np.random.default_rng(0).standard_normal((1, 32)).astype(np.float32)
        assert md.info_nce(z, z, tau=0.1).item() == 0.0

    def test_orthonormal_two_batch_analytic(self):
        z = np.eye(32, dtype=np.float32)[:2]
        expect = 2.0 * math.log(1.0 + math.exp(-10.0))
        assert md.info_nce(z, z, tau=0.1).item() == pytest.approx(expect, abs=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(4)
        z_h = rng.standard_normal((6, 32)).astype(np.float32)
        z_r = rng.standard_normal((6, 32)).astype(np.float32)
        perm = rng.permutation(6)
        a = md.info_nce(z_h, z_r, 0.1).item()
        b = md.info_nce(z_h[perm], z_r[perm], 0.1).item()
        assert a == pytest.approx(b, abs=1e-6)

    def test_symmetry_in_arguments(self):
        rng = np.random.default_rng(5)
        z_h = rng.standard_normal((5, 32)).astype(np.float32)
        z_r = rng.standard_normal((5, 32)).astype(np.float32)
        assert md.info_nce(z_h, z_r, 0.1).item() == pytest.approx(
            md.info_nce(z_r, z_h, 0.1).item(), abs=1e-6)

    def test_uniform_similarity_gives_2_log_b(self):
        b = 7
        z = np.tile(np.eye(32, dtype=np.float32)[0], (b, 1))
        assert md.info_nce(z, z, 0.1).item() == pytest.approx(2 * math.log(b), rel=1e-5)

    def test_scale_invariance_of_embeddings(self):
        rng = np.random.default_rng(6)
        z_h = rng.standard_normal((4, 32)).astype(np.float32)
        z_r = rng.standard_normal((4, 32)).astype(np.float32)
        a = md.info_nce(z_h, z_r, 0.1).item()
        b = md.info_nce(3.7 * z_h, 0.2 * z_r, 0.1).item()
        assert a == pytest.approx(b, abs=1e-5)

    def test_bad_temperature(self):
        z = np.zeros((2, 32), np.float32)
        with pytest.raises(EngineError):
            md.info_nce(z, z, tau=0.0)


class TestLosses:
    def test_recon_zero_for_perfect(self):
        u = np.random.default_rng(7).random((3, 391)).astype(np.float32)
        t = eg.tensor(u)
        assert md.recon_loss(t, u, t, u).item() == 0.0

    def test_recon_uniform_offset(self):
        u = np.zeros((2, 391), np.float32)
        hat = eg.tensor(u + 0.1)
        # each domain term: 391 * eps^2
        expect = 2 * 391 * 0.1 ** 2
        assert md.recon_loss(hat, u, hat, u).item() == pytest.approx(expect, rel=1e-4)

    def test_recon_swap_symmetric(self):
        rng = np.random.default_rng(8)
        a = rng.random((2, 391)).astype(np.float32)
        b = rng.random((2, 391)).astype(np.float32)
        l1 = md.recon_loss(eg.tensor(a), b, eg.tensor(b), a).item()
        l2 = md.recon_loss(eg.tensor(b), a, eg.tensor(a), b).item()
        assert l1 == pytest.approx(l2, rel=1e-6)

    def test_recon_dim_mismatch(self):
        with pytest.raises(DataError):
            md.recon_loss(eg.tensor(np.zeros((2, 391), np.float32)),
                          np.zeros((2, 390), np.float32))

    def test_adv_loss_half_probability(self, model):
        # zero fused features with zero-bias head -> sigmoid(0)=0.5 everywhere
        e = np.zeros((5, 64), np.float32)
        loss = md.adv_loss(model, eg.tensor(e), eg.tensor(e))
        assert loss.item() == pytest.approx(2 * math.log(2), rel=1e-5)

    def test_total_loss_weighted_sum(self):
        w = md.LossWeights()
        total, comps = md.total_loss(eg.tensor(1.0), eg.tensor(2.0), eg.tensor(4.0), w)
        assert total.item() == pytest.approx(1 + 1.0 * 2 + 0.5 * 4)
        assert comps["l_total"] == pytest.approx(5.0)

    def test_total_loss_zero_weights(self):
        w = md.LossWeights(w_rec=0.0, w_adv=0.0)
        total, _ = md.total_loss(eg.tensor(1.5), eg.tensor(9.0), eg.tensor(9.0), w)
        assert total.item() == pytest.approx(1.5)

    def test_bad_weights_rejected(self):
        with pytest.raises(DataError):
            md.LossWeights(tau=-1.0)
        with pytest.raises(DataError):
            md.LossWeights(w_rec=-0.1)


class TestGradients:
    def test_grl_sign_on_every_encoder_parameter(self, config):
        """Encoder gradients from the adversarial path must equal -lambda
        times the same gradients with the reversal removed."""
        rng = np.random.default_rng(9)
        b = _random_batch(rng, 3)
        lam = 0.7

        def adv_grads(reverse):
            m = md.AlignmentModel(config)
            e_h, _ = m.encode_human(b["t_h"], b["p_h"])
            e_r, _ = m.encode_robot(b["t_r"], b["p_r"])
            p_h = m.discriminate(e_h, reverse=reverse, lam=lam)
            p_r = m.discriminate(e_r, reverse=reverse, lam=lam)
            loss = eg.add(eg.mean(eg.bce(p_h, eg.tensor(np.zeros(p_h.shape, np.float32)))),
                          eg.mean(eg.bce(p_r, eg.tensor(np.ones(p_r.shape, np.float32)))))
            eg.backward(loss)
            return {n: (p.grad.copy() if p.grad is not None else None)
                    for n, p in m.params.items()}

        g_rev = adv_grads(True)
        g_plain = adv_grads(False)
        enc = [n for n in g_rev if n.startswith(("enc_", "fusion"))]
        assert enc
        for n in enc:
            assert g_rev[n] is not None, n
            np.testing.assert_allclose(g_rev[n], -lam * g_plain[n], atol=1e-7,
                                       err_msg=n)
        for n in g_rev:
            if n.startswith("disc"):
                np.testing.assert_allclose(g_rev[n], g_plain[n], atol=1e-7,
                                           err_msg=n)

    def test_full_model_gradient_vs_finite_differences(self, config):
        """Central differences over the complete parameter set on a
        4-sample batch; every parameter tensor is probed along its own
        unit gradient direction, whose directional derivative equals the
        gradient norm.

        Finite differences on a piecewise-linear network are only valid
        when no rectifier flips between the two evaluations, so each probe
        records every ReLU/LeakyReLU input sign and shrinks h until the
        evaluation pair crosses no kink. The adversarial head runs with
        the reversal bypassed (with the GRL active, the backward pass
        intentionally computes a non-gradient; its sign contract has its
        own test), and reconstruction targets sit near the decoder output
        so the loss is small enough for f32 differences to resolve."""
        rng = np.random.default_rng(10)
        batch = _random_batch(rng, 4)
        weights = md.LossWeights()
        m = md.AlignmentModel(config)
        for p in m.params.values():
            sign = rng.choice([-1.0, 1.0], size=p.data.shape)
            mag = rng.uniform(0.02, 0.05, size=p.data.shape)
            p.data += (sign * mag).astype(np.float32)
        e_h0, _ = m.encode_human(batch["t_h"], batch["p_h"])
        e_r0, _ = m.encode_robot(batch["t_r"], batch["p_r"])
        batch["u_h"] = np.clip(m.decode(e_h0, "human").data
                               + rng.uniform(-0.05, 0.05, (4, 391)), 0, 1).astype(np.float32)
        batch["u_r"] = np.clip(m.decode(e_r0, "robot").data
                               + rng.uniform(-0.05, 0.05, (4, 391)), 0, 1).astype(np.float32)

        def full_loss():
            e_h, z_h = m.encode_human(batch["t_h"], batch["p_h"])
            e_r, z_r = m.encode_robot(batch["t_r"], batch["p_r"])
            l_con = md.info_nce(z_h, z_r, weights.tau)
            l_rec = md.recon_loss(m.decode(e_h, "human"), batch["u_h"],
                                  m.decode(e_r, "robot"), batch["u_r"])
            p_h = m.discriminate(e_h, reverse=False)
            p_r = m.discriminate(e_r, reverse=False)
            l_adv = eg.add(
                eg.mean(eg.bce(p_h, eg.tensor(np.zeros(p_h.shape, np.float32)))),
                eg.mean(eg.bce(p_r, eg.tensor(np.ones(p_r.shape, np.float32)))))
            total, _ = md.total_loss(l_con, l_rec, l_adv, weights)
            return total

        def eval_with_kink_signs():
            total = full_loss()
            signs = [node.parents[0].data > 0
                     for node in eg.topo_order(total)
                     if node.op in ("relu", "leaky_relu")]
            return total.item(), signs

        loss = full_loss()
        eg.backward(loss)
        grads = {n: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                 for n, p in m.params.items()}

        # fixed h keeps rounding noise bounded; when a probe would cross a
        # kink the direction is rotated slightly (expected value <grad, v>
        # tracks the rotation exactly) instead of shrinking h into noise
        h = 2e-3
        worst = 0.0
        tested = 0
        for n, p in m.params.items():
            g = grads[n]
            ng = float(np.linalg.norm(g))
            if ng < 2e-2:
                continue   # below the f32 finite-difference noise floor
            saved = p.data.copy()
            result = None
            for attempt in range(8):
                v = g.copy()
                if attempt:
                    v = v + 0.35 * ng * rng.standard_normal(g.shape)                         / np.sqrt(g.size)
                v = (v / np.linalg.norm(v)).astype(np.float32)
                expect = float((g.astype(np.float64) * v).sum())
                p.data = saved + h * v
                fp, sp = eval_with_kink_signs()
                p.data = saved - h * v
                fm, sm = eval_with_kink_signs()
                p.data = saved.copy()
                if all(np.array_equal(a, b) for a, b in zip(sp, sm)):
                    result = (expect, (np.float64(fp) - np.float64(fm)) / (2 * h))
                    break
            if result is None:
                continue   # every probe direction pinned a kink; op tests cover it
            tested += 1
            expect, fd = result
            worst = max(worst, abs(expect - fd) / max(abs(fd), 1e-8))
        assert tested >= 80
        assert worst <= 5e-3, f"full-model gradient rel err {worst}"


class TestBatchLosses:
    def test_components_present(self, model):
        rng = np.random.default_rng(11)
        batch = _random_batch(rng, 4)
        total, comps, tensors = md.batch_losses(model, batch, md.LossWeights())
        assert set(comps) == {"l_con", "l_rec", "l_adv", "l_total"}
        assert tensors["z_h"].shape == (4, 32)
        assert total.item() == pytest.approx(
            comps["l_con"] + comps["l_rec"] + 0.5 * comps["l_adv"], rel=1e-5)

    def test_single_decoder_modes(self):
        rng = np.random.default_rng(12)
        batch = _random_batch(rng, 3)
        for mode in ("human_only", "robot_only"):
            cfg = md.ModelConfig.from_layouts(default_glove_layout(), default_hand(),
                                              decoder_mode=mode)
            m = md.AlignmentModel(cfg)
            total, comps, _ = md.batch_losses(m, batch, md.LossWeights())
            assert np.isfinite(total.item())

    def test_raw_mode_uses_raw_targets(self):
        rng = np.random.default_rng(13)
        batch = _random_batch(rng, 3)
        cfg = md.ModelConfig.from_layouts(default_glove_layout(), default_hand(),
                                          decoder_mode="raw_tactile")
        m = md.AlignmentModel(cfg)
        total, comps, _ = md.batch_losses(m, batch, md.LossWeights())
        assert np.isfinite(total.item())
