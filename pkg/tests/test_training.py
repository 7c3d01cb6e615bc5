import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairnewsrec import autodiff as ad
from fairnewsrec import encoders as enc
from fairnewsrec import training as tr
from fairnewsrec.autodiff import Tensor
from fairnewsrec.config import LossWeights, desk_config
from fairnewsrec.data import SimulatorConfig, sample_instances, simulate_corpus
from fairnewsrec.store import ParameterStore

TINY = dict(title_len=8, history_len=6, word_dim=8, heads=2, head_dim=4, provider_dim=6, provider_hidden=6,
            attn_hidden=5, disc_hidden=7, batch_size=16, epochs=1, lr=1e-2)


@pytest.fixture(scope="module")
def corpus():
    return simulate_corpus(SimulatorConfig(n_users=60, n_news=80, n_providers=6, n_topics=4, seed=3)).corpus


@pytest.fixture(scope="module")
def instances(corpus):
    return list(sample_instances(corpus, corpus.train, 4, seed=1, history_len=6))


def make_trainer(corpus, **kw):
    return tr.Trainer(corpus, desk_config(**{**TINY, **kw}))


class TestScores:
    def test_example(self):
        s = tr.bias_aware_scores(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), Tensor([[[1.0, 0.0]]]), Tensor([[[0.0, 1.0]]]))
        assert s.data[0, 0] == 2.0

    def test_none_biased_is_fair_dot(self):
        rng = np.random.default_rng(0)
        u, n = rng.normal(size=(3, 4)), rng.normal(size=(3, 5, 4))
        s = tr.bias_aware_scores(Tensor(u), None, Tensor(n), None).data
        np.testing.assert_allclose(s, np.einsum("bd,bkd->bk", u, n), atol=1e-14)

    def test_four_term_expansion(self):
        rng = np.random.default_rng(1)
        uc, up = rng.normal(size=(2, 3, 6))
        nc, np_ = rng.normal(size=(2, 3, 5, 6))
        s = tr.bias_aware_scores(Tensor(uc), Tensor(up), Tensor(nc), Tensor(np_)).data
        dot = lambda u, n: np.einsum("bd,bkd->bk", u, n)
        np.testing.assert_allclose(s, dot(uc, nc) + dot(uc, np_) + dot(up, nc) + dot(up, np_), atol=1e-12)


class TestNce:
    def test_uniform_is_ln5(self):
        assert abs(tr.nce_loss(Tensor(np.full((3, 5), 0.7))).item() - math.log(5)) < 1e-9

    def test_saturation(self):
        assert tr.nce_loss(Tensor([[100.0, 0, 0, 0, 0]])).item() < 1e-40

    def test_two_negatives(self):
        v = tr.nce_loss(Tensor([[0.0, 1.0, -1.0]])).item()
        assert v == pytest.approx(math.log(1 + math.e + math.exp(-1)), abs=1e-12)

    def test_large_magnitudes_stable(self):
        assert math.isfinite(tr.nce_loss(Tensor([[-1e4, 1e4, 0.0]])).item())

    @given(st.lists(st.floats(-30, 30), min_size=5, max_size=5), st.floats(-1e3, 1e3))
    def test_shift_invariant(self, scores, c):
        a = tr.nce_loss(Tensor([scores])).item()
        b = tr.nce_loss(Tensor([[x + c for x in scores]])).item()
        assert abs(a - b) < 1e-9


class TestDiscriminatorLoss:
    def test_uniform_is_ln51(self):
        probs = np.full((4, 51), 1 / 51)
        assert abs(tr.discriminator_loss_from_probs(probs, [0, 5, 50, 7]) - math.log(51)) < 1e-9

    def test_certain_is_zero(self):
        probs = np.eye(51)[[3, 9]]
        assert tr.discriminator_loss_from_probs(probs, [3, 9]) == 0.0

    def test_mean_of_examples(self):
        probs = np.array([[0.5, 0.5], [0.2, 0.8]])
        assert tr.discriminator_loss_from_probs(probs, [0, 1]) == pytest.approx((-math.log(0.5) - math.log(0.8)) / 2)

    def test_floor(self):
        assert tr.discriminator_loss_from_probs(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-30))

    def test_logit_form_matches_probability_form(self):
        rng = np.random.default_rng(2)
        params = enc.init_params(enc.EncoderConfig(vocab_size=5, n_providers=3, rep_dim=6, heads=2, head_dim=3), rng)
        w = params.leaves()
        c = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        y = rng.integers(0, 51, 6)
        probs = enc.discriminate_provider(c, w).data
        assert tr.discriminator_loss(c, y, w).item() == pytest.approx(tr.discriminator_loss_from_probs(probs, y), abs=1e-12)


class TestAdversarialLoss:
    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(4)
        cfg = enc.EncoderConfig(vocab_size=5, n_providers=3, rep_dim=6, heads=2, head_dim=3, disc_hidden=8)
        params = enc.init_params(cfg, rng)
        return params, Tensor(rng.normal(size=(8, 6)), requires_grad=True), rng.integers(0, 51, 8)

    def test_value_equals_discriminator_loss_bitwise(self, setup):
        params, c, y = setup
        w = params.leaves()
        assert tr.adversarial_loss(c, y, w).item() == tr.discriminator_loss(c, y, w).item()

    def test_no_gradient_into_discriminator(self, setup):
        params, c, y = setup
        w = params.leaves()
        g = ad.backward(tr.adversarial_loss(c, y, w), [w[k] for k in params.group("disc.")] + [c])
        for k in params.group("disc."):
            assert not np.any(g[w[k]])
        assert np.any(g[c])

    def test_discriminator_loss_gives_no_gradient_to_reps(self, setup):
        params, c, y = setup
        w = params.leaves()
        g = ad.backward(tr.discriminator_loss(c, y, w), [c, w["disc.w1"]])
        assert not np.any(g[c]) and np.any(g[w["disc.w1"]])

    def test_descending_negative_objective_increases_la(self, setup):
        params, c, y = setup
        w = params.leaves(lambda k: False)
        before = tr.adversarial_loss(c, y, w).item()
        g = ad.backward(tr.adversarial_loss(c, y, w) * -0.004, [c])[c]
        c2 = Tensor(c.data - 1.0 * g)
        assert tr.adversarial_loss(c2, y, w).item() > before

    def test_gradient_sign_in_total(self, setup):
        params, c, y = setup
        w = params.leaves(lambda k: False)
        la = tr.adversarial_loss(c, y, w)
        g_la = ad.backward(la, [c])[c].copy()
        weights = LossWeights(0, 0, 0, 0.004)
        zero = ad.constant(0.0)
        g_total = ad.backward(tr.total_loss(zero, zero, zero, tr.adversarial_loss(c, y, w), weights), [c])[c]
        np.testing.assert_allclose(g_total, -0.004 * g_la, rtol=0, atol=1e-18)


class TestOrthogonal:
    @pytest.mark.parametrize("a,b,expected", [((1, 0), (0, 1), 0.0), ((1, 2), (2, 4), 1.0), ((1, 0), (-1, 0), 1.0)])
    def test_examples(self, a, b, expected):
        v, deg = tr.orthogonal_reg(Tensor([a]), Tensor([b]))
        assert v.item() == expected and deg == 0

    def test_degenerate_rows_flagged_and_excluded(self):
        v, deg = tr.orthogonal_reg(Tensor([[0.0, 0.0], [1.0, 2.0]]), Tensor([[1.0, 1.0], [2.0, 4.0]]))
        assert deg == 1 and v.item() == 1.0

    def test_all_degenerate(self):
        v, deg = tr.orthogonal_reg(Tensor(np.zeros((2, 3)), requires_grad=True), Tensor(np.ones((2, 3))))
        assert v.item() == 0.0 and deg == 2

    def test_pressure_reduces_cosine(self):
        rng = np.random.default_rng(6)
        f = Tensor(rng.normal(size=(10, 5)), requires_grad=True)
        b = Tensor(f.data + 0.3 * rng.normal(size=(10, 5)), requires_grad=True)
        from fairnewsrec.optim import AdamState, adam_apply

        store = ParameterStore({"f": f.data, "b": b.data})
        state = AdamState(lr=0.01)
        first = None
        for _ in range(50):
            w = store.leaves()
            loss, _ = tr.orthogonal_reg(w["f"], w["b"])
            first = loss.item() if first is None else first
            g = ad.backward(loss, [w["f"], w["b"]])
            adam_apply(state, store, {"f": g[w["f"]], "b": g[w["b"]]})
        final, _ = tr.orthogonal_reg(Tensor(store["f"]), Tensor(store["b"]))
        assert final.item() < first


class TestTotalLoss:
    def test_example(self):
        assert tr.total_loss(1.0, 0.1, 0.2, 3.0, LossWeights()) == pytest.approx(1.288, abs=1e-12)

    def test_zero_weights(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        z = LossWeights(0, 0, 0, 0)
        loss = tr.total_loss(x.sum(), x.mean(), (x * x).sum(), x.sum(), z)
        assert loss.item() == 0.0
        assert not np.any(ad.backward(loss, [x])[x])

    def test_negative_weight_rejected(self):
        from fairnewsrec.data import ConfigError

        with pytest.raises(ConfigError):
            LossWeights(a=-0.1)

    @given(*[st.floats(0, 10)] * 8)
    def test_identity(self, lc, lu, ln, la, wc, wu, wn, wa):
        w = LossWeights(wc, wu, wn, wa)
        assert abs(tr.total_loss(lc, lu, ln, la, w) - (wc * lc + wu * lu + wn * ln - wa * la)) < 1e-9


def diverse_pair(corpus, instances, offset):
    """Two instances from different users whose histories span >= 4 providers.

    With fewer distinct providers the biased user vectors see repeated
    inputs, pooling gradients shrink toward central-difference roundoff and
    the per-entry relative error stops measuring anything.
    """
    prov = corpus.provider_ids()
    out, users = [], set()
    for inst in instances[offset:]:
        if inst.user_id not in users and len(inst.history) >= 5 and len({prov[r] for r in inst.history[-6:]}) >= 4:
            out.append(inst)
            users.add(inst.user_id)
        if len(out) == 2:
            return out
    raise AssertionError("no suitable pair")


def end_to_end_gradient_errors(corpus, instances, seed=2) -> dict[str, float]:
    """Worst finite-difference relative error of every parameter of L.

    Discriminator parameters are constants inside L, so they are checked
    through L^d. The point has O(1) inputs with no dead units or zero vectors.
    """
    trainer = tr.Trainer(corpus, desk_config(**{**TINY, "seed": seed}))
    batch = trainer.batch(diverse_pair(corpus, instances, 37 * seed))
    store = trainer.params
    rng = np.random.default_rng(seed)
    for k in store:
        if k in ("word_emb", "prov.emb"):
            v = rng.normal(size=store[k].shape)
            v[0] *= k != "word_emb"
            store[k] = v
        elif k.split(".")[-1].startswith(("b", "att_b")):
            store[k] = rng.normal(scale=0.1, size=store[k].shape)
    worst = {}
    for name in store:
        w = store.leaves(lambda k: k == name)

        def fn():
            fw = tr.forward(batch, w, trainer.cfg)
            if tr.is_discriminator(name):
                return tr.discriminator_loss(fw.news_fair, batch.labels, w)
            la = tr.adversarial_loss(fw.news_fair, batch.labels, w)
            return tr.total_loss(fw.l_c, fw.l_u, fw.l_n, la, LossWeights(1, 1, 1, 0.5))

        worst[name] = ad.finite_difference_check(fn, w[name], 1e-5)
    return worst


class TestEndToEndGradient:
    def test_total_loss_gradient_on_two_instances(self, corpus, instances):
        worst = end_to_end_gradient_errors(corpus, instances)
        assert max(worst.values()) < 1e-4, worst


class TestTrainStep:
    def test_report_identity(self, corpus, instances):
        t = make_trainer(corpus, lambda_a=0.3)
        r = tr.train_step(t, instances[:8])
        assert abs(r.total - (r.l_c + r.l_u + r.l_n - 0.3 * r.l_a)) < 1e-9
        assert 0.0 <= r.disc_accuracy <= 1.0
        assert {"news", "prov", "user_fair", "user_biased", "word_emb", "disc"} <= set(r.grad_norms)

    def test_phase_freeze(self, corpus, instances, monkeypatch):
        t = make_trainer(corpus)
        snapshots = []
        real = tr.adam_apply

        def spy(state, params, grads):
            snapshots.append(params.copy())
            real(state, params, grads)
            snapshots.append(params.copy())

        monkeypatch.setattr(tr, "adam_apply", spy)
        tr.train_step(t, instances[:8])
        (a0, a1, b0, b1) = snapshots
        for k in a0:
            changed_a = a0[k].tobytes() != a1[k].tobytes()
            changed_b = b0[k].tobytes() != b1[k].tobytes()
            if tr.is_discriminator(k):
                assert changed_a and not changed_b, k
            else:
                assert not changed_a, k

    def test_weight_zero_reduces_to_plain_nce(self, corpus, instances):
        t = make_trainer(corpus, lambda_a=0, lambda_u=0, lambda_n=0)
        batch = t.batch(instances[:8])
        w = t.params.leaves(lambda k: not tr.is_discriminator(k))
        fw = tr.forward(batch, w, t.cfg)
        ref = ad.backward(fw.l_c, [w["news.mhsa.wq"]])[w["news.mhsa.wq"]].copy()
        la = tr.adversarial_loss(fw.news_fair, batch.labels, w)
        tot = tr.total_loss(fw.l_c, fw.l_u, fw.l_n, la, t.weights)
        got = ad.backward(tot, [w["news.mhsa.wq"]])[w["news.mhsa.wq"]]
        np.testing.assert_array_equal(got, ref)

    def test_baseline_leaves_biased_modules_untouched(self, corpus, instances):
        t = make_trainer(corpus, biased_reps=False, lambda_a=0, lambda_u=0, lambda_n=0)
        before = t.params.copy()
        tr.train_step(t, instances[:8])
        for k in before:
            if k.startswith(("prov.", "user_biased.")):
                assert before[k].tobytes() == t.params[k].tobytes()

    def test_smoke_reduces_click_loss(self, corpus, instances):
        t = make_trainer(corpus, lr=5e-3)
        batch = t.batch(instances[:50])
        first = t.step(batch).l_c
        for _ in range(199):
            last = t.step(batch).l_c
        assert last < first

    def test_non_finite_aborts(self, corpus, instances):
        t = make_trainer(corpus)
        t.params["news.mhsa.wq"] = np.full_like(t.params["news.mhsa.wq"], np.nan)
        with pytest.raises(tr.TrainingError, match="L_"):
            tr.train_step(t, instances[:4])

    def test_empty_batch(self, corpus):
        with pytest.raises(ValueError):
            tr.train_step(make_trainer(corpus), [])


class TestBatch:
    def test_codes_point_to_rows(self, corpus, instances):
        t = make_trainer(corpus)
        b = t.batch(instances[:5])
        for i, inst in enumerate(instances[:5]):
            assert [b.news_rows[c - 1] for c in b.candidates[i]] == list(inst.candidates)
            kept = list(inst.history[-6:])
            assert [b.news_rows[c - 1] for c in b.history[i] if c] == kept
        assert len(set(b.news_rows)) == len(b.news_rows)


class TestTrainRun:
    def test_epochs_zero_returns_initial(self, corpus):
        run = desk_config(**{**TINY, "epochs": 0})
        res = tr.train_run(corpus, run)
        assert res.params.equals(tr.Trainer(corpus, run).params)
        assert res.best_epoch == 0 and res.epochs == []

    def test_deterministic_checkpoints_and_metrics(self, corpus, tmp_path):
        run = desk_config(**TINY)
        tr.train_run(corpus, run, tmp_path / "a")
        tr.train_run(corpus, run, tmp_path / "b")
        for name in ("epoch1.ckpt", "metrics.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        header = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
        assert header == "epoch,L_c,L_d,L_a,L_u,L_n,val_auc,val_rnd10"

    def test_empty_corpus(self, corpus):
        from dataclasses import replace

        empty = replace(corpus, train=[])
        with pytest.raises(tr.TrainingError):
            tr.train_run(empty, desk_config(**TINY))
