import math

import numpy as np
import pytest

from tscan import autodiff as ad
from tscan import training as tr
from tscan.autodiff import ParamStore
from tscan.layers import LayerConfig
from tscan.model import ModelConfig, TSCANModel
from tscan.pipeline import Sample
from tscan.training import (Adam, DivergenceError, Sgd, TrainConfig,
                            auto_class_weight, logistic_baseline, loss,
                            should_stop, train)

from conftest import numeric_grad, rel_err


def small_model_config(task="ihm", n_classes=2, d=4, fusion="concatenate"):
    return ModelConfig(t=8, d=d, n=2,
                       layer=LayerConfig(d_model=4, n_heads=2, d_ff=4,
                                         dropout_rate=0.0),
                       fusion=fusion, task=task, n_classes=n_classes)


def separable_samples(rng, n, d=4, t=8):
    """Half positive, half negative, split by a mean shift."""
    samples = []
    for i in range(n):
        y = i % 2
        shift = 1.0 if y else -1.0
        x = rng.normal(size=(t, d)) * 0.3 + shift
        samples.append(Sample(x=x, y=y, prediction_time=float(t),
                              icustay_id=9000 + i, subject_id=1000 + i))
    return samples


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(optimizer="lbfgs")

    def test_roundtrip(self):
        cfg = TrainConfig(epochs=5, batch_size=4, seed=7, class_weight=2.0)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestLoss:
    def test_perfect_prediction_near_zero(self):
        probs = ad.constant([0.0, 1.0])
        assert float(loss(probs, 1, "ihm").data) <= 1e-6

    def test_uniform_binary_is_ln2(self):
        probs = ad.constant([0.5, 0.5])
        assert float(loss(probs, 1, "ihm").data) == pytest.approx(math.log(2),
                                                                  abs=1e-12)
        assert float(loss(probs, 0, "ihm").data) == pytest.approx(math.log(2),
                                                                  abs=1e-12)

    def test_positive_class_weight(self):
        probs = ad.constant([0.5, 0.5])
        weighted = float(loss(probs, 1, "ihm", class_weight=3.0).data)
        assert weighted == pytest.approx(3 * math.log(2), abs=1e-12)
        # negatives are unweighted
        assert float(loss(probs, 0, "ihm", class_weight=3.0).data) == \
            pytest.approx(math.log(2), abs=1e-12)

    def test_los_cross_entropy(self):
        p = np.full(10, 0.1)
        assert float(loss(ad.constant(p), 4, "los").data) == \
            pytest.approx(math.log(10), abs=1e-12)

    def test_phenotype_mean_bce(self):
        probs = ad.constant([0.5] * 25)
        y = np.zeros(25)
        y[:5] = 1
        assert float(loss(probs, y, "phenotype").data) == \
            pytest.approx(math.log(2), abs=1e-12)

    def test_bce_gradient_through_softmax_path(self, rng):
        # loss at p=0.8 for y=1 has d/dp = -1/0.8 = -1.25, carried through
        # the softmax; checked against central differences on the logits
        logits = np.array([math.log(0.2), math.log(0.8)])

        def f(z):
            e = np.exp(z - z.max())
            p = e / e.sum()
            return -math.log(p[1])

        numeric = numeric_grad(f, [logits])[0]
        node = ad.constant(logits)
        probs = ad.softmax(node, 0)
        assert probs.data[1] == pytest.approx(0.8, abs=1e-12)
        ad.backward(loss(probs, 1, "ihm"))
        assert rel_err(node.grad, numeric) < 1e-6
        # the chain starts from dL/dp = -1/p
        ad_probs = ad.constant([0.2, 0.8])
        ad.backward(loss(ad_probs, 1, "ihm"))
        assert ad_probs.grad[1] == pytest.approx(-1.25, abs=1e-12)

    def test_auto_class_weight(self):
        samples = [Sample(x=np.zeros((2, 2)), y=y, prediction_time=0.0,
                          icustay_id=i, subject_id=i)
                   for i, y in enumerate([1, 0, 0, 0])]
        assert auto_class_weight(samples, "ihm") == 3.0
        assert auto_class_weight(samples, "los") == 1.0


class TestOptimizers:
    def _bowl(self):
        store = ParamStore()
        store.register("w", np.array([3.0, -2.0, 1.5]))
        target = np.array([1.0, 1.0, 1.0])

        def evaluate():
            diff = ad.sub(store["w"], ad.constant(target))
            return ad.sum(ad.mul(diff, diff))

        return store, evaluate

    @pytest.mark.parametrize("lr", [1e-3, 1e-2])
    def test_adam_descends_quadratic_bowl(self, lr):
        store, evaluate = self._bowl()
        opt = Adam(store, learning_rate=lr)
        losses = []
        for _ in range(10):
            store.zero_grads()
            value = evaluate()
            losses.append(float(value.data))
            ad.backward(value)
            opt.step({"w": store["w"].grad})
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_sgd_step(self):
        store = ParamStore()
        store.register("w", np.array([1.0, 2.0]))
        Sgd(store, 0.5).step({"w": np.array([2.0, 4.0])})
        np.testing.assert_array_equal(store["w"].data, [0.0, 0.0])

    def test_adam_matches_reference_formula(self):
        store = ParamStore()
        store.register("w", np.array([1.0]))
        opt = Adam(store, learning_rate=0.1)
        g = np.array([0.5])
        opt.step({"w": g})
        m_hat = (0.1 * 0.5) / (1 - 0.9)
        v_hat = (0.001 * 0.25) / (1 - 0.999)
        expected = 1.0 - 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        assert store["w"].data[0] == pytest.approx(expected, abs=1e-15)


class TestTrainLoop:
    def test_zero_learning_rate_leaves_params_bitwise(self, rng):
        samples = separable_samples(rng, 8)
        config = small_model_config()
        before = TSCANModel(config, seed=3).params.copy_values()
        result = train(samples[:6], samples[6:], config,
                       TrainConfig(epochs=1, batch_size=4, learning_rate=0.0,
                                   seed=3))
        after = result.model.params.copy_values()
        assert before.keys() == after.keys()
        for name in before:
            assert (before[name] == after[name]).all(), name

    def test_same_seed_identical_log(self, rng):
        samples = separable_samples(rng, 12)
        config = small_model_config()
        tc = TrainConfig(epochs=3, batch_size=4, seed=11)
        log_a = train(samples[:8], samples[8:], config, tc).log
        log_b = train(samples[:8], samples[8:], config, tc).log
        strip = lambda log: [(r["epoch"], r["train_loss"], r["val_metric"])
                             for r in log.epochs]
        assert strip(log_a) == strip(log_b)
        assert log_a.best_epoch == log_b.best_epoch

    def test_batch_gradient_is_mean_of_per_sample(self, rng):
        config = small_model_config()
        model = TSCANModel(config, seed=2)
        samples = separable_samples(rng, 3)

        def sample_grads(s):
            model.params.zero_grads()
            result = model.forward(s.x)
            ad.backward(tr.loss(result.probs, s.y, config.task))
            return {name: np.array(node.grad)
                    for name, node in model.params.items()}

        per_sample = [sample_grads(s) for s in samples]
        model.params.zero_grads()
        for s in samples:
            result = model.forward(s.x)
            ad.backward(tr.loss(result.probs, s.y, config.task))
        for name, node in model.params.items():
            accumulated = node.grad / len(samples)
            mean = sum(g[name] for g in per_sample) / len(samples)
            np.testing.assert_allclose(accumulated, mean, atol=1e-10)

    def test_learns_separable_data(self, rng):
        samples = separable_samples(rng, 36)
        result = train(samples[:24], samples[24:], small_model_config(),
                       TrainConfig(epochs=12, batch_size=8,
                                   learning_rate=3e-3, seed=0))
        assert result.log.best_metric() >= 0.95

    def test_divergence_guard_reports_batch(self, rng):
        samples = separable_samples(rng, 8)
        with np.errstate(all="ignore"):
            with pytest.raises(DivergenceError, match="epoch"):
                train(samples[:6], samples[6:], small_model_config(),
                      TrainConfig(epochs=8, batch_size=2, learning_rate=1e200,
                                  seed=0))

    def test_early_stopping_bound(self, rng):
        # frozen parameters give a constant validation metric, so the loop
        # must stop at best_epoch + patience
        samples = separable_samples(rng, 10)
        result = train(samples[:6], samples[6:], small_model_config(),
                       TrainConfig(epochs=20, batch_size=4, learning_rate=0.0,
                                   early_stop_patience=3, seed=1))
        log = result.log
        assert log.stopped_early
        last_epoch = log.epochs[-1]["epoch"]
        assert last_epoch <= log.best_epoch + 3

    def test_should_stop_helper(self):
        assert not should_stop(0, 3)
        assert not should_stop(2, 3)
        assert should_stop(3, 3)

    def test_best_epoch_is_argmax(self, rng):
        samples = separable_samples(rng, 16)
        result = train(samples[:10], samples[10:], small_model_config(),
                       TrainConfig(epochs=6, batch_size=4, seed=4))
        metrics = [r["val_metric"] for r in result.log.epochs]
        assert result.log.best_metric() == max(metrics)

    def test_trainlog_csv(self, rng):
        samples = separable_samples(rng, 10)
        result = train(samples[:6], samples[6:], small_model_config(),
                       TrainConfig(epochs=2, batch_size=4, seed=0))
        lines = result.log.to_csv().strip().splitlines()
        assert lines[0] == "epoch,train_loss,val_auc_roc,wall_time,best"
        assert len(lines) == len(result.log.epochs) + 1


class TestLogisticBaseline:
    def test_linearly_separable_accuracy(self, rng):
        samples = separable_samples(rng, 40, d=2, t=4)
        result = logistic_baseline(samples, samples, "ihm")
        probs = result.metrics
        assert probs.values["auc_roc"] == 1.0
        # predicted class matches the label everywhere
        from tscan.training import _predict_logistic, summary_features
        x = summary_features(samples)
        x = (x - result.feature_stats[0]) / result.feature_stats[1]
        pred = (_predict_logistic(result.weights[0], x) > 0.5).astype(int)
        assert (pred == np.array([s.y for s in samples])).all()

    def test_constant_labels_predict_prior(self, rng):
        samples = [Sample(x=rng.normal(size=(4, 2)), y=1, prediction_time=0.0,
                          icustay_id=i, subject_id=i) for i in range(20)]
        from tscan.training import _fit_logistic, _predict_logistic, \
            summary_features
        x = summary_features(samples)
        w = _fit_logistic(x, np.ones(20))
        p = _predict_logistic(w, x)
        assert np.abs(p - 1.0).max() < 0.05

    def test_phenotype_per_label_fits(self, rng):
        samples = []
        for i in range(30):
            y = np.zeros(25, dtype=np.int64)
            y[i % 25] = 1
            y[(i + 3) % 25] = 1
            samples.append(Sample(x=rng.normal(size=(4, 3)), y=y,
                                  prediction_time=0.0, icustay_id=i,
                                  subject_id=i))
        result = logistic_baseline(samples, samples, "phenotype")
        assert result.weights.shape[0] == 25
        assert {"macro_auc", "micro_auc"} <= set(result.metrics.values)

    def test_los_rejected(self, rng):
        with pytest.raises(ValueError, match="binary"):
            logistic_baseline(separable_samples(rng, 4), [], "los")
