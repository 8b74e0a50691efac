import numpy as np
import pytest

from conftest import reference_adam
from cxrscreen.backbone import FeatureMatrix
from cxrscreen.errors import NumericError, ValidationError
from cxrscreen.evaluate import ScoreSet
from cxrscreen.head import (
    COVID_INDEX,
    AdamState,
    LinearHead,
    TrainConfig,
    adam_step,
    cross_entropy,
    grad_head,
    load_head,
    predict_scores,
    save_head,
    softmax,
    train_head,
)
from cxrscreen.manifest import ImageRecord, Label, Source, Split, Subgroup
from cxrscreen.synthetic import make_gaussian_fixture

# frozen 40-digit oracles (softmax of (0.3, -1.2); natural log of 2)
SOFTMAX_03_M12 = (0.8175744761936436596072171786562482475462, 0.1824255238063563403927828213437517524538)
LN2 = 0.6931471805599453094172321214581765680755


def feature_matrix(rows: np.ndarray, prefix: str = "r") -> FeatureMatrix:
    return FeatureMatrix(
        matrix=rows.astype(np.float32),
        row_ids=[f"{prefix}{i:04d}" for i in range(rows.shape[0])],
        backbone="SYNTHETIC",
        preprocessing_hash=b"\x00" * 32,
    )


class TestSoftmax:
    def test_symmetry(self):
        assert np.array_equal(softmax(np.zeros(2)), [0.5, 0.5])

    def test_large_logit_no_overflow(self):
        q = softmax(np.array([1000.0, 0.0]))
        assert q[0] == pytest.approx(1.0)
        assert q[1] == pytest.approx(0.0, abs=1e-300)
        assert np.all(np.isfinite(q))

    def test_frozen_oracle(self):
        q = softmax(np.array([0.3, -1.2]))
        assert q[0] == pytest.approx(SOFTMAX_03_M12[0], abs=1e-15)
        assert q[1] == pytest.approx(SOFTMAX_03_M12[1], abs=1e-15)

    def test_sums_to_one(self, score_rng):
        for _ in range(100):
            q = softmax(score_rng.normal(scale=10, size=2))
            assert abs(float(q.sum()) - 1.0) < 1e-12

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            softmax(np.array([np.nan, 0.0]))


class TestCrossEntropy:
    def test_half_half_is_ln2(self):
        assert cross_entropy([0, 1], [0.5, 0.5]) == pytest.approx(LN2, abs=1e-15)

    def test_confident_correct_loss_vanishes(self):
        eps = 1e-12
        assert cross_entropy([0, 1], [eps, 1 - eps]) == pytest.approx(0.0, abs=1e-11)

    def test_frozen_oracle_via_softmax(self):
        q = softmax(np.array([0.3, -1.2]))
        # -log of the 0.3-logit class probability, frozen at 40 digits
        assert cross_entropy([1, 0], q) == pytest.approx(
            0.2014132779827524094994828090570911052544, abs=1e-15
        )

    def test_zero_probability_at_true_class(self):
        with pytest.raises(NumericError):
            cross_entropy([1, 0], [0.0, 1.0])

    def test_loss_nonnegative(self, score_rng):
        for _ in range(50):
            q = softmax(score_rng.normal(size=2))
            assert cross_entropy([1, 0], q) >= 0.0


class TestGradHead:
    def test_exact_prediction_gives_zero_gradient(self, score_rng):
        w = score_rng.normal(size=(2, 5))
        b = score_rng.normal(size=2)
        x = score_rng.normal(size=5)
        q = softmax(w @ x + b)
        dw, db = grad_head(w, b, x, q)  # target equals prediction
        assert np.allclose(dw, 0.0, atol=1e-15)
        assert np.allclose(db, 0.0, atol=1e-15)

    def test_zero_feature(self, score_rng):
        w = score_rng.normal(size=(2, 4))
        b = score_rng.normal(size=2)
        x = np.zeros(4)
        dw, db = grad_head(w, b, x, [0, 1])
        assert np.array_equal(dw, np.zeros((2, 4)))
        q = softmax(b)
        assert np.allclose(db, q - np.array([0.0, 1.0]), atol=1e-15)

    def test_matches_central_finite_differences(self, score_rng):
        h = 1e-6
        for _ in range(10):
            dim = int(score_rng.integers(1, 8))
            w = score_rng.normal(size=(2, dim))
            b = score_rng.normal(size=2)
            x = score_rng.normal(size=dim)
            p = [1.0, 0.0] if score_rng.random() < 0.5 else [0.0, 1.0]
            dw, db = grad_head(w, b, x, p)

            def loss(w_, b_):
                return cross_entropy(p, softmax(w_ @ x + b_))

            for i in range(2):
                for j in range(dim):
                    wp, wm = w.copy(), w.copy()
                    wp[i, j] += h
                    wm[i, j] -= h
                    fd = (loss(wp, b) - loss(wm, b)) / (2 * h)
                    denom = max(abs(fd), abs(dw[i, j]), 1e-8)
                    assert abs(fd - dw[i, j]) / denom < 1e-6
                bp, bm = b.copy(), b.copy()
                bp[i] += h
                bm[i] -= h
                fd = (loss(w, bp) - loss(w, bm)) / (2 * h)
                denom = max(abs(fd), abs(db[i]), 1e-8)
                assert abs(fd - db[i]) / denom < 1e-6


class TestAdamStep:
    def test_zero_gradient_is_noop(self):
        params = (np.array([[1.0, 2.0]]), np.array([3.0]))
        state = AdamState.zeros_like(params)
        grads = (np.zeros((1, 2)), np.zeros(1))
        new_params, new_state = adam_step(params, grads, state, TrainConfig())
        assert np.array_equal(new_params[0], params[0])
        assert np.array_equal(new_params[1], params[1])
        assert new_state.t == 1

    def test_first_step_magnitude_is_learning_rate(self):
        cfg = TrainConfig(learning_rate=0.01)
        params = (np.array([1.0]),)
        grads = (np.array([42.0]),)
        new_params, _ = adam_step(params, grads, AdamState.zeros_like(params), cfg)
        # m_hat/sqrt(v_hat) == sign(g) when eps is negligible
        assert new_params[0][0] == pytest.approx(1.0 - 0.01, rel=1e-6)

    def test_ten_step_trajectory_matches_reference(self):
        cfg = TrainConfig(learning_rate=0.1)
        expected = reference_adam(lambda w: 2 * w, w0=1.0, steps=10, lr=0.1)
        params = (np.array([1.0]),)
        state = AdamState.zeros_like(params)
        got = []
        for _ in range(10):
            params, state = adam_step(params, (2 * params[0],), state, cfg)
            got.append(float(params[0][0]))
        assert np.allclose(got, expected, rtol=0, atol=1e-12)
        assert state.t == 10

    def test_non_finite_gradient_rejected(self):
        params = (np.array([1.0]),)
        with pytest.raises(NumericError):
            adam_step(params, (np.array([np.inf]),), AdamState.zeros_like(params), TrainConfig())

    def test_shape_mismatch_rejected(self):
        params = (np.array([1.0]),)
        with pytest.raises(ValidationError):
            adam_step(params, (), AdamState.zeros_like(params), TrainConfig())


class TestTrainConfig:
    def test_defaults_are_the_published_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.epochs, cfg.batch_size, cfg.learning_rate) == (100, 20, 1e-4)

    def test_invalid_values_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig(epochs=0)
        with pytest.raises(ValidationError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValidationError):
            TrainConfig(learning_rate=0.0)

    def test_echo_text_lists_every_field(self):
        text = TrainConfig().echo_text()
        for key in ("epochs", "batch_size", "learning_rate", "beta1", "beta2",
                    "epsilon", "shuffle_seed"):
            assert f"{key}=" in text


class TestTrainHead:
    def test_separable_clouds_reach_perfect_train_accuracy(self):
        fx = make_gaussian_fixture()
        by_path = {r.image_path: r.label for r in fx.manifest.records}
        labels = [by_path[rid] for rid in fx.train_features.row_ids]
        head, history = train_head(fx.train_features, labels, TrainConfig())
        x = fx.train_features.matrix.astype(np.float64)
        q = softmax(x @ head.weights.T + head.bias)
        predicted = np.argmax(q, axis=1)
        truth = np.array([1 if lab is Label.COVID else 0 for lab in labels])
        assert np.array_equal(predicted, truth)
        assert history.epoch_mean_loss[-1] < history.epoch_mean_loss[0]

    def test_loss_trend_non_increasing_in_windows(self):
        fx = make_gaussian_fixture()
        by_path = {r.image_path: r.label for r in fx.manifest.records}
        labels = [by_path[rid] for rid in fx.train_features.row_ids]
        _, history = train_head(fx.train_features, labels, TrainConfig(epochs=50))
        losses = history.epoch_mean_loss
        for i in range(0, len(losses) - 10):
            assert losses[i + 10] <= losses[i]

    def test_bitwise_deterministic(self, score_rng):
        rows = score_rng.normal(size=(30, 8))
        labels = [Label.COVID if i % 2 else Label.NON_COVID for i in range(30)]
        fm = feature_matrix(rows)
        cfg = TrainConfig(epochs=5, shuffle_seed=9)
        head1, _ = train_head(fm, labels, cfg)
        head2, _ = train_head(fm, labels, cfg)
        assert np.array_equal(head1.weights, head2.weights)
        assert np.array_equal(head1.bias, head2.bias)

    def test_row_order_does_not_matter(self, score_rng):
        rows = score_rng.normal(size=(20, 4))
        labels = [Label.COVID if i < 10 else Label.NON_COVID for i in range(20)]
        fm = feature_matrix(rows)
        perm = score_rng.permutation(20)
        shuffled = FeatureMatrix(
            matrix=fm.matrix[perm],
            row_ids=[fm.row_ids[i] for i in perm],
            backbone=fm.backbone,
            preprocessing_hash=fm.preprocessing_hash,
        )
        cfg = TrainConfig(epochs=3)
        head1, _ = train_head(fm, labels, cfg)
        head2, _ = train_head(shuffled, [labels[i] for i in perm], cfg)
        assert np.array_equal(head1.weights, head2.weights)
        assert np.array_equal(head1.bias, head2.bias)

    def test_seed_changes_the_head(self, score_rng):
        rows = score_rng.normal(size=(30, 6))
        labels = [Label.COVID if i % 3 == 0 else Label.NON_COVID for i in range(30)]
        fm = feature_matrix(rows)
        head1, _ = train_head(fm, labels, TrainConfig(epochs=5, shuffle_seed=0))
        head2, _ = train_head(fm, labels, TrainConfig(epochs=5, shuffle_seed=1))
        assert not np.array_equal(head1.weights, head2.weights)

    def test_single_class_rejected(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(10, 4)))
        with pytest.raises(ValidationError):
            train_head(fm, [Label.COVID] * 10, TrainConfig(epochs=1))

    def test_label_count_mismatch_rejected(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(10, 4)))
        with pytest.raises(ValidationError):
            train_head(fm, [Label.COVID] * 9, TrainConfig(epochs=1))


def records_for(features: FeatureMatrix, positives: set[str]):
    recs = []
    for rid in features.row_ids:
        positive = rid in positives
        recs.append(
            ImageRecord(
                image_path=rid,
                patient_id=rid,
                label=Label.COVID if positive else Label.NON_COVID,
                subgroup=Subgroup.COVID if positive else Subgroup.NORMAL,
                split=Split.TEST,
                source=Source.COVID_CORPUS if positive else Source.NEGATIVE_CORPUS,
            )
        )
    return recs


class TestPredictScores:
    def test_zero_head_scores_exactly_half(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(6, 4)))
        head = LinearHead(weights=np.zeros((2, 4)), bias=np.zeros(2), backbone="SYNTHETIC")
        scores = predict_scores(head, fm, records_for(fm, {fm.row_ids[0]}))
        assert all(e.score == 0.5 for e in scores.entries)

    def test_negating_head_mirrors_scores(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(8, 5)))
        w = score_rng.normal(size=(2, 5))
        b = score_rng.normal(size=2)
        recs = records_for(fm, {fm.row_ids[0]})
        plus = predict_scores(LinearHead(w, b, "SYNTHETIC"), fm, recs)
        minus = predict_scores(LinearHead(-w, -b, "SYNTHETIC"), fm, recs)
        for e1, e2 in zip(plus.entries, minus.entries):
            assert e1.score + e2.score == pytest.approx(1.0, abs=1e-12)

    def test_entries_carry_subgroup_tags(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(4, 3)))
        head = LinearHead(np.zeros((2, 3)), np.zeros(2), "SYNTHETIC")
        scores = predict_scores(head, fm, records_for(fm, {fm.row_ids[1]}))
        assert isinstance(scores, ScoreSet)
        assert scores.entries[1].subgroup is Subgroup.COVID
        assert scores.entries[0].subgroup is Subgroup.NORMAL

    def test_dimension_mismatch_rejected(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(4, 3)))
        head = LinearHead(np.zeros((2, 7)), np.zeros(2), "SYNTHETIC")
        with pytest.raises(ValidationError):
            predict_scores(head, fm, records_for(fm, set()))

    def test_backbone_mismatch_rejected(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(4, 512)))
        head = LinearHead(np.zeros((2, 512)), np.zeros(2), "RESNET18")
        with pytest.raises(ValidationError):
            predict_scores(head, fm, records_for(fm, set()))

    def test_missing_manifest_row_rejected(self, score_rng):
        fm = feature_matrix(score_rng.normal(size=(4, 3)))
        head = LinearHead(np.zeros((2, 3)), np.zeros(2), "SYNTHETIC")
        recs = records_for(fm, set())[:-1]
        with pytest.raises(ValidationError):
            predict_scores(head, fm, recs)


class TestHeadFile:
    def test_round_trip(self, tmp_path, score_rng):
        head = LinearHead(
            weights=score_rng.normal(size=(2, 16)),
            bias=score_rng.normal(size=2),
            backbone="SYNTHETIC",
            config_echo=TrainConfig().echo_text(),
        )
        path = tmp_path / "h.head"
        save_head(head, path)
        loaded = load_head(path)
        assert np.array_equal(loaded.weights, head.weights)
        assert np.array_equal(loaded.bias, head.bias)
        assert loaded.backbone == "SYNTHETIC"
        assert loaded.config_echo == head.config_echo

    def test_magic_and_layout(self, tmp_path):
        head = LinearHead(np.zeros((2, 3)), np.zeros(2), "RESNET18", "epochs=1\n")
        path = tmp_path / "h.head"
        save_head(head, path)
        raw = path.read_bytes()
        assert raw[:5] == b"HEAD1"
        assert int.from_bytes(raw[5:9], "little") == 3
        assert raw[9] == 0  # backbone code
        assert raw.endswith(b"epochs=1\n")

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.head"
        path.write_bytes(b"NOPE!" + b"\x00" * 64)
        from cxrscreen.errors import InputError

        with pytest.raises(InputError):
            load_head(path)
