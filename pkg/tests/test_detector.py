import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from freqshield import detector as D
from freqshield.data import generate_synthetic
from freqshield.models import build_unet_autoencoder, train_autoencoder
from freqshield.transforms import log_magnitude_feature


@pytest.fixture(scope="module")
def trained():
    ds = generate_synthetic(12, size=16, seed=0)
    ae = build_unet_autoencoder(input_size=16, latent=8, seed=0)
    train_autoencoder(ae, D.preprocess(ds.images), "mse", epochs=4, batch_size=16, lr=3e-3)
    return ae


@pytest.fixture
def bundle(trained):
    b = D.DetectorBundle(trained, "mse")
    D.calibrate(b, generate_synthetic(25, size=16, seed=1).images, 0.9)
    return b


def _stats(t_re=1.0, t_enc=1.0, t_dec=1.0):
    return D.CalibrationStats(0.95, t_re, t_enc, t_dec, np.zeros(2), np.zeros((1, 2, 2)), 1, "1:x")


class TestNearestRank:
    def test_one_to_hundred(self):
        vals = np.arange(1, 101)[::-1]
        assert D.nearest_rank(vals, 0.95) == 95
        assert D.nearest_rank(vals, 1.0) == 100
        assert D.nearest_rank(vals, 0.001) == 1

    def test_decimal_q_is_exact(self):
        # 0.95 * 20 is 19 exactly in decimal, but 19.000000000000004 in binary
        assert D.nearest_rank(np.arange(1, 21), 0.95) == 19

    def test_empty(self):
        with pytest.raises(ValueError):
            D.nearest_rank([], 0.5)


class TestStatistics:
    def test_match_independent_recomputation(self, bundle, trained):
        x = np.random.default_rng(0).random((5, 16, 16)).astype(np.float32)
        got = D.statistics(bundle, x)
        s = log_magnitude_feature(x)[:, None].astype(np.float32)
        z = trained.encode(s).data.astype(np.float64)
        rec = trained.decode(trained.encode(s)).data.astype(np.float64)
        cal = bundle.calibration
        np.testing.assert_allclose(got["loss"], ((s - rec) ** 2).mean(axis=(1, 2, 3)), atol=1e-6)
        np.testing.assert_allclose(got["encoded"], np.sqrt(((z - cal.mu_enc) ** 2).sum(axis=1)), atol=1e-6)
        np.testing.assert_allclose(got["decoded"], np.sqrt(((rec - cal.mu_dec) ** 2).sum(axis=(1, 2, 3))), atol=1e-6)

    def test_latent_at_centroid_has_zero_distance(self, bundle, trained):
        x = np.random.default_rng(1).random((1, 16, 16)).astype(np.float32)
        bundle.calibration.mu_enc = trained.encode(D.preprocess(x)).data[0].astype(np.float64)
        assert D.statistics(bundle, x)["encoded"][0] == 0.0

    def test_uncalibrated(self, trained):
        with pytest.raises(D.NotCalibrated):
            D.statistics(D.DetectorBundle(trained, "mse"), np.zeros((1, 16, 16)))

    def test_preprocess_accepts_channel_axis(self):
        x = np.random.default_rng(2).random((3, 1, 8, 8))
        assert np.array_equal(D.preprocess(x), D.preprocess(x[:, 0]))


class TestCalibrate:
    def test_thresholds_positive_and_shapes(self, bundle, trained):
        cal = bundle.calibration
        assert min(cal.t_re, cal.t_enc, cal.t_dec) > 0
        assert cal.mu_enc.shape == (trained.latent_dim,)
        assert cal.mu_dec.shape == (1, 16, 16)
        assert cal.n == 100

    def test_q_one_gives_no_false_positives_on_itself(self, trained):
        b = D.DetectorBundle(trained, "mse")
        x = generate_synthetic(10, size=16, seed=3).images
        D.calibrate(b, x, 1.0)
        v = D.detect(b, x, "any")
        assert not v.flagged.any()
        # the maximum sits exactly at its threshold and is not flagged
        assert v.scores["loss"].max() == b.calibration.t_re

    def test_idempotent(self, trained):
        x = generate_synthetic(8, size=16, seed=4).images
        a = D.calibrate(D.DetectorBundle(trained, "mse"), x)
        b = D.calibrate(D.DetectorBundle(trained, "mse"), x)
        assert a.to_dict() == b.to_dict()

    def test_errors(self, trained):
        b = D.DetectorBundle(trained, "mse")
        with pytest.raises(ValueError, match="empty"):
            D.calibrate(b, np.zeros((0, 16, 16)))
        with pytest.raises(ValueError):
            D.calibrate(b, np.zeros((2, 16, 16)), q=0.0)

    def test_file_round_trip(self, bundle, tmp_path):
        D.save_calibration(bundle.calibration, tmp_path / "c.json")
        back = D.load_calibration(tmp_path / "c.json")
        assert back.to_dict() == bundle.calibration.to_dict()
        assert np.array_equal(back.mu_dec, bundle.calibration.mu_dec)
        assert back.fingerprint.startswith("100:")

    def test_corrupt_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{nope")
        with pytest.raises(ValueError, match="corrupt"):
            D.load_calibration(tmp_path / "c.json")
        (tmp_path / "c.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            D.load_calibration(tmp_path / "c.json")

    def test_fingerprint_sensitive_to_content(self):
        x = np.zeros((3, 4, 4), np.float32)
        y = x.copy()
        y[0, 0, 0] = 1e-3
        assert D.fingerprint(x) != D.fingerprint(y)
        assert D.fingerprint(x).startswith("3:")

    def test_raising_q_never_raises_fpr(self, trained):
        b = D.DetectorBundle(trained, "mse")
        cal_x = generate_synthetic(25, size=16, seed=5).images
        hold = generate_synthetic(25, size=16, seed=6).images
        fprs = []
        for q in (0.5, 0.7, 0.8, 0.9, 0.95, 1.0):
            D.calibrate(b, cal_x, q)
            fprs.append(D.detect(b, hold, "any").flagged.mean())
        assert fprs == sorted(fprs, reverse=True)


class TestVerdicts:
    def test_strict_inequality(self):
        cal = _stats(2.0, 2.0, 2.0)
        scores = {"loss": np.array([2.0, 2.0000001]), "encoded": np.array([0.0, 0.0]),
                  "decoded": np.array([0.0, 0.0])}
        assert D.verdict_from_scores(cal, scores, "loss").flagged.tolist() == [False, True]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=20))
    def test_combinations(self, rows):
        cal = _stats()
        arr = np.asarray(rows, dtype=float) * 2  # flagged -> 2 > 1, else 0
        scores = {k: arr[:, i] for i, k in enumerate(D.STATISTICS)}
        votes = np.asarray(rows).sum(axis=1)
        assert D.verdict_from_scores(cal, scores, "any").flagged.tolist() == (votes >= 1).tolist()
        assert D.verdict_from_scores(cal, scores, "majority").flagged.tolist() == (votes >= 2).tolist()
        for i, k in enumerate(D.STATISTICS):
            v = D.verdict_from_scores(cal, scores, k)
            assert v.flagged.tolist() == [r[i] for r in rows]

    def test_unknown_method(self, bundle):
        with pytest.raises(ValueError, match="majority"):
            D.detect(bundle, np.zeros((1, 16, 16)), "vote")

    def test_deterministic(self, bundle):
        x = np.random.default_rng(7).random((4, 16, 16)).astype(np.float32)
        a, b = D.detect(bundle, x, "any"), D.detect(bundle, x, "any")
        assert a.flagged.tolist() == b.flagged.tolist()
        assert all(np.array_equal(a.scores[k], b.scores[k]) for k in D.STATISTICS)


class CountingClassifier:
    def __init__(self):
        self.calls, self.seen = 0, 0

    def predict(self, x):
        self.calls += 1
        self.seen += len(x)
        return np.arange(len(x)) % 4


class TestGuarded:
    def test_flagged_images_never_reach_classifier(self, bundle):
        x = np.random.default_rng(8).random((3, 16, 16)).astype(np.float32)
        clf = CountingClassifier()
        flagged = D.DetectionVerdict({}, {}, "loss", np.array([True, True, True]))
        out = D.guarded_classify(bundle, clf, x, verdict=flagged)
        assert out.tolist() == [D.REJECTED] * 3
        assert clf.calls == 0

    def test_pass_through_preserves_prediction(self, bundle):
        x = np.random.default_rng(9).random((4, 16, 16)).astype(np.float32)
        clf = CountingClassifier()
        verdict = D.DetectionVerdict({}, {}, "loss", np.array([False, True, False, False]))
        out = D.guarded_classify(bundle, clf, x, verdict=verdict)
        assert out.tolist() == [0, D.REJECTED, 1, 2]
        assert clf.seen == 3

    def test_accuracy_metrics(self):
        labels = np.array([0, 1, 2, 3])
        adv = np.array([False, False, True, True])
        preds = np.array([0, D.REJECTED, D.REJECTED, 0])
        # correct clean, rejected clean (wrong), rejected adversarial (right), fooled adversarial (wrong)
        assert D.guarded_accuracy(preds, labels, adv) == 0.5
        assert D.detection_accuracy([False, True, True, False], adv) == 0.5

    def test_all_clean_detection_is_one_minus_fpr(self):
        flags = np.array([False] * 19 + [True])
        assert D.detection_accuracy(flags, np.zeros(20, bool)) == pytest.approx(1 - flags.mean())
