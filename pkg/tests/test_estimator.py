import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from stgcn_svs import datagen as dg
from stgcn_svs.errors import ShapeMismatch, StgcnError
from stgcn_svs.estimator import STGCNClassifier
from stgcn_svs.graph import make_ring, save_topology


@pytest.fixture(scope="module")
def panel_data():
    topo = make_ring(6, chords=1, seed=2)
    cfg = dg.ScenarioConfig(severity=(0.4, 1.0), motor_ratio=(0.7, 0.9), seed=21)
    ds = dg.generate(topo, cfg, 140)
    return topo, ds.panel(), ds.labels()


def quick_clf(topo, **kw):
    defaults = dict(topology=topo, hidden=4, num_blocks=2, epochs=14,
                    steps_per_epoch=5, batch_size=40, learning_rate=0.02, seed=3)
    defaults.update(kw)
    return STGCNClassifier(**defaults)


class TestSklearnContract:
    def test_get_set_params_round_trip(self, panel_data):
        topo, _, _ = panel_data
        clf = quick_clf(topo)
        params = clf.get_params()
        assert params["hidden"] == 4 and params["topology"] is topo
        clf.set_params(hidden=2)
        assert clf.hidden == 2

    def test_clone(self, panel_data):
        topo, _, _ = panel_data
        cloned = clone(quick_clf(topo))
        assert cloned.get_params()["epochs"] == 14

    def test_not_fitted(self, panel_data):
        topo, X, _ = panel_data
        with pytest.raises(NotFittedError):
            quick_clf(topo).predict(X[:2])

    def test_defaults_mirror_training_protocol(self):
        clf = STGCNClassifier()
        p = clf.get_params()
        assert p["cheb_order"] == 2 and p["num_blocks"] == 5
        assert p["batch_size"] == 100 and p["epochs"] == 30
        assert p["steps_per_epoch"] == 48 and p["learning_rate"] == 1e-3


class TestFitPredict:
    def test_learns_and_scores(self, panel_data):
        topo, X, y = panel_data
        clf = quick_clf(topo).fit(X, y)
        assert clf.score(X, y) >= 0.9
        proba = clf.predict_proba(X[:10])
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(proba > 0)
        assert clf.influence_.shape == (topo.n,)

    def test_string_labels(self, panel_data):
        topo, X, y = panel_data
        names = np.where(y == 1, "unstable", "stable")
        clf = quick_clf(topo, epochs=1, steps_per_epoch=1).fit(X, names)
        preds = clf.predict(X[:5])
        assert set(preds) <= {0, 1}

    def test_validation_split(self, panel_data):
        topo, X, y = panel_data
        clf = quick_clf(topo, epochs=2, steps_per_epoch=2,
                        validation_fraction=0.25).fit(X, y)
        assert all(h.test_acc is not None for h in clf.history_)

    def test_topology_from_file(self, panel_data, tmp_path):
        topo, X, y = panel_data
        path = tmp_path / "topo.txt"
        save_topology(topo, path)
        clf = quick_clf(str(path), epochs=1, steps_per_epoch=1).fit(X, y)
        assert clf.config_.num_buses == topo.n

    def test_deterministic_by_seed(self, panel_data):
        topo, X, y = panel_data
        a = quick_clf(topo, epochs=2, steps_per_epoch=2).fit(X, y)
        b = quick_clf(topo, epochs=2, steps_per_epoch=2).fit(X, y)
        np.testing.assert_array_equal(a.predict_proba(X[:8]), b.predict_proba(X[:8]))


class TestValidationHelpers:
    def test_bad_panel_shape(self, panel_data):
        topo, X, y = panel_data
        with pytest.raises(ShapeMismatch):
            quick_clf(topo).fit(X[:, :2], y)

    def test_nonfinite_panel(self, panel_data):
        topo, X, y = panel_data
        bad = X[:4].copy()
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(StgcnError):
            quick_clf(topo).fit(bad, y[:4])

    def test_bad_labels(self, panel_data):
        topo, X, _ = panel_data
        with pytest.raises(StgcnError):
            quick_clf(topo).fit(X, np.full(X.shape[0], 7))

    def test_missing_topology(self, panel_data):
        _, X, y = panel_data
        with pytest.raises(StgcnError):
            STGCNClassifier(epochs=1, steps_per_epoch=1).fit(X, y)


class TestEcosystemComposition:
    def test_cross_val_score(self, panel_data):
        from sklearn.model_selection import cross_val_score

        topo, X, y = panel_data
        clf = quick_clf(topo, epochs=1, steps_per_epoch=2, batch_size=16)
        scores = cross_val_score(clf, X, y, cv=2)
        assert scores.shape == (2,)
        assert np.all((scores >= 0) & (scores <= 1))
