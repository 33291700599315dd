import numpy as np
import pytest
from sklearn.base import clone

from trimodal.errors import InvalidArgument
from trimodal.estimator import TriModalHazardClassifier, check_inputs
from trimodal.model import ModelConfig

SMALL = ModelConfig(frame_channels=1, n_mfcc=4, stem_channels=4, stem_kernel=4, stem_stride=4,
                    block_channels=(4, 4), block_strides=(2, 1), stage2_channels=6,
                    stage3_channels=8, audio_channels=(4, 6, 8, 6), latent_dim=3)


def xy(n=16, seed=0):
    gen = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = {"audio": gen.standard_normal((n, 4, 20)),
         "face": gen.uniform(0, 1, (n, 3, 1, 16, 16)) + y[:, None, None, None, None],
         "road": gen.uniform(0, 1, (n, 3, 1, 16, 16))}
    return X, y


def test_check_inputs():
    X, y = xy(4)
    out, yy = check_inputs(X, "V", y)
    assert set(out) == {"face"} and out["face"].dtype == np.float32
    bad = [({"face": X["face"][0]}, y), ({"face": X["face"]}, np.array([0, 1, 2, 0])),
           ({"face": X["face"]}, y[:3]), ({"face": np.full_like(X["face"], np.nan)}, y),
           ({"audio": X["audio"]}, y), ([X["face"]], y)]
    for Xb, yb in bad:
        with pytest.raises(InvalidArgument):
            check_inputs(Xb, "V", yb)
    with pytest.raises(InvalidArgument):
        check_inputs({"face": X["face"], "audio": X["audio"][:2]}, "A-V")


def test_fit_predict_and_clone():
    X, y = xy()
    clf = TriModalHazardClassifier(mask="V", model_config=SMALL, epochs=5, batch_size=8)
    assert clf.get_params()["mask"] == "V"
    clf.fit(X, y, *xy(8, seed=1))
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1, atol=1e-6)
    assert clf.predict(X).shape == (16,)
    assert clf.score(X, y) == 1.0
    loss, acc = clf.evaluate(X, y)
    assert acc == 1.0 and loss >= 0
    twin = clone(clf).fit(X, y, *xy(8, seed=1))
    np.testing.assert_array_equal(twin.decision_logits(X), clf.decision_logits(X))


def test_unfitted_raises():
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        TriModalHazardClassifier().predict(xy(2)[0])


def test_model_config_as_dict():
    X, y = xy(8)
    clf = TriModalHazardClassifier(mask="A", model_config=SMALL.to_dict(), epochs=1, batch_size=4,
                                   augment_config={"p_zero": 0.0})
    clf.fit(X, y)
    assert clf.model_.mask == ("A",)
