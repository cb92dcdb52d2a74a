import shlex
import sys
import warnings

import numpy as np
import pytest

from vlk.labeling import assign_voxel_labels
from vlk.phantom import Centerline, CenterlineSet
from vlk.predictor import (ExternalPredictorError, NoisyOraclePredictor, NormalizationWarning, OraclePredictor,
                           Prediction, PredictorError, PredictorProtocolError, build_command, channel_path,
                           noisy_oracle_predict, oracle_predict, pulled_back_labels, read_prediction,
                           subprocess_predict, write_prediction, SubprocessPredictor)
from vlk.transforms import apply_forward, sample_tta_transform
from vlk.volume import Volume, VolumeError, read_volume, write_volume

PY = shlex.quote(sys.executable)


def test_oracle_is_labeling(cow64):
    seg, cl, _, gt = cow64
    p = oracle_predict(seg, cl)
    assert p.labels() == gt
    assert np.all(p.probabilities.sum(-1) == 1.0)
    assert OraclePredictor(cl)(seg).labels() == gt


def test_oracle_empty_centerlines():
    seg = Volume(np.ones((3, 3, 3), np.uint8))
    p = oracle_predict(seg, CenterlineSet())
    assert np.all(p.probabilities[..., 10] == 1.0)


def test_prediction_validation():
    with pytest.raises(VolumeError):
        Prediction(np.zeros((2, 2, 2, 11), np.float32))
    with pytest.raises(VolumeError):
        Prediction(np.zeros((2, 2, 2, 3), np.float32))
    p = np.zeros((1, 1, 1, 11), np.float32)
    p[..., 2] = p[..., 5] = 0.5
    assert Prediction(p).labels().data[0, 0, 0] == 2


def test_noisy_zero_is_oracle(cow64):
    seg, cl, _, gt = cow64
    assert noisy_oracle_predict(seg, cl, 0.0, 3).labels() == gt


def test_noisy_flip_rate_statistics():
    seg = Volume(np.ones((24, 24, 24), np.uint8))
    cl = CenterlineSet([Centerline(2, [[x, 12.0, 12.0] for x in np.arange(0, 24, 0.5)])])
    clean = assign_voxel_labels(seg, cl).data
    noisy = noisy_oracle_predict(seg, cl, 0.1, 99).labels().data
    n = clean.size
    rate = np.count_nonzero(noisy != clean) / n
    p = 0.1 * 0.9
    assert abs(rate - p) < 3 * np.sqrt(p * (1 - p) / n)
    assert noisy_oracle_predict(seg, cl, 0.1, 99).labels().data.tobytes() == noisy.tobytes()
    assert np.all(noisy >= 1)


def test_noisy_rejects_bad_rate(cow64):
    seg, cl, _, _ = cow64
    with pytest.raises(ValueError):
        noisy_oracle_predict(seg, cl, 1.0, 0)
    with pytest.raises(ValueError):
        NoisyOraclePredictor(cl, -0.1, 0)


def test_pulled_back_oracle_is_equivariant(cow64):
    seg, cl, _, gt = cow64
    for i in range(3):
        t = sample_tta_transform(5, i)
        assert pulled_back_labels(apply_forward(seg, t), cl, t) == apply_forward(gt, t)
        assert OraclePredictor(cl).transformed(t)(apply_forward(seg, t)).labels() == apply_forward(gt, t)


def test_noisy_transformed_copies_differ(cow64):
    seg, cl, _, _ = cow64
    base = NoisyOraclePredictor(cl, 0.2, 1)
    t = sample_tta_transform(0, 0)
    a = base.transformed(t, seg.dims, 0)(seg).labels()
    b = base.transformed(t, seg.dims, 1)(seg).labels()
    assert a != b


def test_channel_files_roundtrip(tmp_path, cow64):
    seg, cl, _, _ = cow64
    p = oracle_predict(seg, cl)
    write_prediction(p, tmp_path / "out")
    assert channel_path(tmp_path / "out", 10).name == "out.c10"
    q = read_prediction(tmp_path / "out", seg.dims)
    assert np.array_equal(q.probabilities, p.probabilities)


def test_renormalization_window(tmp_path):
    probs = np.full((2, 2, 2, 11), 1 / 11, np.float32)
    write_prediction(Prediction(probs), tmp_path / "p")
    c0 = read_volume(channel_path(tmp_path / "p", 0))
    write_volume(c0.with_data(c0.data + np.float32(5e-4)), channel_path(tmp_path / "p", 0))
    with pytest.warns(NormalizationWarning):
        q = read_prediction(tmp_path / "p")
    assert np.allclose(q.probabilities.sum(-1), 1.0, atol=1e-6)
    write_volume(c0.with_data(c0.data + np.float32(0.01)), channel_path(tmp_path / "p", 0))
    with pytest.raises(PredictorProtocolError, match="sum to 1"):
        read_prediction(tmp_path / "p")


def test_build_command():
    assert build_command("run --x {in} -o {out}", "a b", "c") == ["run", "--x", "a b", "-o", "c"]
    with pytest.raises(PredictorError):
        build_command("run {in}", "a", "b")


@pytest.fixture
def precomputed(tmp_path, cow64):
    seg, cl, _, gt = cow64
    write_prediction(oracle_predict(seg, cl), tmp_path / "oracle")
    write_volume(seg, tmp_path / "seg")
    return tmp_path, seg, gt


def test_subprocess_passthrough(precomputed):
    tmp, seg, gt = precomputed
    tmpl = f"{PY} -m vlk.mock_predictor --source {tmp / 'oracle'} {{in}} {{out}}"
    p = subprocess_predict(tmp / "seg", tmpl, tmp / "pred")
    assert p.labels() == gt
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert SubprocessPredictor(tmpl, scratch_dir=tmp)(seg).labels() == gt


def test_subprocess_failure(precomputed):
    tmp, _, _ = precomputed
    tmpl = f"{PY} -m vlk.mock_predictor --source {tmp / 'oracle'} --fail 1 {{in}} {{out}}"
    with pytest.raises(ExternalPredictorError) as info:
        subprocess_predict(tmp / "seg", tmpl, tmp / "pred")
    assert info.value.returncode == 1
    assert "asked to fail" in info.value.stderr


def test_subprocess_missing_channel(precomputed):
    tmp, _, _ = precomputed
    tmpl = f"{PY} -m vlk.mock_predictor --source {tmp / 'oracle'} --drop-channel 10 {{in}} {{out}}"
    with pytest.raises(PredictorProtocolError, match=r"channel 10.*pred\.c10"):
        subprocess_predict(tmp / "seg", tmpl, tmp / "pred")


def test_subprocess_missing_program(precomputed):
    tmp, _, _ = precomputed
    with pytest.raises(ExternalPredictorError):
        subprocess_predict(tmp / "seg", "/nonexistent/predictor {in} {out}", tmp / "pred")
