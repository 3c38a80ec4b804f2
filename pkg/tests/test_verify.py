import numpy as np

from udtsep.verify import THRESHOLDS, composite_checks, layer_checks


def test_thresholds():
    assert THRESHOLDS == {"double": 1e-6, "single": 1e-3}


def test_composite_loss_single_precision():
    errors = composite_checks(np.float32, np.random.default_rng(3), n_coords=2)
    assert max(errors.values()) < 1e-3
    assert "loss.shared.enc.conv.weight" in errors and "loss.input.M" in errors


def test_tampered_gradient_is_caught():
    errors = layer_checks(np.float64, np.random.default_rng(0), 1e-3, tamper=True)
    assert errors["softplus"] > 1e-2
    assert errors["mse"] < 1e-6
