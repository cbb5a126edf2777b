import os
import subprocess
import sys

import numpy as np
import pytest

from fedhkd import _kernels as K


@pytest.fixture
def arrays():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(17, 6))
    return {
        "x": x,
        "scale": rng.normal(size=6),
        "shift": rng.normal(size=6),
        "dout": rng.normal(size=(17, 6)),
        "z": rng.normal(scale=30, size=(9, 5)),
        "p": rng.normal(size=(4, 7)),
        "g": rng.normal(size=(4, 7)),
        "m": rng.normal(size=(4, 7)),
        "v": rng.uniform(size=(4, 7)),
        "stack": rng.normal(size=(5, 3, 4)),
        "w": rng.dirichlet(np.ones(5)),
        "labels": rng.integers(0, 4, size=17),
    }


def test_softmax_parity(arrays):
    for inv_t in (1.0, 2.0, 0.05):
        np.testing.assert_allclose(K.softmax_rows_nb(arrays["z"], inv_t),
                                   K.softmax_rows_np(arrays["z"], inv_t), rtol=1e-12, atol=1e-300)


def test_batchnorm_parity(arrays):
    a = K.bn_forward_np(arrays["x"], arrays["scale"], arrays["shift"], 1e-5)
    b = K.bn_forward_nb(arrays["x"], arrays["scale"], arrays["shift"], 1e-5)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)
    xhat, inv_std = a[1], a[4]
    for u, v in zip(K.bn_backward_np(arrays["dout"], xhat, arrays["scale"], inv_std),
                    K.bn_backward_nb(arrays["dout"], xhat, arrays["scale"], inv_std)):
        np.testing.assert_allclose(u, v, rtol=1e-12, atol=1e-12)


def test_adam_parity(arrays):
    outs = []
    for fn in (K.adam_update_np, K.adam_update_nb):
        p, m, v = arrays["p"].copy(), arrays["m"].copy(), arrays["v"].copy()
        fn(p, arrays["g"], m, v, 1e-2, 0.5, 0.999, 1e-8, 0.75, 0.002)
        outs.append((p, m, v))
    for u, w in zip(*outs):
        np.testing.assert_allclose(u, w, rtol=1e-13, atol=1e-15)


def test_weighted_sum_and_class_sums_parity(arrays):
    np.testing.assert_allclose(K.weighted_sum_nb(arrays["stack"], arrays["w"]),
                               K.weighted_sum_np(arrays["stack"], arrays["w"]), rtol=1e-13)
    s_np, c_np = K.class_sums_np(arrays["x"], arrays["labels"], 5)
    s_nb, c_nb = K.class_sums_nb(arrays["x"], arrays["labels"], 5)
    np.testing.assert_allclose(s_nb, s_np, rtol=1e-13, atol=1e-13)
    np.testing.assert_array_equal(c_nb, c_np)
    assert c_np[4] == 0 and not s_np[4].any()


def test_env_flag_selects_numpy_backend():
    code = "import fedhkd, fedhkd._kernels as K; print(fedhkd.BACKEND, K.softmax_rows is K.softmax_rows_np)"
    env = dict(os.environ, FEDHKD_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True).stdout.split()
    assert out == ["numpy", "True"]
