import numpy as np
import pytest

from obft import backend


@pytest.mark.skipif(not backend.compiled_available(), reason="compiled kernel not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_and_python_backends_agree_bitwise(dtype):
    g = np.random.default_rng(0)
    for m, k, n in [(1, 1, 1), (3, 4, 2), (17, 9, 31), (64, 64, 64), (5, 0, 7), (128, 128, 128)]:
        a = g.standard_normal((m, k)).astype(dtype)
        b = g.standard_normal((k, n)).astype(dtype)
        out_c = np.zeros((m, n), dtype=dtype)
        out_p = np.zeros((m, n), dtype=dtype)
        backend.matmul_into_compiled(a, b, out_c)
        backend.matmul_into_python(a, b, out_p)
        assert out_c.tobytes() == out_p.tobytes()


@pytest.mark.skipif(not backend.compiled_available(), reason="compiled kernel not built")
def test_backends_agree_on_adversarial_values():
    # mixed magnitudes provoke different roundings if either side fuses or reorders
    g = np.random.default_rng(1)
    a = (g.standard_normal((32, 48)) * np.logspace(-18, 18, 48)).astype(np.float32)
    b = (g.standard_normal((48, 24)) * np.logspace(12, -12, 24)).astype(np.float32)
    out_c = np.zeros((32, 24), dtype=np.float32)
    out_p = np.zeros((32, 24), dtype=np.float32)
    backend.matmul_into_compiled(a, b, out_c)
    backend.matmul_into_python(a, b, out_p)
    assert out_c.tobytes() == out_p.tobytes()


def test_backend_name_is_reported():
    assert backend.backend_name() in ("compiled", "python")
