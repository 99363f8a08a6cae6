import os
import subprocess
import sys

import pytest

from histoexpr.kernels import BACKEND, BACKENDS, get_backend


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    env.pop("HISTOEXPR_PURE_PYTHON", None)
    if env_value is not None:
        env["HISTOEXPR_PURE_PYTHON"] = env_value
    out = subprocess.run([sys.executable, "-c", "from histoexpr.kernels import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_env_forces_python():
    assert _backend_in_subprocess("1") == "python"


def test_default_prefers_compiled():
    expected = "cython" if "cython" in BACKENDS else "python"
    assert _backend_in_subprocess(None) == expected


def test_get_backend():
    assert get_backend() is BACKENDS[BACKEND]
    assert get_backend("python").__name__.endswith("_pykernels")
    with pytest.raises(ValueError, match="unavailable"):
        get_backend("fortran")


@pytest.mark.parametrize("name", ["ward_linkage", "es_from_positions"])
def test_same_interface(name):
    for mod in BACKENDS.values():
        assert callable(getattr(mod, name))
