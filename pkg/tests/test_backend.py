import os
import subprocess
import sys

from spdyn import _backend


def backend_name(env_value):
    env = dict(os.environ)
    env.pop("SPDYN_PURE_PYTHON", None)
    if env_value is not None:
        env["SPDYN_PURE_PYTHON"] = env_value
    out = subprocess.run([sys.executable, "-c", "import spdyn; print(spdyn.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    return out.stdout.strip()


def test_env_forces_python_fallback():
    assert backend_name("1") == "python"


def test_default_prefers_compiled():
    expect = "cython" if _backend.compiled is not None else "python"
    assert backend_name(None) == expect


def test_available_lists_fallback_last():
    names = [b.name for b in _backend.available()]
    assert names[-1] == "python"
