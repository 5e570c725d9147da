import math

import numpy as np
import pytest
from scipy.special import erfc

from sdem.fields import FieldMeta, VectorFieldSet, _as_batch


def log_field_closed_form(x, beta=1.0):
    """Independent oracle for the log-modulus diffusion coefficient.

    Derived by the substitution y = exp(-u^2):
    int_0^t sqrt(-log y) dy = t sqrt(-log t) + (sqrt(pi)/2) erfc(sqrt(-log t)).
    """
    t = abs(x)
    if t == 0.0:
        inner = 0.0
    elif t >= 1.0:
        inner = math.sqrt(math.pi) / 2.0
    else:
        a = math.sqrt(-math.log(t))
        inner = t * a + math.sqrt(math.pi) / 2.0 * erfc(a)
    return 1.0 + math.copysign(math.sqrt(beta) * inner, x) if x != 0 else 1.0


def scalar_drift_field(f, df=None, name="scalar"):
    """Wrap a scalar function as the drift of a 1-d field set (unit noise)."""

    def A(l, x):
        pts, single = _as_batch(np.asarray(x, dtype=float), 1)
        out = np.asarray(f(pts[:, 0]), dtype=float)[:, None] if l == 0 else np.ones_like(pts)
        return out[0] if single else out.reshape(np.asarray(x).shape)

    DA = None
    if df is not None:
        def DA(l, x):
            pts, single = _as_batch(np.asarray(x, dtype=float), 1)
            v = np.asarray(df(pts[:, 0]), dtype=float) if l == 0 else np.zeros(pts.shape[0])
            out = v.reshape(-1, 1, 1)
            return out[0] if single else out.reshape(np.asarray(x).shape[:-1] + (1, 1))

    return VectorFieldSet(1, 1, A, DA, FieldMeta(theta=1.0), name=name)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260810)
