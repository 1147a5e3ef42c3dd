import sys

import numpy as np
import pytest

from samovar.attn_stack import Model, StackConfig


def make_model(variant="samovar", *, C=2, L_I=4, L_P=1, d=8, H=2, l=2, seed=0, perturb=0.3, **kw):
    """Small float64 model with dropout off.

    ``perturb`` adds noise to every parameter so that zero-initialised
    embeddings and unit gains take generic values in oracle tests.
    """
    cfg = StackConfig(variant=variant, C=C, L_I=L_I, L_P=L_P, d=d, H=H, l=l, dropout=0.0,
                      dtype="float64", **kw)
    model = Model(cfg, seed=seed)
    if perturb:
        rng = np.random.default_rng(seed + 1000)
        for name, t in model.w.items():
            t.data += perturb * rng.standard_normal(t.shape)
    return model


@pytest.fixture
def small_model():
    return make_model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, (status, detail) in sorted(results.items()):
        terminalreporter.write_line(f"criterion {n:2d}: {status:8s} {detail}")
