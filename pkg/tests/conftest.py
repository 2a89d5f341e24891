import numpy as np
import pytest

from ssfa_lab.model import ArchConfig, init_model


def tiny_model(task="rot", n_classes=3, seed=0, side=4, widths=(6, 5), shared_count=1, embed_dim=4,
               bias_scale=0.0):
    """Small model on side x side glyphs; nonzero biases keep ReLUs off their kinks."""
    arch = ArchConfig(input_dim=side * side, widths=widths, n_classes=n_classes, aux_task=task,
                      embed_dim=embed_dim, shared_count=shared_count)
    params = init_model(arch, seed)
    if bias_scale:
        rng = np.random.default_rng([seed, 99])
        for layer in params.encoder + [h for h in (params.main_head, params.aux_head) if h]:
            layer.b.data = np.abs(rng.normal(scale=bias_scale, size=layer.b.shape))
    return params


def tiny_batch(n, side=4, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, side, side))


@pytest.fixture
def tiny():
    return tiny_model


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
