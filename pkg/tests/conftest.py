import numpy as np
import pytest

from vgvae import autodiff as ad
from vgvae.model import ModelConfig, build_model


def directional_check(loss_fn, params, rng, h=1e-5):
    """Relative error between g . v and the central difference of f along v.

    ``loss_fn`` re-runs the forward pass (with frozen noise) and returns a float.
    Gradients must already be in ``p.grad``.
    """
    dirs = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float(np.sum((p.grad if p.grad is not None else 0.0) * d)) for p, d in zip(params, dirs))
    originals = [p.data.copy() for p in params]
    for p, d, o in zip(params, dirs, originals):
        p.data = o + h * d
    up = loss_fn()
    for p, d, o in zip(params, dirs, originals):
        p.data = o - h * d
    down = loss_fn()
    for p, o in zip(params, originals):
        p.data = o
    numeric = (up - down) / (2 * h)
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)


def pointwise_check(f, param, h=1e-5):
    """Max relative error of the analytic gradient in ``param.grad`` against central differences."""
    num = ad.numerical_grad(f, param, h)
    ana = param.grad if param.grad is not None else np.zeros_like(num)
    return float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8))


def tiny_config(**kw):
    base = dict(vocab_size=12, latent_dim_m=4, latent_dim_d=3, embed_dim=5, lstm_hidden=4,
                decoder_hidden=6, wpl_hidden=5, max_position=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=[("word_avg", "bow"), ("bilstm", "lstm")], ids=["bow", "lstm"])
def tiny_model(request):
    enc, dec = request.param
    return build_model(tiny_config(encoder_kind=enc, decoder_kind=dec), seed=7)


# acceptance-criterion lines, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
