import numpy as np
import pytest

from headlab import tensor as T
from headlab.corpus import TASKS, build_vocab, label_inventory, load_grammar, synth_generate
from headlab.encoder import EncoderConfig
from headlab.model import MultiTaskModel

TINY = {"layers": 2, "heads": 4, "d_model": 32, "ffn": 64, "max_len": 48}


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-6)


def fd_check(loss_fn, params, rng, coords=20, h=1e-5, richardson=False):
    """Worst relative error between analytic and central-difference gradients.

    ``richardson`` combines steps h and h/2 into a fourth-order estimate, which
    allows a larger h and so far less roundoff on tiny gradients.
    """
    grads = T.grad(loss_fn(), params)
    worst = 0.0

    def central(p, idx, old, step):
        p.data[idx] = old + step
        up = loss_fn().item()
        p.data[idx] = old - step
        down = loss_fn().item()
        p.data[idx] = old
        return (up - down) / (2 * step)

    for _ in range(coords):
        k = int(rng.integers(len(params)))
        p, g = params[k], grads[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p.data[idx]
        est = central(p, idx, old, h)
        if richardson:
            est = (4 * central(p, idx, old, h / 2) - est) / 3
        worst = max(worst, rel_err(est, g[idx]))
    return worst


@pytest.fixture(scope="session")
def corpus():
    return synth_generate(load_grammar(None), 40, 3)


@pytest.fixture()
def tiny_model(corpus):
    cfg = EncoderConfig(dropout=0.0, word_dropout=0.0, **TINY)
    m = MultiTaskModel(build_vocab(corpus), cfg, {t: label_inventory(corpus, t) for t in TASKS}, TASKS, seed=5)
    m.gating = True
    return m
