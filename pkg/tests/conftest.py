import numpy as np
import pytest
import torch

from morphbc.config import D_RAW, ModelConfig
from morphbc import encoder as enc
from morphbc import tokenizer as tk
from morphbc.model import MetaModel

torch.set_num_threads(2)


def make_gen(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def synth_frame(J, extra_dim, rng, dtype=np.float32):
    tokens = rng.uniform(-1, 1, (J, D_RAW)).astype(dtype)
    types = rng.integers(0, 3, J)
    mask = np.ones((J, D_RAW), dtype=bool)
    extra = rng.uniform(-1, 1, extra_dim).astype(dtype) if extra_dim else None
    return tk.StateFrame(tokens=tokens, types=types, presence_mask=mask,
                         extrasensory=extra)


def tiny_model(width=16, layers=2, heads=2, window=10, history=10, rank=4,
               seed=0, dtype=torch.float32, **kw):
    cfg = ModelConfig(width=width, layers=layers, heads=heads, window=window,
                      history=history, rank=rank, **kw)
    return MetaModel(cfg, seed=seed, dtype=dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
