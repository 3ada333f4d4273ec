import math
import os

import numpy as np
import pytest
import torch

from customttt.lora import LoraAdapter, LoraEntry, attention_targets
from customttt.model import DenoiserConfig, build_denoiser
from customttt.pipeline import LabConfig, pretrained_base, train_held_out_adapters

torch.set_num_threads(int(os.environ.get("CUSTOMTTT_THREADS", "1")))

TINY = DenoiserConfig(frames=4, height=8, width=8, base_width=8, embed_dim=8, time_embed_dim=8)


def randomized(model, seed=0, scale=0.3):
    """Copy of ``model`` with every weight (including the zero-initialised ones) perturbed."""
    gen = torch.Generator().manual_seed(seed)
    m = model.clone()
    for k, v in m.params.items():
        v.add_(scale * torch.randn(v.shape, generator=gen, dtype=torch.float64).to(v.dtype) / math.sqrt(max(v.shape[0], 1)))
    return m


def random_adapter(model, layers, module_kind, rank=2, seed=0, std=0.1, kind=None):
    """Adapter with both factors random, so gradients reach A and B."""
    gen = torch.Generator().manual_seed(seed)
    entries = []
    for t in attention_targets(model, layers, module_kind):
        m, n = model.params[t.key].shape
        A = torch.randn((m, rank), generator=gen, dtype=torch.float64) * std
        B = torch.randn((rank, n), generator=gen, dtype=torch.float64) * std
        entries.append(LoraEntry(t, A.to(model.dtype), B.to(model.dtype)))
    kind = kind or ("appearance" if module_kind == "spatial" else "motion")
    return LoraAdapter(entries, rank, kind, f"rand{seed}")


def rel_err(a, b):
    a, b = float(a), float(b)
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def central_difference(f, tensor, index, h=1e-4):
    """d f / d tensor[index] by central differences; ``f`` returns a float."""
    orig = tensor[index].item()

    def at(value):
        with torch.no_grad():
            tensor[index] = value
        return f()

    up, down = at(orig + h), at(orig - h)
    with torch.no_grad():
        tensor[index] = orig
    return (up - down) / (2 * h)


@pytest.fixture(scope="session")
def tiny64():
    return randomized(build_denoiser(TINY, seed=3, dtype=torch.float64), seed=4)


@pytest.fixture(scope="session")
def tiny32():
    return build_denoiser(TINY, seed=5)


@pytest.fixture(scope="session")
def lab_cfg():
    return LabConfig()


@pytest.fixture(scope="session")
def base(lab_cfg):
    """Pretrained base on the default corpus (cached on disk after the first build)."""
    return pretrained_base(lab_cfg)


@pytest.fixture(scope="session")
def held_out_adapters(base, lab_cfg):
    return train_held_out_adapters(base, lab_cfg)


def pytest_collection_modifyitems(items):
    for item in items:
        if "base" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
