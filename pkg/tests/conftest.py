import numpy as np
import pytest

from mose.config import config_from_dict

TOY_DOC = {
    "in_channels": 4,
    "embed_dim": 16,
    "groups": 1,
    "blocks_per_group": 2,
    "scale": 2,
    "dtype": "f32",
    "attention": {"window_size": 8, "heads": 4, "pe_rpe": True,
                  "pe_logcpb": False, "pe_lepe": True},
    "moe": {"experts": 4, "active": 2},
    "loss": {"alpha": 1.0, "beta": 1.0, "gamma": 0.1},
}


def toy_doc(**overrides):
    doc = {k: (dict(v) if isinstance(v, dict) else v) for k, v in TOY_DOC.items()}
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(doc.get(key), dict):
            doc[key].update(val)
        else:
            doc[key] = val
    return doc


@pytest.fixture
def toy_config():
    return config_from_dict(toy_doc())


@pytest.fixture
def toy_config_f64():
    return config_from_dict(toy_doc(dtype="f64"))


def finite_diff_grad(f, x, eps=1e-6):
    """Dense central-difference gradient of scalar f at array x (in place probes)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
