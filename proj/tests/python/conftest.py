import json
import os
import shutil

import pytest

import safeclip


def tiny_config(**overrides):
    """Smoke preset shrunk to run in about a second."""
    c = safeclip.preset("smoke")
    c["name"] = "tiny"
    c["corpus"].update(n_pairs=600, class_count=4, vocab_size=40)
    c["model"].update(hidden=16, embed_dim=8, d=8)
    c["train"].update(pool_capacity=64, batch_size=32, gmm_threshold=0.5)
    c["eval"].update(zero_shot_per_class=10, probe_train_per_class=8, probe_test_per_class=8, asr_per_class=4)
    for k, v in overrides.items():
        c[k] = v
    return c


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def cli():
    path = os.environ.get("SAFECLIP_CLI") or shutil.which("safeclip")
    if not path:
        pytest.skip("safeclip CLI not built")
    return path


@pytest.fixture
def write_json(tmp_path):
    def write(obj, name="config.json"):
        p = tmp_path / name
        p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
        return p

    return write
