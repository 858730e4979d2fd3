import pytest

from soundloc.data import load_manifest
from soundloc.encoders import EncoderConfig, ToyModel, save_checkpoint
from soundloc.synth import SyntheticSceneSpec, synth


@pytest.fixture(scope="session")
def quad_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("quad")
    synth(SyntheticSceneSpec(kind="quadrants", n=6, seed=3), out)
    return out


@pytest.fixture(scope="session")
def quad_records(quad_dir):
    return load_manifest(quad_dir / "manifest.jsonl")


@pytest.fixture(scope="session")
def conv_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "conv.ckpt"
    save_checkpoint(ToyModel(EncoderConfig(arch="conv", seed=1)), path)
    return path


@pytest.fixture(scope="session")
def vit_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "vit.ckpt"
    save_checkpoint(ToyModel(EncoderConfig(arch="vit", seed=1)), path)
    return path
