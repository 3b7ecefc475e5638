import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from bracket_restore.network import ModelConfig  # noqa: E402
from bracket_restore.synth import DegradationParams, make_dataset  # noqa: E402
from bracket_restore.training import TrainConfig  # noqa: E402

TINY_MODEL = ModelConfig(channels=4, n_extract_blocks=1, n_agg_blocks=1, n_recon_blocks=1,
                         deformable_groups=2, seed=3)


def tiny_config(**kw) -> TrainConfig:
    base = dict(patch_size=12, batch_size=2, base_lr=1e-3, total_steps=6, val_every=3, seed=5,
                flow="oracle", model=TINY_MODEL)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """10 scenes (9 train / 1 val) of 16x16 packed pixels."""
    out = tmp_path_factory.mktemp("tiny_data")
    return make_dataset(10, (16, 16), DegradationParams(), 11, out)
