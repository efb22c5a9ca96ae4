import numpy as np
import pytest

from sphereboost import data, trainer
from sphereboost.margin import MarginParams
from sphereboost.optim import SgdConfig


@pytest.fixture(scope="session")
def tiny_dataset():
    """10 classes (8 train / 2 eval), 24 samples per class, 16-d inputs."""
    return data.generate(data.GenConfig(
        num_classes=10, samples_per_class=24, input_dim=16,
        easy_fraction=0.75, easy_noise=0.15, hard_noise=0.8, seed=5,
    ))


def tiny_train_config(**overrides):
    base = dict(
        variant="V1", rounds=2, epochs_per_round=4, batch_size=32,
        seed=7, hidden_width=16, num_hidden=2, embed_dim=8,
        sgd=SgdConfig(learning_rate=0.1, momentum=0.9, weight_decay=1e-4,
                      lr_drop_epochs=(2,), lr_drop_factor=10.0),
        margin=MarginParams(m_s=1.0, m_a=0.0, m_c=0.35, base_scale=20.0),
        finetune_epochs=4,
    )
    base.update(overrides)
    return trainer.TrainConfig(**base)


def random_unit_rows(rng, n, dim):
    m = rng.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)
