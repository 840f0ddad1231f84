import pytest

from genbayes import engine, nn


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: large-sample or long training runs")
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


@pytest.fixture(scope="session")
def conjugate_map():
    """Inverse map trained on 10^5 draws of theta ~ N(0,1), y | theta ~ N(theta, 1)."""
    table = engine.build_sim_table(engine.ConjugateSimulator(), 100_000, seed=1)
    config = nn.TrainConfig(learning_rate=2e-3, batch_size=256, epochs=20, seed=2, lr_final_frac=0.02)
    return engine.train_inverse_map(table, engine.ArchConfig(), config)
