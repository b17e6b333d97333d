import pytest

from meshrir import gan, shoebox, training

TINY = dict(gen_channels=(8, 8, 8, 8, 8), disc_channels=(4, 4), cond_channels=2,
            encoder_hidden=8, encoder_stages=2)


def tiny_config(**overrides):
    base = dict(batch_size=8, epochs=2, checkpoint_every=1, model=gan.ModelConfig(**TINY))
    base.update(overrides)
    return training.TrainingConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Two scenes, four IRs each, low image order so it builds in about a second."""
    out = tmp_path_factory.mktemp("corpus")
    return shoebox.build_dataset(2, 4, 11, out, max_order=6)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split("]")[1].split(".")[0])):
        terminalreporter.write_line(line)
