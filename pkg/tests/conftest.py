import pytest

from seqtta.datasets import Catalog, build_sequences, k_core_filter, leave_one_out_split
from seqtta.models import SequentialRecommender
from seqtta.synthetic import make_desk_interactions


@pytest.fixture(scope="session")
def tiny_split():
    rows = k_core_filter(make_desk_interactions(n_users=240, n_items=60, n_clusters=6,
                                                seed=5), 5)
    cat = Catalog.from_interactions(rows)
    return leave_one_out_split(build_sequences(rows, cat, 20), cat.num_items)


@pytest.fixture(scope="session")
def tiny_gru(tiny_split):
    return SequentialRecommender(encoder="gru", d=16, n_blocks=1, max_len=20, epochs=4,
                                 lr=0.01, batch_size=64).fit(tiny_split)


@pytest.fixture(scope="session")
def tiny_attention(tiny_split):
    return SequentialRecommender(encoder="attention", d=16, n_blocks=1, n_heads=2, max_len=20,
                                 epochs=4, lr=0.01, batch_size=64).fit(tiny_split)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.summary_lines():
        terminalreporter.write_line(line)
