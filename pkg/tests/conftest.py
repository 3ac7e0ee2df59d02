import io
import sys

import numpy as np
import pytest

from herec.hin import NetworkSchema, RatingDataset, RatingRecord, _GraphBuilder

MOVIE_TYPES = ["U", "M", "D", "A", "T", "G"]
MOVIE_RELATIONS = [("U", "M"), ("U", "U"), ("U", "G"), ("M", "D"), ("M", "A"), ("M", "T")]


@pytest.fixture
def movie_schema():
    return NetworkSchema(MOVIE_TYPES, MOVIE_RELATIONS)


def make_graph(schema, nodes: dict, edges):
    b = _GraphBuilder(schema)
    for v, t in nodes.items():
        b.add_node(v, t)
    for a, c in edges:
        b.add_edge(a, c)
    return b.build()


def tsv(rows) -> io.StringIO:
    return io.StringIO("".join("\t".join(map(str, r)) + "\n" for r in rows))


def random_ratings(rng, n_users, n_items, n, scale=(1.0, 5.0)):
    flat = rng.choice(n_users * n_items, size=n, replace=False)
    u, i = np.divmod(flat, n_items)
    vals = rng.integers(int(scale[0]), int(scale[1]) + 1, size=n).astype(float)
    return RatingDataset([RatingRecord(f"u{a}", f"i{b}", float(r)) for a, b, r in zip(u, i, vals)], scale)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
