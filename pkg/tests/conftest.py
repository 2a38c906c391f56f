import os

import numpy as np
import pytest

from fieldctr.data import FieldSchema, FieldSpec



def make_schema(*names, kinds=None):
    kinds = kinds or ["categorical"] * len(names)
    return FieldSchema(tuple(FieldSpec(n, k, f"description of {n}") for n, k in zip(names, kinds)))


def write_table(path, header, rows, delim=","):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(delim.join(header) + "\n")
        for r in rows:
            fh.write(delim.join(str(c) for c in r) + "\n")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_table(tmp_path):
    """Twelve interactions over user/item/price with increasing timestamps."""
    schema = make_schema("user", "item", "price", kinds=["categorical", "categorical", "numeric"])
    rows = []
    for i in range(12):
        rows.append((f"u{i % 3}", f"i{i % 4}", 1.5 + i, [5, 2, 4, 1][i % 4], 1000 + i))
    path = write_table(tmp_path / "t.csv", ["user", "item", "price", "rating", "timestamp"], rows)
    return schema, path


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
