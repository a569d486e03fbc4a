import numpy as np
import pytest

from faircand.clicklog import GroupLog, InteractionLog
from faircand import corpus

FIXTURE_DIR = __import__("pathlib").Path(__file__).resolve().parent.parent / "fixtures"


def make_log(records, groups=("g",), t_max=None, fingerprint="test", query_ids=None):
    """Hand-built interaction log from explicit per-request (p, c) slot lists.

    ``records`` is a list of dicts mapping group -> [(propensity, click), ...].
    """
    m = len(records)
    per_group = {}
    for g in groups:
        width = max([len(r.get(g, ())) for r in records] + [1])
        prop = np.full((m, width), np.inf)
        click = np.zeros((m, width), dtype=np.int8)
        items = np.full((m, width), -1, dtype=np.int32)
        length = np.zeros(m, dtype=np.int64)
        for i, rec in enumerate(records):
            slots = rec.get(g, ())
            length[i] = len(slots)
            for j, (p, c) in enumerate(slots):
                prop[i, j] = p
                click[i, j] = c
                items[i, j] = j
        per_group[g] = GroupLog(item_idx=items, propensity=prop, click=click, length=length)
    if t_max is None:
        t_max = {g: int(per_group[g].click.shape[1]) for g in groups}
    elif not isinstance(t_max, dict):
        t_max = {g: int(t_max) for g in groups}
    qids = np.arange(m, dtype=np.int64) if query_ids is None else np.asarray(query_ids)
    return InteractionLog(
        query_ids=qids,
        groups=tuple(groups),
        per_group=per_group,
        t_max=t_max,
        ranking_fingerprint=fingerprint,
    )


class StubBoundTable:
    """Fixed per-threshold bounds for exercising the selection rules."""

    def __init__(self, lowers, uppers=None, expect_alpha=None):
        self.lowers = lowers
        self.uppers = uppers or {}
        self.expect_alpha = expect_alpha
        self.calls = []

    def lower(self, group, t, alpha):
        if self.expect_alpha is not None:
            assert alpha == pytest.approx(self.expect_alpha)
        self.calls.append((group, t, alpha))
        return self.lowers[t]

    def upper(self, group, t, alpha):
        return self.uppers[t]


@pytest.fixture(scope="session")
def toy_text():
    return (FIXTURE_DIR / "toy.letor").read_text()


@pytest.fixture(scope="session")
def toy_dataset(toy_text):
    ds = corpus.parse_letor(toy_text)
    ds = corpus.binarize(ds)
    return corpus.assign_groups(ds, feature_index=3)
