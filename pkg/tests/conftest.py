import numpy as np
import pytest

from dualprune.tensor_io import TokenBatch


def make_batch(keys, values, text_queries=None, n_text=1, rotary=False, hidden=None, image_queries=None):
    """Batch from image keys/values ([H, n_img, .] or [n_img, .]).

    Text tokens get zero keys and unit values; queries default to zero.
    """
    keys = np.asarray(keys, dtype=float)
    values = np.asarray(values, dtype=float)
    squeeze = keys.ndim == 2
    if squeeze:
        keys, values = keys[None], values[None]
    H, n_img, d = keys.shape
    dv = values.shape[2]
    if text_queries is not None:
        text_queries = np.asarray(text_queries, dtype=float)
        if squeeze:
            text_queries = text_queries[None]
        n_text = text_queries.shape[1]
    else:
        text_queries = np.zeros((H, n_text, d))
    if image_queries is None:
        image_queries = np.zeros((H, n_img, d))
    elif squeeze:
        image_queries = np.asarray(image_queries, dtype=float)[None]
    K = np.concatenate([keys, np.zeros((H, n_text, d))], axis=1)
    V = np.concatenate([values, np.ones((H, n_text, dv))], axis=1)
    Q = np.concatenate([image_queries, text_queries], axis=1)
    return TokenBatch(
        queries=Q, keys=K, values=V, n_img=n_img, n_text=n_text,
        positions=np.arange(n_img + n_text), rotary=rotary, hidden=hidden,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
