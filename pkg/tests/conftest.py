import numpy as np
import pytest

from twist import model as M
from twist.blueprint import round_blueprints
from twist.config import ModelConfig
from twist.partition import scatter, updates_from_store
from twist.tensor import Rng, Tensor

ROOT_CORPUS = __import__("pathlib").Path(__file__).resolve().parents[1] / "data" / "shakespeare.txt"


def tiny_config(**kw) -> ModelConfig:
    base = dict(L=4, d_model=32, H=4, d_head=8, d_inner=64, R=4, vocab=40, context=32,
                shared_layers=(0, 3))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def small_text(tmp_path):
    """First ~60 KB of the bundled corpus, as its own file."""
    text = ROOT_CORPUS.read_text()[:60_000]
    p = tmp_path / "small.txt"
    p.write_text(text)
    return p


def rel_err(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def random_round(config, seed, S=3, ratio="1/2"):
    """Worker updates filled with noise, laid out by a real round of blueprints."""
    central = M.init_params(config, Rng(seed))
    bps = round_blueprints(config, S, ratio, "both", np.random.default_rng(seed))
    payloads, _ = scatter(central, bps, "physical")
    rng = np.random.default_rng(seed + 100)
    updates = []
    for p in payloads:
        noisy = M.ParameterStore(p.store.config, {
            n: Tensor(rng.standard_normal(t.shape).astype(np.float32)) for n, t in p.store.items()})
        updates.append(updates_from_store(config, p.spec, noisy, p.worker, physical=True))
    return central, bps, updates


def brute_force_mean(central, updates):
    """Scalar-by-scalar reference: list every reported value per element, then average."""
    seen = {n: np.empty(t.shape, dtype=object) for n, t in central.items()}
    for n, arr in seen.items():
        for ix in np.ndindex(arr.shape):
            arr[ix] = []
    for u in updates:
        for (n, key), v in u.values.items():
            if key is None:
                idx_lists = [range(s) for s in central[n].shape]
            else:
                axis, pick = key
                idx_lists = [range(s) for s in central[n].shape]
                idx_lists[axis] = pick
            for ix in np.ndindex(*[len(r) for r in idx_lists]):
                target = tuple(idx_lists[d][ix[d]] for d in range(len(ix)))
                seen[n][target].append(float(v[ix]))
    return {n: np.vectorize(lambda xs: sum(xs) / len(xs))(arr) for n, arr in seen.items()}


# acceptance criteria report: filled by test_acceptance, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_acceptance(key: str, passed: bool, detail: str) -> None:
    ACCEPTANCE[key] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split(".")[0].rstrip("abc")), k)):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
