import numpy as np
import pytest

from ret2 import tensor as T
from ret2.cell import CellConfig, FusionCellParams
from ret2.features import CorpusRecord, LayerFeatures, Modality
from ret2.synth import SynthConfig, synth_corpus


def random_features(rng, modality, S=3, N=4, d_b=16, d_g=8):
    return LayerFeatures(Modality(modality), rng.normal(size=(S, N, d_b)), rng.normal(size=d_g))


def random_record(rng, rid="r", text=True, visual=True, S=3, N=(4, 4), dims=(16, 16), d_g=8):
    t = random_features(rng, "text", S, N[0], dims[0], d_g) if text else LayerFeatures.absent()
    v = random_features(rng, "visual", S, N[1], dims[1], d_g) if visual else LayerFeatures.absent()
    return CorpusRecord(rid, t, v)


def small_config(mode="ret2", d=32, n_heads=4, dims=(16, 16), d_g=8, **kw):
    return CellConfig(mode=mode, hidden_dim=d, n_heads=n_heads, text_dim=dims[0],
                      visual_dim=dims[1], pooler_dim=d_g, **kw).validate()


def randomize(params, rng, std=0.3):
    """Replace every tensor by a larger random draw so no term is negligible."""
    for name, t in params:
        t.data[...] = rng.normal(0.0, std, size=t.shape)
        if name.endswith("gain"):
            t.data[...] += 1.0
    return params


def central_fd(f, arrays, step=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + step
            fp = f()
            arr[idx] = old - step
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-12):
    """Norm-relative error; ``floor`` keeps structurally zero gradients from
    turning finite-difference noise into a relative error of 1."""
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture
def params(cfg, rng):
    return randomize(FusionCellParams.init(cfg, seed=0), rng)


@pytest.fixture(scope="session")
def toy_corpus():
    return synth_corpus(SynthConfig(), seed=0)


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_corpus(SynthConfig(num_entities=16, queries_per_entity=3, n_text_tokens=3,
                                    n_visual_tokens=2, text_dim=8, visual_dim=8, pooler_dim=8,
                                    latent_dim=4), seed=0)


def loss_of(fn):
    with T.no_grad():
        return float(fn().data)


# -- acceptance reporting ------------------------------------------------
# Tests marked ``criterion(n, title)`` contribute to one summary line per
# criterion; details come from ``record_property("detail", ...)``.

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "details": []})
    entry["ok"] &= rep.passed
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        detail = (detail + "; " if detail else "") + "FAILED in " + item.name
    if detail:
        entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {e['title']}: "
                                    + " | ".join(e["details"]))
