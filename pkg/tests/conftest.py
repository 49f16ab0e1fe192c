import pytest
import torch

from fusecast.config import ModelConfig
from fusecast.nets import ForecastModel

torch.set_num_threads(1)


def tiny_config(**kw) -> ModelConfig:
    base = dict(depth_blocks=1, D=16, patch_len=8, prompt_dim=8, time_dim=8, n_heads=2, dropout=0.0,
                adapter_dim=8, adapter_basis=8, trend_points=8)
    base.update(kw)
    return ModelConfig(**base)


def randomize(model: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Overwrite every parameter (zero-inits included) with Gaussian noise."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model(tiny_cfg):
    torch.manual_seed(0)
    return ForecastModel(tiny_cfg).eval()


_CRITERIA: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    crit = item.get_closest_marker("criterion")
    if crit is None:
        return
    n = crit.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA.setdefault(n, []).append("PASS" if rep.passed else "FAIL")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status = "PASS" if all(s == "PASS" for s in _CRITERIA[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n:2d}: {status}")
