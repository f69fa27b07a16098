import numpy as np
import pytest
import torch


def finite_difference(fn, x: torch.Tensor, eps: float = 1e-4) -> torch.Tensor:
    """Central differences of the scalar ``fn`` at every entry of ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        with torch.no_grad():
            up = float(fn(x))
        flat[i] = old - eps
        with torch.no_grad():
            down = float(fn(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return grad


def analytic_gradient(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


def gradient_error(fn, x: torch.Tensor, eps: float = 1e-4) -> float:
    return relative_error(analytic_gradient(fn, x), finite_difference(fn, x, eps))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE_LINES.append(f"{criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
