"""Central finite-difference oracle used by the gradient-check tests."""
import torch


def central_diff(f, x: torch.Tensor, index, eps: float = 1e-6) -> float:
    """d f / d x[index] via central differences; f returns a scalar."""
    x = x.detach().clone()
    orig = x[index].item()
    x[index] = orig + eps
    hi = float(f(x))
    x[index] = orig - eps
    lo = float(f(x))
    x[index] = orig
    return (hi - lo) / (2.0 * eps)


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
