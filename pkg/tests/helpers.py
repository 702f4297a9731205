import numpy as np
import torch


def fd_grad(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite differences of scalar ``f()`` with respect to ``x`` (mutated in place)."""
    g = torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = f().item()
        flat[i] = old - eps
        down = f().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b, floor: float = 1e-10) -> float:
    """Norm-wise relative error; gradients smaller than ``floor`` are compared absolutely."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    den = max(float(a.norm()), float(b.norm()), floor)
    return float((a - b).norm()) / den


def autograd_grad(f, x: torch.Tensor) -> torch.Tensor:
    x.grad = None
    out = f()
    (g,) = torch.autograd.grad(out, x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def leaf(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=torch.float64).clone().requires_grad_(True)


def make_world(cfg, positions, goals, n_robots, prev=None, headings=None, seed=0):
    """Hand-placed world; positions and goals list robots first, then humans."""
    from multisoc.sim import World

    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    w = World(cfg, np.random.default_rng(seed), n_robots, pos.shape[0] - n_robots)
    w.pos[:] = pos
    w.prev_pos[:] = pos if prev is None else np.asarray(prev, dtype=float)
    w.goal[:] = np.asarray(goals, dtype=float).reshape(-1, 2)
    if headings is None:
        d = w.goal - w.pos
        w.heading[:] = np.arctan2(d[:, 1], d[:, 0])
    else:
        w.heading[:] = headings
    w.human_policy = ["orca"] * w.n
    return w


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []
