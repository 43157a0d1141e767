import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small generated dataset shared by IO/training/eval tests."""
    from pointafford.data import generate_synthetic_dataset

    root = tmp_path_factory.mktemp("tiny_dataset")
    records, manifest = generate_synthetic_dataset(
        root, n_objects=8, seed=7, n_points=96, partial_fraction=0.25
    )
    return root, records, manifest


def finite_difference_check(build_loss, params, step=1e-5, rtol=1e-4, atol=1e-7,
                            max_per_tensor=10, seed=0):
    """Analytic autograd gradients vs central finite differences (float64).

    Checks |analytic - fd| <= atol + rtol * max(|analytic|, |fd|) on a seeded
    sample of entries per tensor; the atol floor absorbs the ~1e-10 FD
    cancellation noise on entries whose true gradient is zero.
    """
    loss = build_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sample_rng = np.random.default_rng(seed)
    checked = 0
    for p, g in zip(params, grads):
        if g is None:
            continue
        flat = p.detach().reshape(-1)
        n = flat.numel()
        for j in sample_rng.choice(n, size=min(max_per_tensor, n), replace=False):
            orig = flat[j].item()
            with torch.no_grad():
                flat[j] = orig + step
            loss_plus = build_loss().item()
            with torch.no_grad():
                flat[j] = orig - step
            loss_minus = build_loss().item()
            with torch.no_grad():
                flat[j] = orig
            fd = (loss_plus - loss_minus) / (2.0 * step)
            an = g.reshape(-1)[j].item()
            assert abs(an - fd) <= atol + rtol * max(abs(an), abs(fd)), (
                f"gradient mismatch at entry {j}: analytic {an:.6e} vs fd {fd:.6e}"
            )
            checked += 1
    assert checked > 0
    return checked
