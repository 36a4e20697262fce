import numpy as np
import pytest

from slicesplat.core import GaussianSet


def random_quat(rng):
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_set(rng, m, lo=(0, 0, 0), hi=(16, 16, 16), scale=(0.8, 3.0), alpha=(0.2, 0.9)):
    """Uniform random primitives inside the box [lo, hi]."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    mu = lo + rng.random((m, 3)) * (hi - lo)
    s = rng.uniform(*scale, size=(m, 3))
    q = rng.normal(size=(m, 4))
    a = rng.uniform(*alpha, size=m)
    return GaussianSet.from_exposed(mu, s, q, a, np.stack([lo - 1, hi + 1]))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_scene(rng, n_prims):
    """Random slice scene for gradient checks: set, pose, psf, target."""
    from slicesplat.core import PsfSpec, SlicePose

    gs = random_set(rng, n_prims, lo=(3, 3, -1.5), hi=(13, 13, 1.5), scale=(1.0, 2.5), alpha=(0.3, 0.9))
    pose = SlicePose.identity(16, 16)
    psf = PsfSpec(1.0, 1.0, rng.uniform(0.7, 2.0))
    target = rng.random((16, 16)) * 0.5
    return gs, pose, psf, target


def fd_compare(gs, pose, psf, target, support=8.0, h=1e-4):
    """Worst relative and absolute analytic/FD disagreement over all stored parameters.

    An entry counts as matching when rel < 1e-4 or abs < 1e-8; the returned
    worst value is the smaller of the two normalized misses.
    """
    from slicesplat.grad import backward_slice, finite_difference_oracle
    from slicesplat.render import rasterize_slice

    def loss_fn(s):
        img = rasterize_slice(s, pose, psf, tau=0.0, support_sigmas=support).pixels
        return 0.5 * np.sum((img - target) ** 2)

    img = rasterize_slice(gs, pose, psf, tau=0.0, support_sigmas=support).pixels
    grads = backward_slice(gs, pose, psf, img - target, tau=0.0, support_sigmas=support)
    ana = grads.flat()
    worst = 0.0
    for i in range(len(gs)):
        for j in range(11):
            fd = finite_difference_oracle(gs, pose, psf, loss_fn, (i, j), h)
            a = ana[i, j]
            err = abs(a - fd)
            rel = err / max(abs(a), abs(fd), 1e-300)
            worst = max(worst, min(rel / 1e-4, err / 1e-8))
    gauge = np.abs(np.sum(grads.d_quat * gs.quat, axis=1)).max()
    return worst, gauge


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
