import pytest
import torch

from idhider import corpus, pipeline


def small_config(seed=0, n_identities=3, per_identity=4, size=32):
    cfg = pipeline.toy_config(seed)
    cfg["corpus"].update({
        "n_identities": n_identities, "per_identity": per_identity,
        "holdout_per_identity": 1, "image_size": size, "seed": seed,
    })
    return cfg


@pytest.fixture(scope="session")
def small_records():
    return corpus.make_corpus(3, 4, seed=0, size=32)


@pytest.fixture(scope="session")
def small_bundle():
    """Untrained bundle at 32px; treated as read-only by tests."""
    return pipeline.build_bundle(small_config())


@pytest.fixture()
def fresh_bundle():
    return pipeline.build_bundle(small_config(seed=1))


def directional_grad_check(fn, x: torch.Tensor, eps=1e-5, seed=0):
    """Relative error between autograd and a central finite difference along a
    random unit direction. `fn` maps x to a scalar tensor. Evaluation follows
    gradcheck practice: double precision with a small step, so kinked
    activations contribute O(eps) rather than drowning the comparison."""
    x = x.detach().clone().double().requires_grad_(True)
    out = fn(x)
    (grad,) = torch.autograd.grad(out, x)
    gen = torch.Generator().manual_seed(seed)
    d = torch.randn(x.shape, generator=gen, dtype=torch.float64)
    d = d / d.norm()
    with torch.no_grad():
        f_plus = fn(x + eps * d)
        f_minus = fn(x - eps * d)
    fd = (f_plus - f_minus).item() / (2 * eps)
    an = (grad * d).sum().item()
    return abs(fd - an) / max(abs(fd), abs(an), 1e-8)


def states_equal(module_a, module_b):
    sa, sb = module_a.state_dict(), module_b.state_dict()
    if sa.keys() != sb.keys():
        return False
    return all(torch.equal(sa[k], sb[k]) for k in sa)


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def matches_snapshot(module, snap):
    state = module.state_dict()
    return all(torch.equal(state[k], snap[k]) for k in snap)


def tree_bytes(root):
    """Stable byte dump of a directory tree for bit-reproducibility checks."""
    import os
    chunks = []
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, root)
            with open(path, "rb") as fh:
                chunks.append((rel, fh.read()))
    return chunks
