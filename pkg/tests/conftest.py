import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scarfinder.operators import SPIN1

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_hermitian(rng, n):
    x = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    return (x + x.conj().T) / 2


def dense_local(L, d, op, sites):
    """Dense ``op`` acting on the listed ``sites`` of an ``L``-site chain (independent oracle)."""
    k = len(sites)
    full = np.kron(op, np.eye(d ** (L - k))).reshape((d,) * (2 * L))
    rest = [s for s in range(L) if s not in sites]
    order = list(sites) + rest
    # axis a of `full` belongs to physical site order[a]
    perm = np.argsort(order)
    full = full.transpose(list(perm) + [L + p for p in perm])
    return full.reshape(d**L, d**L)


def dense_translation_sum(L, d, op, span, start=0, step=1, coefficient=1.0):
    """``sum over j = start, start+step, ...`` of ``op`` on sites ``j .. j+span-1`` (PBC)."""
    out = np.zeros((d**L, d**L), dtype=complex)
    for j in range(start, L, step):
        out += coefficient * dense_local(L, d, op, [(j + m) % L for m in range(span)])
    return out


def dense_from_spec(h, L):
    """Brute-force PBC matrix of every Hermitian term of a HamiltonianSpec."""
    out = np.zeros((h.local_dim**L, h.local_dim**L), dtype=complex)
    for t in h.terms:
        out += dense_translation_sum(L, h.local_dim, t.op, t.span, t.start, h.unit_cell, t.coefficient)
    return out


def product_vector(vectors, L):
    out = np.ones(1, dtype=complex)
    for j in range(L):
        out = np.kron(out, vectors[j % len(vectors)])
    return out


def open_window_vector(psi, nsites):
    """Amplitudes ``lambda_a (B ... B)_{a s b}`` with open bond indices on both ends.

    Cutting between site ``k`` and ``k + 1`` groups ``(a, s_1..s_k)`` against the
    rest; for a canonical state its Schmidt values are the weights of that bond.
    """
    t = psi.weights[0][:, None, None] * psi.tensors[0].transpose(1, 0, 2)
    for j in range(1, nsites):
        t = np.tensordot(t, psi.tensors[j % psi.unit_cell], axes=(-1, 1))
        t = np.moveaxis(t, -2, -2)
    return t


_I3 = np.eye(3)
SX, SY, SZ, P0 = SPIN1["Sx"], SPIN1["Sy"], SPIN1["Sz"], SPIN1["P0"]
SP, SM = SPIN1["Splus"], SPIN1["Sminus"]

# explicit nearest-neighbour parent Hamiltonians of the Type-1 tower
TYPE1_EXPLICIT = {
    "H0": np.kron(SX, SX) + np.kron(SY, SY),
    "H1": np.kron(P0, _I3),
    "H2": np.kron(P0, P0),
    "H3": np.kron(P0, SX),
    "H4": np.kron(SX, P0),
    "H5": np.kron(P0, SY),
    "H6": np.kron(SY, P0),
    "H7": np.kron(P0, SZ),
    "H8": np.kron(SZ, P0),
}

_sp2, _sm2 = SP @ SP, SM @ SM
TYPE2_EXPLICIT = {
    "XY": np.kron(SX, SX) + np.kron(SY, SY),
    "H1": np.kron(_sp2, _sm2) + np.kron(_sm2, _sp2),
    "H2": 1j * np.kron(_sp2, _sm2) - 1j * np.kron(_sm2, _sp2),
    "H3": np.kron(SZ @ SZ, SZ @ SZ) - np.kron(SZ, SZ),
    "H4": np.kron(SZ, SZ @ SZ) - np.kron(SZ @ SZ, SZ),
}


def raw_expansion(basis, op):
    """Least-squares coefficients of ``op`` in the raw basis plus identity; asserts exactness."""
    a = np.column_stack([o.reshape(-1) for o in basis.ops] + [np.eye(op.shape[0]).reshape(-1)])
    x, *_ = np.linalg.lstsq(a, op.reshape(-1), rcond=None)
    assert np.linalg.norm(a @ x - op.reshape(-1)) < 1e-10
    return x[:-1]
