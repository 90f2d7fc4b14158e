"""Independent reference implementations used only to check the package.

These deliberately share no code with the implementation paths they verify:
the DFT is the direct O(n^2) sum, and the Burgers integrator steps the PDE
in time (integrating-factor RK4 on the advection term) instead of using the
Cole-Hopf transform.
"""

import numpy as np


def direct_dft(values):
    """O(n^2) centered DFT with 1/n normalization."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v)
    j = np.arange(n)
    ks = np.arange(-n // 2, n // 2)
    out = np.empty(n, dtype=np.complex128)
    for i, k in enumerate(ks):
        out[i] = np.sum(v * np.exp(-2j * np.pi * k * j / n)) / n
    return out


def direct_idft(coefficients):
    c = np.asarray(coefficients, dtype=np.complex128)
    n = len(c)
    j = np.arange(n)
    ks = np.arange(-n // 2, n // 2)
    out = np.zeros(n, dtype=np.complex128)
    for i, k in enumerate(ks):
        out += c[i] * np.exp(2j * np.pi * k * j / n)
    return np.real(out)


def rk4_burgers(u0, nu, t_final, n_steps=None, dealias=True):
    """Pseudo-spectral Burgers integrator on [0,1) with periodic BCs.

    The stiff diffusion term is handled exactly by an integrating factor;
    RK4 covers the advection nonlinearity written as -(u^2/2)_x.  Optional
    2/3-rule dealiasing for the quadratic term.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    n = len(u0)
    if n_steps is None:
        n_steps = max(int(np.ceil(t_final / 2e-4)), 1)
    dt = t_final / n_steps
    k = np.fft.rfftfreq(n, d=1.0 / n)  # 0 .. n/2
    ik = 1j * 2 * np.pi * k
    lam = -nu * (2 * np.pi * k) ** 2
    E = np.exp(lam * dt / 2)
    E2 = E * E
    mask = np.ones_like(k)
    if dealias:
        mask[k > n // 3] = 0.0

    def nonlinear(v_hat):
        u = np.fft.irfft(v_hat, n)
        return -ik * mask * np.fft.rfft(0.5 * u * u)

    v = np.fft.rfft(u0)
    for _ in range(n_steps):
        a = nonlinear(v)
        b = nonlinear(E * (v + 0.5 * dt * a))
        c = nonlinear(E * v + 0.5 * dt * b)
        d = nonlinear(E2 * v + dt * E * c)
        v = E2 * v + dt / 6.0 * (E2 * a + 2 * E * (b + c) + d)
    return np.fft.irfft(v, n)
