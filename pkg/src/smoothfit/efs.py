"""Fitting engines built around the extended Fellner-Schall update.

Three entry points cover the model ladder:

* :func:`fit_additive` -- Gaussian identity models; the update for the
  regularization parameters is exact (Wood & Fasiolo, 2017).
* :func:`fit_gam` -- exponential-family models via Fisher scoring; by
  default the model is re-linearized after every update (the
  performance-oriented-iteration flavor of Wood, Li, Shaddick & Augustin,
  2017), while ``max_inner > 1`` iterates the pseudo-data loop to
  convergence before each update.
* :func:`fit_gsmm` -- general smooth models with user-supplied gradient and
  Hessian, estimated by a stabilized Newton loop.

Step-length control follows the gradient-sign check: a proposed update is
halved while the REML gradient at the proposal points against it.  All
engines share the sparse factorization layer and the trace identities
tr(S_lambda^- S^r) and tr(H_p^{-1} S^r) the update is built from.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import qr as dense_qr

from . import sparsela
from .design import PenalizedDesign, balanced_penalty
from .errors import IndefiniteError, NumericError, SpecError
from .families import Gaussian, IdentityLink, pseudo_data

logger = logging.getLogger(__name__)

RHO_LO, RHO_HI = -12.0, 12.0
LAM_LO, LAM_HI = np.exp(RHO_LO), np.exp(RHO_HI)
QUAD_FLOOR = 1e-14


@dataclass
class EFSControl:
    max_outer: int = 200
    max_inner: int = 1
    tol: float = 1e-7
    control_lambda: str = "gradient_check"   # or "none"
    method: str = "cholesky"                 # or "qr"
    max_half: int = 10
    stabilize: bool = True

    def __post_init__(self):
        if self.max_inner < 1:
            raise SpecError("max_inner must be at least 1")
        if self.tol <= 0:
            raise SpecError("tol must be positive")
        if self.control_lambda not in ("none", "gradient_check"):
            raise SpecError("control_lambda must be 'none' or 'gradient_check'")
        if self.method not in ("cholesky", "qr"):
            raise SpecError("method must be 'cholesky' or 'qr'")


@dataclass
class FitState:
    """Converged (or flagged) state of one model fit."""

    beta: np.ndarray
    lam: np.ndarray
    phi: float
    edf: float
    reml: float
    penalized_llk: float
    llk: float
    iterations: int
    converged: bool
    eps_H: float = 0.0
    dropped: set = field(default_factory=set)
    term_edf: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    engine: str = ""
    # engine internals (not part of the reported surface)
    _design: object = None
    _factor: object = None
    _weights: object = None
    _family: object = None
    _link: object = None
    _y: object = None
    _transform: object = None   # orthogonal stabilizer T (sparse) or None

    @property
    def rho(self):
        return np.log(self.lam)

    # ----- posterior interface used by the uncertainty module ---------------
    @property
    def _keep(self):
        return self.diagnostics.get("keep")

    def _to_work(self, v):
        """Original coordinates -> (reduced) working coordinates."""
        vw = v if self._transform is None else \
            np.asarray(self._transform.T @ v)
        keep = self._keep
        if keep is not None and keep.size != vw.shape[0]:
            vw = vw[keep] if vw.ndim == 1 else vw[keep, :]
        return vw

    def _from_work(self, v):
        """(Reduced) working coordinates -> original, dropped entries zero."""
        keep = self._keep
        if keep is not None:
            n_work = self._transform.shape[0] if self._transform is not None \
                else self._design.N_p
            if v.shape[0] != n_work:
                full = np.zeros((n_work,) + v.shape[1:])
                full[keep] = v
                v = full
        return v if self._transform is None else \
            np.asarray(self._transform @ v)

    def solve_H(self, b):
        """(H + S_lambda [+ eps I])^{-1} b in original coordinates, unscaled."""
        b = np.asarray(b, dtype=float)
        if b.ndim == 1:
            return self._from_work(self._factor.solve(self._to_work(b)))
        return np.column_stack([self.solve_H(b[:, j])
                                for j in range(b.shape[1])])

    def half_solve_t(self, Z):
        """D P^T L^{-T} Z mapped to original coordinates (posterior sampler)."""
        return self._from_work(self._factor.half_tsolve_scatter(Z))

    def trace_inv(self, r):
        return sparsela.trace_inv_form(self._factor, self.work_design.D_root(r))

    def trace_inv_pair(self, j, l):
        return sparsela.trace_inv_pair(self._factor,
                                       self.work_design.D_root(j),
                                       self.work_design.D_root(l))

    @property
    def logdet_H(self):
        return self._factor.logdet

    @property
    def work_design(self):
        return self.diagnostics.get("work_design", self._design)

    def apply_Hllk(self, v):
        """H v (negative log-likelihood Hessian at the estimate)."""
        v = np.asarray(v, dtype=float)
        if self.engine in ("am", "gam"):
            X = self._design.X_full
            t = np.asarray(X @ v)
            if self._weights is not None:
                t = t * self._weights
            return np.asarray(X.T @ t)
        if self.engine == "lqefs":
            return self.diagnostics["h_rep"].matvec(v)
        Hw = self.diagnostics["H_llk"]
        return self._from_work(np.asarray(Hw @ self._to_work(v)))

    def covariance_scale(self):
        """phi multiplier turning solve_H into the posterior covariance."""
        return self.phi if self.engine in ("am", "gam") else 1.0


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------

class PenalizedSystem:
    """Canonical sparsity pattern and cached symbolic factor of H_p.

    The pattern of X^T W X + S_lambda (+ I) does not depend on the weights
    or the regularization parameters, so the ordering and symbolic analysis
    happen once per model.
    """

    def __init__(self, design, with_identity=False, extra=None):
        X = design.X_full
        XtX = sp.csc_array(X.T @ X)
        pattern = XtX.copy()
        for r in range(design.n_lambda):
            pattern = pattern + design.S_emb(r)
        if extra is not None:
            pattern = pattern + sp.csc_array(extra)
        if with_identity:
            pattern = pattern + sp.eye_array(design.N_p, format="csc")
        pattern = sp.csc_array(pattern)
        pattern.sort_indices()
        n = pattern.shape[0]
        # column-major keys of the canonical pattern; scipy's sparse add
        # drops exact-zero sums, so values are scattered by structure instead
        self._keys = pattern.indices.astype(np.int64) + n * np.repeat(
            np.arange(n, dtype=np.int64), np.diff(pattern.indptr))
        self.n = n
        self.perm = sparsela.fill_reducing_permutation(pattern)
        self.symbolic = sparsela.SymbolicChol(pattern, self.perm)
        self.XtX = XtX

    def align_values(self, A):
        """Scatter the entries of A into the canonical pattern's data slots."""
        A = sp.csc_array(A)
        A.sort_indices()
        akeys = A.indices.astype(np.int64) + self.n * np.repeat(
            np.arange(self.n, dtype=np.int64), np.diff(A.indptr))
        pos = np.searchsorted(self._keys, akeys)
        if pos.size and (np.any(pos >= self._keys.size)
                         or np.any(self._keys[pos] != akeys)):
            raise NumericError("matrix entries fall outside the analyzed "
                               "sparsity pattern")
        vals = np.zeros(self._keys.size)
        vals[pos] = A.data
        return vals

    def factor(self, A, dscale=None):
        return self.symbolic.factor(self.align_values(A), dscale=dscale)


def solve_penalized(X, response, w, design, lams, method="cholesky",
                    system=None, perm=None):
    """Solve (X^T W X + S_lambda) beta = X^T W response.

    The Cholesky path factors the assembled normal matrix with the cached
    fill-reducing permutation; the QR path works on the stacked
    [sqrt(W) X; E_lambda^T] system and reports unidentifiable columns.
    """
    X = sp.csc_array(X)
    unit_w = w is None
    w = np.ones(X.shape[0]) if unit_w else np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise SpecError("negative working weights")
    rhs = np.asarray(X.T @ (w * np.asarray(response, dtype=float)))
    if method == "cholesky":
        if unit_w and system is not None:
            XtX = system.XtX
        else:
            XtX = sp.csc_array(X.T @ X.multiply(w[:, None]))
        A = XtX + design.S_lambda(lams)
        factor = system.factor(A) if system is not None else \
            sparsela.pivoted_cholesky(sp.csc_array(A), perm=perm)
        return factor.solve(rhs), factor
    sw = np.sqrt(w)
    Xs = sp.csr_array(X.multiply(sw[:, None]))
    E = design.E_lambda(lams)
    factor = sparsela.penalized_qr(Xs, E,
                                   perm=system.perm if system else perm)
    return factor.solve(rhs), factor


def trace_Sinv_Sr(design, lams):
    """tr(S_lambda^- S^r) for every regularization parameter."""
    lams = np.asarray(lams, dtype=float)
    if np.any(lams <= 0):
        raise SpecError("regularization parameters must be positive")
    return design.trace_sinv(lams)


def efs_step(lam_r, tr_S, tr_H, quad, phi=1.0):
    """Additive Fellner-Schall update for one regularization parameter.

    Returns (delta, clamped_flag).  A vanishing coefficient quadratic form
    sends the parameter to the upper clamp (the term is penalized away).
    """
    if quad <= QUAD_FLOOR:
        return LAM_HI - lam_r, True
    new = lam_r * (tr_S - tr_H) / quad * phi
    clamped = new < LAM_LO or new > LAM_HI
    new = float(np.clip(new, LAM_LO, LAM_HI))
    return new - lam_r, clamped


def estimate_phi(rss_pen, n, mp):
    """REML scale estimate: (weighted RSS + penalty) / (N - M_p).

    ``mp`` is the total penalty null-space dimension.  Verified against the
    1-d grid maximizer of the REML criterion in the test suite.
    """
    denom = n - mp
    if denom <= 0:
        raise NumericError("fewer observations than unpenalized directions")
    phi = rss_pen / denom
    if not np.isfinite(phi) or phi < 0:
        raise NumericError("scale estimate is not finite")
    return max(phi, 1e-12)


def reml_value(design, factor, lams, llk_pen, phi=1.0, n_active=None):
    """Laplace REML criterion: L_pen + 0.5 log|S/phi|_+ - 0.5 log|H_p|.

    ``factor`` factors the unscaled penalized Hessian; the lambda-constant
    additive term is omitted.
    """
    n_active = design.N_p if n_active is None else n_active
    ld_s = design.logdet_S_plus(lams) - design.penalty_rank * np.log(phi)
    ld_h = factor.logdet - n_active * np.log(phi)
    return float(llk_pen + 0.5 * ld_s - 0.5 * ld_h)


def reml_grad(design, factor, lams, beta, phi=1.0):
    """Gradient of the REML criterion over lambda (envelope condition used).

    Per coordinate: -b^T S^r b/(2 phi) + tr(S^- S^r)/2 - tr(H_p^{-1} S^r)/2;
    multiply by lambda for the log-scale gradient.  Returns
    (grad, tr_S, tr_H, quads).
    """
    tr_S = design.trace_sinv(lams)
    tr_H = np.array([sparsela.trace_inv_form(factor, design.D_root(r))
                     for r in range(design.n_lambda)])
    quads = np.array([float(beta @ (design.S_emb(r) @ beta))
                      for r in range(design.n_lambda)])
    return -quads / (2.0 * phi) + 0.5 * tr_S - 0.5 * tr_H, tr_S, tr_H, quads


def _clip_lams(lams):
    return np.clip(lams, LAM_LO, LAM_HI)


def _term_edfs(design, factor, w):
    """Per-term effective degrees of freedom from diag(H_p^{-1} X^T W X)."""
    X = design.X_full
    Xw = X if w is None else X.multiply(np.asarray(w)[:, None])
    dense = np.asarray(sp.csc_array(X.T @ Xw).todense())
    sol = factor.solve(dense)
    diag = np.einsum("ii->i", sol)
    return {t.spec.name: float(np.sum(diag[t.col_start:
                                           t.col_start + t.col_count]))
            for t in design.terms}


# ---------------------------------------------------------------------------
# additive / generalized additive engines
# ---------------------------------------------------------------------------

def fit_additive(design, y, control=None):
    """Gaussian identity additive model (exact REML fixed point)."""
    return _fit_working(design, y, Gaussian(), IdentityLink(),
                        control or EFSControl(), engine="am")


def fit_gam(design, y, family, link=None, control=None):
    """Exponential-family model via Fisher scoring plus EFS updates."""
    from .families import get_link
    if link is None:
        link = get_link(family.default_link)
    return _fit_working(design, y, family, link, control or EFSControl(),
                        engine="gam")


class _WorkingModel:
    """One linearize+solve step of the working (pseudo-data) model."""

    def __init__(self, design, yv, family, link, control):
        self.design = design
        self.yv = yv
        self.family = family
        self.link = link
        self.control = control
        self.X = design.X_full
        self.gaussian_identity = isinstance(family, Gaussian) and \
            isinstance(link, IdentityLink)
        self.system = PenalizedSystem(design)
        self.clamp_events = 0
        self.dropped = set()

    def linearize(self, mu):
        if self.gaussian_identity:
            return self.yv, None
        z, w, nclamp = pseudo_data(self.yv, mu, self.link, self.family)
        self.clamp_events += nclamp
        return z, w

    def solve(self, lams, z, w):
        beta, factor = solve_penalized(self.X, z, w, self.design, lams,
                                       method=self.control.method,
                                       system=self.system)
        self.dropped |= set(getattr(factor, "dropped", set()))
        return beta, factor

    def pen_deviance(self, beta, lams):
        mu = self.link.inverse(np.asarray(self.X @ beta))
        mu, _ = self.link.clamp(mu)
        pen = float(np.asarray(lams) @ self.design.quad_forms(beta))
        return self.family.deviance(self.yv, mu) + pen, mu

    def halve_beta(self, beta_new, beta_old, dev_old, lams):
        """Shrink toward the previous estimate while the penalized deviance
        increases (half-stepping of the Fisher update).  ``dev_old`` must be
        evaluated at the same lams."""
        dev_new, mu_new = self.pen_deviance(beta_new, lams)
        tries = 0
        while dev_new > dev_old + 1e-12 * (abs(dev_old) + 1.0) \
                and tries < 30:
            beta_new = 0.5 * (beta_new + beta_old)
            dev_new, mu_new = self.pen_deviance(beta_new, lams)
            tries += 1
        return beta_new, dev_new, mu_new

    def step(self, lams, mu, beta_prev, dev_prev=None):
        """Linearize at mu, solve at lams, apply beta step control.

        The reference objective for step control is re-evaluated at the
        current lams (the previous accepted deviance belongs to the old
        penalty and is not comparable).
        """
        z, w = self.linearize(mu)
        beta_new, factor = self.solve(lams, z, w)
        if beta_prev is None or self.gaussian_identity:
            dev, mu_new = self.pen_deviance(beta_new, lams)
            return beta_new, dev, mu_new, factor, z, w
        dev_ref, _ = self.pen_deviance(beta_prev, lams)
        beta, dev, mu_new = self.halve_beta(beta_new, beta_prev, dev_ref,
                                            lams)
        return beta, dev, mu_new, factor, z, w

    def inner_loop(self, lams, mu, beta, dev, n_iter):
        factor = z = w = None
        for _ in range(n_iter):
            beta2, dev2, mu, factor, z, w = self.step(lams, mu, beta)
            done = abs(dev - dev2) < self.control.tol * (abs(dev2) + 1.0)
            beta, dev = beta2, dev2
            if done:
                break
        return beta, dev, mu, factor, z, w

    def phi_hat(self, beta, lams, z, w):
        if not self.family.has_scale:
            return 1.0
        wq = np.ones(self.design.N) if w is None else w
        resid = np.sqrt(wq) * (z - np.asarray(self.X @ beta))
        pen = float(np.asarray(lams) @ self.design.quad_forms(beta))
        mp = self.design.N_p - self.design.penalty_rank
        return estimate_phi(float(resid @ resid) + pen, self.design.N, mp)


def _fit_working(design, y, family, link, control, engine):
    y_user = np.asarray(y, dtype=float)
    if y_user.shape[0] != design.N:
        raise SpecError("response length does not match the design")
    family.validate(y_user)
    yv = design.to_internal(y_user)
    wm = _WorkingModel(design, yv, family, link, control)

    lams = np.ones(design.n_lambda)
    mu = family.init_mu(yv)
    if not wm.gaussian_identity:
        mu, _ = link.clamp(mu)

    beta, dev_pen, mu, factor, z, w = wm.step(lams, mu, None)
    pending = None
    halvings = 0
    lam_clamped = np.zeros(design.n_lambda, dtype=bool)
    converged = False
    dev_accepted = None
    snapshot = (lams.copy(), beta.copy(), mu.copy(), dev_pen)
    it = 0

    for it in range(1, control.max_outer + 1):
        phi = wm.phi_hat(beta, lams, z, w)
        grad, tr_S, tr_H, quads = reml_grad(design, factor, lams, beta,
                                            phi=phi)

        if pending is not None and control.control_lambda == "gradient_check" \
                and float(grad @ pending) < 0 and halvings < control.max_half:
            lams, beta, mu, dev_pen = (snapshot[0].copy(), snapshot[1].copy(),
                                       snapshot[2].copy(), snapshot[3])
            pending = pending / 2.0
            halvings += 1
            lams = _clip_lams(lams + pending)
            beta, dev_pen, mu, factor, z, w = wm.step(lams, mu, beta)
            continue

        if pending is not None and dev_accepted is not None:
            rel = abs(dev_accepted - dev_pen) / (abs(dev_pen) + 1e-12)
            if rel < control.tol:
                converged = True
                break
        dev_accepted = dev_pen
        snapshot = (lams.copy(), beta.copy(), mu.copy(), dev_pen)

        pending = np.zeros(design.n_lambda)
        for r in range(design.n_lambda):
            delta, clamped = efs_step(lams[r], tr_S[r], tr_H[r], quads[r],
                                      phi)
            pending[r] = delta
            lam_clamped[r] |= clamped
        halvings = 0
        lams = _clip_lams(lams + pending)

        if control.max_inner > 1 and not wm.gaussian_identity:
            beta, dev_pen, mu, factor, z, w = wm.inner_loop(
                lams, mu, beta, dev_pen, control.max_inner)
        else:
            beta, dev_pen, mu, factor, z, w = wm.step(lams, mu, beta)

    phi = wm.phi_hat(beta, lams, z, w)
    grad, tr_S, tr_H, quads = reml_grad(design, factor, lams, beta, phi=phi)
    pen = float(np.asarray(lams) @ design.quad_forms(beta))
    mu_fit = link.inverse(np.asarray(wm.X @ beta))
    llk = float(np.sum(family.log_density(yv, link.clamp(mu_fit)[0], phi)))
    llk_pen = llk - pen / (2.0 * phi)
    n_active = design.N_p - len(wm.dropped)
    if wm.gaussian_identity:
        reml = reml_value(design, factor, lams, llk_pen, phi=phi,
                          n_active=n_active)
    else:
        wq = np.ones(design.N) if w is None else w
        resid = np.sqrt(wq) * (z - np.asarray(wm.X @ beta))
        llk_work = float(0.5 * np.sum(np.log(wq))
                         - 0.5 * design.N * np.log(2.0 * np.pi * phi)
                         - float(resid @ resid) / (2.0 * phi))
        reml = reml_value(design, factor, lams,
                          llk_work - pen / (2.0 * phi), phi=phi,
                          n_active=n_active)
    edf = n_active - float(np.sum(lams * tr_H))
    state = FitState(
        beta=beta, lam=lams, phi=phi, edf=edf, reml=reml,
        penalized_llk=llk_pen, llk=llk, iterations=it, converged=converged,
        dropped=wm.dropped, engine=engine,
        diagnostics={"lambda_clamped": lam_clamped.tolist(),
                     "mu_clamp_events": wm.clamp_events,
                     "reml_grad_lambda": grad.tolist(),
                     "tr_S": tr_S.tolist(), "tr_H": tr_H.tolist(),
                     "quads": quads.tolist(),
                     "factor_nnz": factor.nnz_L(),
                     "penalized_deviance": dev_pen},
        _design=design, _factor=factor, _weights=w, _family=family,
        _link=link, _y=yv)
    state.term_edf = _term_edfs(design, factor, w)
    return state


# ---------------------------------------------------------------------------
# stabilization, rank interrogation
# ---------------------------------------------------------------------------

@dataclass
class Stabilizer:
    """Orthogonal per-block reparameterization plus preconditioner hook.

    ``T`` is block-diagonal orthogonal: on every penalized cluster it holds
    the eigenvectors of the balanced local penalty, identity elsewhere.
    Coefficients transform as beta = T beta_work.
    """

    T: object

    def apply(self, beta_work):
        return np.asarray(self.T @ beta_work)

    def reverse(self, beta):
        return np.asarray(self.T.T @ beta)

    @staticmethod
    def preconditioner(h_diag):
        """Diagonal D with D_ii = |H_ii|^{-1/2}; zero diagonals get 1."""
        d = np.abs(np.asarray(h_diag, dtype=float))
        out = np.ones_like(d)
        nz = d > 0
        out[nz] = 1.0 / np.sqrt(d[nz])
        return out


def stabilize(design, lams=None):
    """Build the orthogonal stabilizing transform for a design.

    The transform diagonalizes each balanced penalty block, so it does not
    depend on the regularization weights and is computed once per model.
    """
    n_p = design.N_p
    T = sp.eye_array(n_p, format="lil")
    for cl in design.clusters:
        bal = sum(C / np.linalg.norm(C) for C in cl.cores.values())
        ev, W = np.linalg.eigh(0.5 * (bal + bal.T))
        order = np.argsort(ev)[::-1]
        W = W[:, order]
        T[cl.offset:cl.offset + cl.size, cl.offset:cl.offset + cl.size] = W
    return Stabilizer(T=sp.csc_array(T))


def transformed_design(design, stab):
    """Clone of a design re-expressed in the stabilized parameterization."""
    from .basis import transform_cores
    from .design import PenaltyBlock
    T = stab.T
    X_blocks = [sp.csc_array(Xb @ T[sl.start:sl.stop, sl.start:sl.stop])
                for Xb, sl in zip(design.X_blocks, design.param_slices)]
    blocks = []
    for b in design.penalty_blocks:
        W = np.asarray(T[b.offset:b.offset + b.core.k,
                         b.offset:b.offset + b.core.k].todense())
        core = transform_cores([b.core], W)[0]
        blocks.append(PenaltyBlock(core=core, offset=b.offset,
                                   lam_index=b.lam_index,
                                   term_index=b.term_index))
    return PenalizedDesign(design.spec, X_blocks, design.param_slices,
                           blocks, design.terms, design.row_order,
                           design.n_lambda, sort_factor=design.sort_factor)


def detect_unidentifiable(H, design, restrict=False, method="qr",
                          drop_tol=1e-7, max_foster=10):
    """Coefficients that stay unidentifiable regardless of regularization.

    Works on the balanced, scale-free matrix
    H/||H||_F + S_bal/||S_bal||_F.  The default is a dense column-pivoted
    QR; the alternative walks smallest-singular-vector estimates from a
    threshold-pivoted LU (Foster, 1986; Gotsman-style U reuse) and falls
    back to the QR route after ``max_foster`` fruitless rounds.
    ``restrict`` limits the interrogation to parametric terms and smooths
    with a non-trivial penalty kernel, since fully penalized random terms
    cannot cause lambda-independent rank deficiency.
    """
    H = sparsela.as_csc(sp.csc_array(H))
    Sb = balanced_penalty(design)
    h_norm = sp.linalg.norm(H)
    s_norm = sp.linalg.norm(Sb)
    HS = (H / h_norm if h_norm > 0 else H) + Sb / s_norm
    n_p = design.N_p
    if restrict:
        cols = []
        for t in design.terms:
            if t.spec.kind in ("intercept", "linear", "smooth", "tensor",
                               "factor_smooth"):
                cols.extend(range(t.col_start, t.col_start + t.col_count))
        cols = np.array(sorted(cols), dtype=np.int64)
    else:
        cols = np.arange(n_p, dtype=np.int64)
    if cols.size == 0:
        return set()
    A = np.asarray(HS[np.ix_(cols, cols)].todense())

    if method == "lu":
        keep = list(range(A.shape[0]))
        for _ in range(max_foster):
            sub = A[np.ix_(keep, keep)]
            lur = sparsela.stable_lu_rank(sp.csc_array(sub))
            if lur.flagged:
                break
            sigma, v = lur.smallest_singular_pair()
            if v is None:
                break
            scale = np.linalg.norm(sub, ord=1)
            if sigma > drop_tol * scale:
                return {int(cols[j]) for j in range(A.shape[0])
                        if j not in keep}
            keep.pop(int(np.argmax(np.abs(v))))
        logger.info("LU rank interrogation inconclusive; using pivoted QR")

    _, Rq, piv = dense_qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    ref = diag[0] if diag.size else 0.0
    bad = np.flatnonzero(diag < drop_tol * ref)
    return {int(cols[piv[j]]) for j in bad}


def reduced_design(design, dropped):
    """Design restricted to the kept columns; penalties sliced accordingly."""
    from .basis import transform_cores
    from .design import PenaltyBlock
    if not dropped:
        return design, np.arange(design.N_p)
    keep = np.array([j for j in range(design.N_p) if j not in dropped],
                    dtype=np.int64)
    pos = -np.ones(design.N_p, dtype=np.int64)
    pos[keep] = np.arange(keep.size)
    X_blocks = []
    param_slices = []
    start = 0
    for Xb, sl in zip(design.X_blocks, design.param_slices):
        local = keep[(keep >= sl.start) & (keep < sl.stop)] - sl.start
        X_blocks.append(sp.csc_array(Xb[:, local]))
        param_slices.append(slice(start, start + local.size))
        start += local.size
    blocks = []
    for b in design.penalty_blocks:
        rng = np.arange(b.offset, b.offset + b.core.k)
        kept_local = np.flatnonzero(pos[rng] >= 0)
        if kept_local.size == 0:
            continue
        sel = np.zeros((b.core.k, kept_local.size))
        sel[kept_local, np.arange(kept_local.size)] = 1.0
        core = transform_cores([b.core], sel)[0]
        blocks.append(PenaltyBlock(core=core,
                                   offset=int(pos[rng[kept_local][0]]),
                                   lam_index=b.lam_index,
                                   term_index=b.term_index))
    out = PenalizedDesign(design.spec, X_blocks, param_slices, blocks,
                          design.terms, design.row_order, design.n_lambda,
                          sort_factor=design.sort_factor)
    return out, keep


# ---------------------------------------------------------------------------
# Newton engine for general smooth models
# ---------------------------------------------------------------------------

def _as_sparse_H(H):
    if H is None:
        raise SpecError("family provides no Hessian; use the quasi-Newton "
                        "engine instead")
    return sp.csc_array(H) if sp.issparse(H) else sp.csc_array(np.asarray(H))


def _factor_with_ridge(system, Hp, h_norm, eps0=0.0):
    """Factor H_p + eps I with the diagonal preconditioner, escalating eps
    by a factor of 10 per Cholesky failure up to 1e4 ||H||_F."""
    n_p = Hp.shape[0]
    eps = eps0
    eps_next = max(1e-8 * h_norm, 1e-14)
    cap = 1e4 * max(h_norm, 1.0)
    eye = sp.eye_array(n_p, format="csc")
    while True:
        A = Hp if eps == 0.0 else sp.csc_array(Hp + eps * eye)
        dscale = Stabilizer.preconditioner(A.diagonal())
        try:
            return system.factor(A, dscale=dscale), eps
        except IndefiniteError:
            eps = max(eps_next, eps * 10.0)
            eps_next *= 10.0
            if eps > cap:
                raise NumericError(
                    "penalized Hessian stayed indefinite at the ridge cap; "
                    "drop terms or reparameterize the model") from None


def newton_beta(design, family, lams, beta0=None, control=None, system=None,
                max_iter=100):
    """Penalized Newton iterations with ridge escalation and step halving.

    Returns (beta, factor, eps, H, llk_pen, llk, converged, system); the
    factor is of H + S_lambda + eps I with eps transient (0 at exit unless
    the Hessian stayed indefinite near the optimum).
    """
    control = control or EFSControl()
    S_lam = design.S_lambda(lams)
    beta = family.init_coef(design) if beta0 is None else beta0.copy()
    llk = family.llk(beta, design)
    llk_pen = llk - 0.5 * float(beta @ (S_lam @ beta))
    eps = 0.0
    factor = None
    H = None
    converged = False
    for _ in range(max_iter):
        g = family.grad(beta, design) - np.asarray(S_lam @ beta)
        H = _as_sparse_H(-family.hess(beta, design))
        h_norm = sp.linalg.norm(H)
        Hp = sp.csc_array(H + S_lam)
        if system is None:
            system = PenalizedSystem(design, with_identity=True, extra=H)
        factor, eps = _factor_with_ridge(system, Hp, h_norm)
        delta = factor.solve(g)
        beta_new = beta + delta
        llk_new = family.llk(beta_new, design)
        pen_new = 0.5 * float(beta_new @ (S_lam @ beta_new))
        tries = 0
        while llk_new - pen_new < llk_pen and tries < 30:
            beta_new = 0.5 * (beta_new + beta)
            llk_new = family.llk(beta_new, design)
            pen_new = 0.5 * float(beta_new @ (S_lam @ beta_new))
            tries += 1
        step = np.max(np.abs(beta_new - beta)) / (1.0 + np.max(np.abs(beta)))
        rel = abs(llk_new - pen_new - llk_pen) / (abs(llk_pen) + 1e-12)
        beta, llk_pen, llk = beta_new, llk_new - pen_new, llk_new
        if rel < control.tol and step < control.tol:
            converged = True
            break
    return beta, factor, eps, H, llk_pen, llk, converged, system


def make_efs_safe(H, design, lams, system, factor, eps):
    """Raise the ridge until tr(S^- S^r) >= tr(H_p^{-1} S^r) for all r.

    This enforces the positive-semi-definiteness requirement on H that
    keeps every Fellner-Schall numerator non-negative.
    """
    tr_S = design.trace_sinv(lams)
    h_norm = sp.linalg.norm(H)
    S_lam = design.S_lambda(lams)
    eye = sp.eye_array(design.N_p, format="csc")
    eps_next = max(eps * 10.0, 1e-8 * h_norm, 1e-14)
    cap = 1e4 * max(h_norm, 1.0)
    while True:
        tr_H = np.array([sparsela.trace_inv_form(factor, design.D_root(r))
                         for r in range(design.n_lambda)])
        if np.all(tr_S - tr_H >= -1e-12 * np.maximum(np.abs(tr_S), 1.0)):
            return factor, eps, tr_S, tr_H
        eps = eps_next
        eps_next *= 10.0
        if eps > cap:
            raise NumericError("could not restore EFS positivity; the "
                               "log-likelihood Hessian is badly indefinite")
        A = sp.csc_array(H + S_lam + eps * eye)
        dscale = Stabilizer.preconditioner(A.diagonal())
        factor = system.factor(A, dscale=dscale)


def fit_gsmm(design, family, control=None):
    """General smooth model: Newton for beta, EFS for the regularization.

    Fitting happens in the stabilized parameterization; the returned
    coefficients are in the original one.
    """
    control = control or EFSControl()
    stab = stabilize(design) if control.stabilize else None
    work = transformed_design(design, stab) if stab is not None else design
    lams = np.ones(design.n_lambda)
    beta = family.init_coef(work)
    pending = None
    halvings = 0
    lam_clamped = np.zeros(design.n_lambda, dtype=bool)
    converged = False
    dropped = set()
    keep = np.arange(work.N_p)
    active = work
    system = None
    llk_pen_prev = None
    snapshot = None
    checked_rank = False
    it = 0

    for it in range(1, control.max_outer + 1):
        beta, factor, eps, H, llk_pen, llk, _, system = newton_beta(
            active, family, lams, beta0=beta, control=control, system=system)

        if not checked_rank and not dropped:
            poor = eps > 0
            if not poor:
                poor = sparsela.condition_estimate(factor) > \
                    sparsela.CONDITION_WARN
            if poor:
                checked_rank = True
                bad = detect_unidentifiable(H, active, restrict=False)
                if bad:
                    dropped = set(bad)
                    active, keep = reduced_design(work, dropped)
                    beta = beta[keep]
                    system = None
                    beta, factor, eps, H, llk_pen, llk, _, system = \
                        newton_beta(active, family, lams, beta0=beta,
                                    control=control, system=system)

        factor, eps, tr_S, tr_H = make_efs_safe(H, active, lams, system,
                                                factor, eps)
        quads = np.array([float(beta @ (active.S_emb(r) @ beta))
                          for r in range(active.n_lambda)])
        grad = -quads / 2.0 + 0.5 * tr_S - 0.5 * tr_H

        if pending is not None and control.control_lambda == "gradient_check" \
                and float(grad @ pending) < 0 and halvings < control.max_half:
            beta, lams = snapshot[0].copy(), snapshot[1].copy()
            llk_pen_prev = snapshot[2]
            pending = pending / 2.0
            halvings += 1
            lams = _clip_lams(lams + pending)
            continue

        if pending is not None and llk_pen_prev is not None:
            rel = abs(llk_pen - llk_pen_prev) / (abs(llk_pen) + 1e-12)
            if rel < control.tol:
                converged = True
                break
        llk_pen_prev = llk_pen
        snapshot = (beta.copy(), lams.copy(), llk_pen)

        pending = np.zeros(active.n_lambda)
        for r in range(active.n_lambda):
            delta, clamped = efs_step(lams[r], tr_S[r], tr_H[r], quads[r],
                                      1.0)
            pending[r] = delta
            lam_clamped[r] |= clamped
        halvings = 0
        lams = _clip_lams(lams + pending)

    edf = active.N_p - float(np.sum(lams * tr_H))
    reml = reml_value(active, factor, lams, llk_pen, phi=1.0,
                      n_active=active.N_p)
    beta_work_full = np.zeros(work.N_p)
    beta_work_full[keep] = beta
    beta_out = stab.apply(beta_work_full) if stab is not None \
        else beta_work_full
    state = FitState(
        beta=beta_out, lam=lams, phi=1.0, edf=edf, reml=reml,
        penalized_llk=llk_pen, llk=llk, iterations=it, converged=converged,
        eps_H=eps, dropped=dropped, engine="gsmm",
        diagnostics={"lambda_clamped": lam_clamped.tolist(),
                     "reml_grad_lambda": grad.tolist(),
                     "tr_S": tr_S.tolist(), "tr_H": tr_H.tolist(),
                     "quads": quads.tolist(), "H_llk": H,
                     "factor_nnz": factor.nnz_L(), "work_design": active,
                     "keep": keep},
        _design=design, _factor=factor, _family=family,
        _transform=stab.T if stab is not None else None)
    # per-term edf from diag(H_p^{-1} H), work coordinates
    sol = factor.solve(np.asarray(sp.csc_array(H).todense()))
    dvec = np.einsum("ii->i", sol)
    pos = -np.ones(work.N_p, dtype=np.int64)
    pos[keep] = np.arange(keep.size)
    term_edf = {}
    for t in design.terms:
        cols = pos[t.col_start:t.col_start + t.col_count]
        cols = cols[cols >= 0]
        term_edf[t.spec.name] = float(np.sum(dvec[cols])) if cols.size else 0.0
    state.term_edf = term_edf
    return state
