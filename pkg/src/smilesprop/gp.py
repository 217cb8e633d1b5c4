"""Gaussian-process regression with a Matern-5/2 ARD kernel, and expected improvement."""
import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

SQRT5 = np.sqrt(5.0)
JITTER = 1e-8


def matern52(a, b, lengthscales, variance):
    a = a / lengthscales
    b = b / lengthscales
    k = a @ b.T
    k *= -2.0
    k += (a * a).sum(1)[:, None]
    k += (b * b).sum(1)[None, :]
    np.maximum(k, 0.0, out=k)
    np.sqrt(k, out=k)
    k *= SQRT5
    e = np.exp(-k)
    # (1 + s + s^2/3) exp(-s), computed in place
    k *= k / 3.0 + 1.0
    k += 1.0
    k *= e
    k *= variance
    return k


class GaussianProcess:
    """Zero-mean GP on standardized targets.

    Hyperparameters (log variance, log length scales, log noise) are fit by
    maximizing the log marginal likelihood with L-BFGS-B from a few starts.
    """

    bounds_log_ls = (np.log(0.02), np.log(5.0))
    bounds_log_var = (np.log(0.05), np.log(20.0))
    bounds_log_noise = (np.log(1e-6), np.log(0.5))

    def __init__(self, n_restarts=3):
        self.n_restarts = n_restarts

    def _unpack(self, theta):
        d = self.X.shape[1]
        return np.exp(theta[0]), np.exp(theta[1 : 1 + d]), np.exp(theta[1 + d])

    def _nll(self, theta):
        var, ls, noise = self._unpack(theta)
        K = matern52(self.X, self.X, ls, var)
        K[np.diag_indices_from(K)] += noise + JITTER
        try:
            c = cho_factor(K, lower=True)
        except np.linalg.LinAlgError:
            return 1e25
        alpha = cho_solve(c, self.y)
        return 0.5 * self.y @ alpha + np.log(np.diag(c[0])).sum() + 0.5 * len(self.y) * np.log(2 * np.pi)

    def fit(self, X, y, rng):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.y_mean = y.mean()
        self.y_std = y.std() if y.std() > 0 else 1.0
        self.X = X
        self.y = (y - self.y_mean) / self.y_std
        d = X.shape[1]
        bounds = [self.bounds_log_var] + [self.bounds_log_ls] * d + [self.bounds_log_noise]
        starts = [np.concatenate([[0.0], np.full(d, np.log(0.3)), [np.log(1e-3)]])]
        for _ in range(self.n_restarts - 1):
            starts.append(np.array([rng.uniform(lo, hi) for lo, hi in bounds]))
        best = None
        for x0 in starts:
            res = minimize(self._nll, x0, method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        self.theta = best.x
        self.variance, self.lengthscales, self.noise = self._unpack(self.theta)
        K = matern52(X, X, self.lengthscales, self.variance)
        K[np.diag_indices_from(K)] += self.noise + JITTER
        self._chol = cho_factor(K, lower=True)
        self._alpha = cho_solve(self._chol, self.y)
        self._kinv = cho_solve(self._chol, np.eye(len(X)))
        return self

    def predict(self, Xs, chunk=8192):
        """Posterior mean and standard deviation in the original target units."""
        Xs = np.asarray(Xs, dtype=np.float64)
        mu = np.empty(len(Xs))
        sd = np.empty(len(Xs))
        for start in range(0, len(Xs), chunk):
            part = Xs[start : start + chunk]
            Ks = matern52(part, self.X, self.lengthscales, self.variance)
            mu[start : start + chunk] = Ks @ self._alpha
            var = self.variance - np.einsum("ij,ij->i", Ks @ self._kinv, Ks)
            sd[start : start + chunk] = np.sqrt(np.maximum(var, 1e-12))
        return mu * self.y_std + self.y_mean, sd * self.y_std


def expected_improvement(mu, sd, best, xi=0.0):
    """EI for minimization relative to the incumbent ``best``."""
    imp = best - mu - xi
    z = imp / sd
    return imp * norm.cdf(z) + sd * norm.pdf(z)
