"""Streaming plug-in estimators for input parameters and design performance.

Outputs of design ``i`` are pooled across stages even though each stage
simulated under its own input estimate; the bank only keeps running sums,
so memory is constant in the number of stages.
"""

from __future__ import annotations

import hashlib

import numpy as np

VARIANCE_FLOOR = 1e-8
COVARIANCE_JITTER = 1e-12


class EstimatorError(RuntimeError):
    pass


def _sorted_sum(values: np.ndarray) -> np.ndarray:
    # sorting first makes the float sum independent of the order of the batch
    return np.sort(values, axis=0).sum(axis=0)


class EstimatorBank:
    """Running sums for ``theta``, ``Sigma_D``, ``mu``, ``sigma^2`` and ``grad mu``.

    Args:
        families: one ``ParametricFamily`` per input stream.
        n_designs: number of designs ``K``.
        variance_floor: lower bound reported for output variances.
    """

    def __init__(self, families, n_designs: int, variance_floor: float = VARIANCE_FLOOR):
        self.families = list(families)
        self.n_streams = len(self.families)
        self.n_designs = int(n_designs)
        self.variance_floor = float(variance_floor)
        dims = [f.param_dim for f in self.families]
        self.offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.n_params = int(self.offsets[-1])

        self.input_count = np.zeros(self.n_streams, dtype=np.int64)
        self._sum_d = [np.zeros(d) for d in dims]
        self._sum_dd = [np.zeros((d, d)) for d in dims]

        self.output_count = np.zeros(self.n_designs, dtype=np.int64)
        self._sum_x = np.zeros(self.n_designs)
        self._sum_x2 = np.zeros(self.n_designs)
        self._sum_sx = np.zeros((self.n_designs, self.n_params))

    def block(self, s: int) -> slice:
        """Slice of the flat parameter vector that belongs to stream ``s``."""
        return slice(self.offsets[s], self.offsets[s + 1])

    def _check_stream(self, s: int) -> int:
        if not 0 <= s < self.n_streams:
            raise IndexError(f"unknown stream {s}")
        return int(s)

    def _check_design(self, i: int) -> int:
        if not 0 <= i < self.n_designs:
            raise IndexError(f"unknown design {i}")
        return int(i)

    # -- input side -------------------------------------------------------

    def update_input(self, s: int, draws) -> None:
        s = self._check_stream(s)
        draws = np.asarray(draws, dtype=float).ravel()
        if draws.size == 0:
            return
        d = self.families[s].moment_map(draws)
        self._sum_d[s] += _sorted_sum(d)
        outer = d[:, :, None] * d[:, None, :]
        self._sum_dd[s] += _sorted_sum(outer)
        self.input_count[s] += draws.size

    def theta_raw(self, s: int) -> np.ndarray:
        s = self._check_stream(s)
        if self.input_count[s] == 0:
            raise EstimatorError(f"stream {s} has no input data")
        return self._sum_d[s] / self.input_count[s]

    def theta_hat(self, s: int) -> np.ndarray:
        """Sample-average moment estimate, projected into the valid set."""
        return self.families[s].project(self.theta_raw(s))

    def thetas(self) -> list[np.ndarray]:
        return [self.theta_hat(s) for s in range(self.n_streams)]

    def sigma_d(self, s: int) -> np.ndarray:
        """Sample covariance of the moment map; jittered when degenerate."""
        theta = self.theta_raw(s)
        n = self.input_count[s]
        dim = theta.size
        if n <= 1:
            return COVARIANCE_JITTER * np.eye(dim)
        cov = (self._sum_dd[s] - n * np.outer(theta, theta)) / (n - 1)
        cov = 0.5 * (cov + cov.T)
        if dim == 1:
            cov = np.maximum(cov, 0.0)
        if not np.any(cov):
            cov = cov + COVARIANCE_JITTER * np.eye(dim)
        return cov

    # -- output side ------------------------------------------------------

    def update_output(self, i: int, outputs, scores) -> None:
        i = self._check_design(i)
        outputs = np.asarray(outputs, dtype=float).ravel()
        scores = np.asarray(scores, dtype=float).reshape(-1, self.n_params) if self.n_params else np.zeros((outputs.size, 0))
        if scores.shape[0] != outputs.size:
            raise ValueError(f"{outputs.size} outputs but {scores.shape[0]} score vectors")
        if outputs.size == 0:
            return
        self._sum_x[i] += _sorted_sum(outputs)
        self._sum_x2[i] += _sorted_sum(outputs * outputs)
        self._sum_sx[i] += _sorted_sum(scores * outputs[:, None])
        self.output_count[i] += outputs.size

    def _require_outputs(self):
        if np.any(self.output_count == 0):
            missing = np.flatnonzero(self.output_count == 0).tolist()
            raise EstimatorError(f"designs {missing} have no simulation outputs")

    def means(self) -> np.ndarray:
        self._require_outputs()
        return self._sum_x / self.output_count

    def variances(self) -> np.ndarray:
        self._require_outputs()
        m = self.output_count
        mean = self._sum_x / m
        with np.errstate(divide="ignore", invalid="ignore"):
            raw = (self._sum_x2 - m * mean**2) / (m - 1)
        raw = np.where(m > 1, raw, 0.0)
        return np.maximum(raw, self.variance_floor)

    def gradients(self) -> np.ndarray:
        """Likelihood-ratio gradient estimates, shape ``(K, n_params)``."""
        self._require_outputs()
        return self._sum_sx / self.output_count[:, None]

    def best_design(self) -> int:
        # np.argmax returns the first maximizer, i.e. ties go to the lowest index
        return int(np.argmax(self.means()))

    def g_matrix(self, best: int | None = None, gradients=None, covariances=None) -> np.ndarray:
        """``g(i, s)`` for every design and stream; row ``best`` is zero."""
        if best is None:
            best = self.best_design()
        if gradients is None:
            gradients = self.gradients()
        if covariances is None:
            covariances = [self.sigma_d(s) for s in range(self.n_streams)]
        return g_matrix(gradients, covariances, self.offsets, best)

    def g_hat(self, i: int, s: int) -> float:
        i = self._check_design(i)
        s = self._check_stream(s)
        best = self.best_design()
        if i == best:
            raise EstimatorError(f"design {i} is the current best; g is defined for suboptimal designs")
        diff = self.gradients()[best, self.block(s)] - self.gradients()[i, self.block(s)]
        return float(diff @ self.sigma_d(s) @ diff)

    # -- diagnostics ------------------------------------------------------

    def snapshot(self) -> dict:
        snap = {
            "input_count": self.input_count.tolist(),
            "output_count": self.output_count.tolist(),
        }
        if np.all(self.input_count > 0):
            snap["theta_hat"] = [t.tolist() for t in self.thetas()]
            snap["sigma_d"] = [self.sigma_d(s).tolist() for s in range(self.n_streams)]
        if np.all(self.output_count > 0):
            snap["mu_hat"] = self.means().tolist()
            snap["sigma2_hat"] = self.variances().tolist()
            snap["grad_hat"] = self.gradients().tolist()
            snap["best"] = self.best_design()
        return snap

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.input_count, self.output_count, self._sum_x, self._sum_x2, self._sum_sx, *self._sum_d):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def g_matrix(gradients, covariances, offsets, best: int) -> np.ndarray:
    """Quadratic forms ``(grad_b - grad_i)_s^T Sigma_s (grad_b - grad_i)_s``."""
    gradients = np.asarray(gradients, dtype=float)
    diff = gradients[best][None, :] - gradients
    out = np.empty((gradients.shape[0], len(covariances)))
    for s, cov in enumerate(covariances):
        d = diff[:, offsets[s] : offsets[s + 1]]
        out[:, s] = np.einsum("kp,pq,kq->k", d, cov, d)
    out[best] = 0.0
    return np.maximum(out, 0.0)
