"""DC network algebra: bus susceptance matrix, DC power flow and distribution factors.

Bus injections and branch flows are in MW at the API boundary; the susceptance
matrix ``H`` is in per-unit on the case MVA base.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from threading import Lock

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid_model import Branch, GridCase, connected_components

DENSE_BELOW = 50
RADIAL_TOL = 1e-9


class SingularNetworkError(ValueError):
    """The reduced susceptance matrix cannot be factorized (disconnected case)."""


class RadialBranchError(ValueError):
    """LODF requested for a branch whose outage islands the network."""


class ReactiveLimitError(ValueError):
    """Reactive flow exceeds the MVA rating, so the active limit is imaginary."""


@dataclass(frozen=True, eq=False)
class DcNetwork:
    H: sp.csr_matrix           # bus susceptance, n_bus x n_bus, p.u.
    incidence: sp.csr_matrix   # n_branch x n_bus, +1 at from, -1 at to
    b: np.ndarray              # branch susceptance 1/x (0 for out-of-service)
    slack: int
    mva_base: float
    bus_ids: tuple[str, ...]
    branch_ids: tuple[str, ...]
    _solver: object = field(repr=False, default=None)

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)

    @property
    def n_branch(self) -> int:
        return len(self.branch_ids)

    @property
    def non_slack(self) -> np.ndarray:
        return np.delete(np.arange(self.n_bus), self.slack)

    def solve_reduced(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``H_red @ x = rhs`` on the non-slack buses (rhs may be 2-D)."""
        return self._solver(rhs)

    def Bf(self) -> sp.csr_matrix:
        """Branch-flow matrix diag(b) @ incidence (p.u. flow per radian)."""
        return sp.diags(self.b) @ self.incidence


def _factorize(Hred: sp.csc_matrix):
    n = Hred.shape[0]
    if n == 0:
        return lambda rhs: np.zeros_like(rhs, dtype=float)
    if n < DENSE_BELOW:
        dense = Hred.toarray()
        try:
            lu = sla.lu_factor(dense, check_finite=True)
        except (sla.LinAlgError, ValueError) as exc:
            raise SingularNetworkError(str(exc)) from exc
        piv = np.abs(np.diag(lu[0]))
        if piv.min() <= 1e-12 * max(1.0, piv.max()):
            raise SingularNetworkError("reduced susceptance matrix is singular")
        return lambda rhs: sla.lu_solve(lu, rhs)
    try:
        # COLAMD fill-reducing ordering
        lu = spla.splu(Hred.tocsc(), permc_spec="COLAMD")
    except RuntimeError as exc:
        raise SingularNetworkError(str(exc)) from exc
    return lambda rhs: lu.solve(np.asarray(rhs, dtype=float))


def build_dc(case: GridCase, drop: str | None = None) -> DcNetwork:
    """Assemble ``H = A^T diag(1/x) A`` over in-service branches.

    ``drop`` removes one branch (used for outage re-solves); its flow is then
    identically zero.
    """
    comps = connected_components(case, skip=drop)
    if len(comps) > 1:
        raise SingularNetworkError(
            f"network is disconnected; island {{{', '.join(comps[1])}}}")
    idx = case.bus_index()
    nb, nl = case.n_bus, len(case.branches)
    rows, cols, vals = [], [], []
    b = np.zeros(nl)
    for k, br in enumerate(case.branches):
        rows += [k, k]
        cols += [idx[br.from_bus], idx[br.to_bus]]
        vals += [1.0, -1.0]
        if br.in_service and br.id != drop:
            b[k] = 1.0 / br.reactance_x
    A = sp.csr_matrix((vals, (rows, cols)), shape=(nl, nb))
    H = (A.T @ sp.diags(b) @ A).tocsr()
    slack = case.slack_index
    keep = np.delete(np.arange(nb), slack)
    Hred = H[keep][:, keep].tocsc()
    return DcNetwork(H=H, incidence=A, b=b, slack=slack, mva_base=case.mva_base,
                     bus_ids=tuple(case.bus_ids), branch_ids=tuple(case.branch_ids),
                     _solver=_factorize(Hred))


@dataclass(frozen=True)
class FlowState:
    angles: np.ndarray   # rad
    flows: np.ndarray    # MW


def dc_power_flow(net: DcNetwork, injections: np.ndarray) -> FlowState:
    """DC power flow; the slack bus absorbs whatever imbalance the injections carry."""
    inj = np.asarray(injections, float) / net.mva_base
    theta = np.zeros(net.n_bus)
    theta[net.non_slack] = net.solve_reduced(inj[net.non_slack])
    flows = net.b * (net.incidence @ theta) * net.mva_base
    return FlowState(angles=theta, flows=flows)


def compute_ptdf(net: DcNetwork) -> np.ndarray:
    """PTDF (n_branch x n_bus): flow response to injection at a bus withdrawn at the slack."""
    keep = net.non_slack
    X = net.solve_reduced(np.eye(len(keep)))
    ptdf = np.zeros((net.n_branch, net.n_bus))
    Bf = net.Bf()
    ptdf[:, keep] = Bf[:, keep] @ X
    return ptdf


def _transfer_vector(net: DcNetwork, k: int) -> np.ndarray:
    return np.asarray(net.incidence[k].toarray()).ravel()


def compute_lodf(ptdf: np.ndarray, k: int, incidence: sp.csr_matrix) -> np.ndarray:
    """LODF column for the outage of branch ``k``: ``LODF[m] = PTDF[m]Δk / (1 - PTDF[k]Δk)``."""
    delta = np.asarray(incidence[k].toarray()).ravel()
    sens = ptdf @ delta
    denom = 1.0 - sens[k]
    if abs(denom) < RADIAL_TOL:
        raise RadialBranchError(f"branch index {k} is radial; its outage islands the network")
    lodf = sens / denom
    lodf[k] = -1.0
    return lodf


def compute_otdf(ptdf: np.ndarray, lodf_k: np.ndarray, k: int) -> np.ndarray:
    """OTDF_k = PTDF + LODF_k ⊗ PTDF[k]; row k comes out as zero."""
    otdf = ptdf + np.outer(lodf_k, ptdf[k])
    otdf[k] = 0.0
    return otdf


class DistFactors:
    """PTDF plus lazily cached per-contingency LODF/OTDF.

    Safe to share between threads: cache fills are guarded and the cached
    arrays are marked read-only.
    """

    def __init__(self, net: DcNetwork, ptdf: np.ndarray | None = None):
        self.net = net
        self.ptdf = compute_ptdf(net) if ptdf is None else ptdf
        self.ptdf.setflags(write=False)
        self._index = {bid: i for i, bid in enumerate(net.branch_ids)}
        self._lodf: dict[int, np.ndarray] = {}
        self._otdf: dict[int, np.ndarray] = {}
        self._lock = Lock()

    @classmethod
    def from_case(cls, case: GridCase) -> "DistFactors":
        return cls(build_dc(case))

    def branch_pos(self, branch_id: str) -> int:
        return self._index[branch_id]

    def lodf(self, k: int | str) -> np.ndarray:
        k = self._index[k] if isinstance(k, str) else k
        with self._lock:
            if k not in self._lodf:
                col = compute_lodf(self.ptdf, k, self.net.incidence)
                col.setflags(write=False)
                self._lodf[k] = col
            return self._lodf[k]

    def otdf(self, k: int | str) -> np.ndarray:
        k = self._index[k] if isinstance(k, str) else k
        lodf = self.lodf(k)
        with self._lock:
            if k not in self._otdf:
                mat = compute_otdf(self.ptdf, lodf, k)
                mat.setflags(write=False)
                self._otdf[k] = mat
            return self._otdf[k]

    def flows(self, injections: np.ndarray) -> np.ndarray:
        return self.ptdf @ injections

    def post_outage_flows(self, base_flows: np.ndarray, k: int | str) -> np.ndarray:
        k = self._index[k] if isinstance(k, str) else k
        out = base_flows + self.lodf(k) * base_flows[k]
        out[k] = 0.0
        return out

    def to_csv(self, which: str = "ptdf", k: int | str | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if which == "ptdf":
            w.writerow(["branch", *self.net.bus_ids])
            for bid, row in zip(self.net.branch_ids, self.ptdf):
                w.writerow([bid, *(f"{v:.12g}" for v in row)])
        elif which == "lodf":
            w.writerow(["branch", f"lodf[{k}]"])
            for bid, v in zip(self.net.branch_ids, self.lodf(k)):
                w.writerow([bid, f"{v:.12g}"])
        elif which == "otdf":
            w.writerow(["branch", *self.net.bus_ids])
            for bid, row in zip(self.net.branch_ids, self.otdf(k)):
                w.writerow([bid, *(f"{v:.12g}" for v in row)])
        else:
            raise ValueError(which)
        return buf.getvalue()


def active_limits(branch: Branch, kind: str = "base", st_factor: float | None = None) -> float:
    """Active-power limit (MW) from the MVA rating and reactive end flows.

    ``base``: sqrt(S_max^2 - max(Q_from, Q_to)^2).  ``contingency`` uses the
    short-term rating (``st_factor * S_max`` when a factor is given, else the
    branch's own short-term rating) and the post-contingency reactive flows,
    which fall back to the base-case values when absent.
    """
    if kind == "base":
        s, q_from, q_to = branch.rating_long_s, branch.q_from, branch.q_to
    elif kind == "contingency":
        s = branch.rating_long_s * st_factor if st_factor is not None else branch.rating_short_s
        q_from = branch.q_from if branch.q_from_ctg is None else branch.q_from_ctg
        q_to = branch.q_to if branch.q_to_ctg is None else branch.q_to_ctg
    else:
        raise ValueError(f"kind must be 'base' or 'contingency', not {kind!r}")
    q = max(q_from, q_to)
    rad = s * s - q * q
    if rad < 0:
        raise ReactiveLimitError(
            f"branch {branch.id!r}: reactive flow {q} exceeds {kind} rating {s}")
    return math.sqrt(rad)


def limits_vector(case: GridCase, kind: str, st_factor: float | None = None) -> np.ndarray:
    return np.array([active_limits(br, kind, st_factor) for br in case.branches])
