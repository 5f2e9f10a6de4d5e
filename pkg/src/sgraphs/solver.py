"""Batched Levenberg-Marquardt over the situational graph.

Residuals are evaluated per factor kind on stacked state arrays. Jacobians of
the floor and duplicate-plane factors are analytic; the others use central
differences on the manifold, perturbing one tangent coordinate of one slot
for every factor of the kind at once.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import minimal_to_normal, normal_to_minimal, normalize_minimal
from .graph import FactorKind, GaugeError, NodeKind, SituationalGraph, SolverOptions, SolverReport

# --------------------------------------------------------------------------- #
# Batched SO(3)
# --------------------------------------------------------------------------- #


def exp_batch(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1, 3)
    th = np.linalg.norm(w, axis=1)
    small = th < 1e-8
    th_safe = np.where(small, 1.0, th)
    A = np.where(small, 1.0 - th**2 / 6.0, np.sin(th) / th_safe)
    B = np.where(small, 0.5 - th**2 / 24.0, (1.0 - np.cos(th)) / th_safe**2)
    K = np.zeros((len(w), 3, 3))
    K[:, 0, 1], K[:, 0, 2] = -w[:, 2], w[:, 1]
    K[:, 1, 0], K[:, 1, 2] = w[:, 2], -w[:, 0]
    K[:, 2, 0], K[:, 2, 1] = -w[:, 1], w[:, 0]
    return np.eye(3)[None] + A[:, None, None] * K + B[:, None, None] * (K @ K)


def log_batch(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    tr = np.trace(R, axis1=1, axis2=2)
    c = np.clip(0.5 * (tr - 1.0), -1.0, 1.0)
    th = np.arccos(c)
    v = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    s = np.sin(th)
    small = th < 1e-6
    scale = np.where(small, 0.5 + th**2 / 12.0, th / (2.0 * np.where(small, 1.0, s)))
    out = v * scale[:, None]
    near_pi = th > np.pi - 1e-4
    if np.any(near_pi):
        from scipy.spatial.transform import Rotation

        out[near_pi] = Rotation.from_matrix(R[near_pi]).as_rotvec()
    return out


# --------------------------------------------------------------------------- #
# Batched residuals: every slot is an array stacked over factors
# --------------------------------------------------------------------------- #


def _wrap(a):
    return np.mod(a + np.pi, 2.0 * np.pi) - np.pi


def res_odometry(slots, meas):
    (Ri, ti), (Rj, tj) = slots
    Rm, tm = meas
    Rrel = np.einsum("mji,mjk->mik", Ri, Rj)
    trel = np.einsum("mji,mj->mi", Ri, tj - ti)
    ER = np.einsum("mji,mjk->mik", Rm, Rrel)
    Et = np.einsum("mji,mj->mi", Rm, trel - tm)
    return np.concatenate([log_batch(ER), Et], axis=1)


def res_pose_plane(slots, meas):
    (R, t), a = slots
    n_m = minimal_to_normal(a[:, :2])
    n_b = np.einsum("mji,mj->mi", R, n_m)
    d_b = a[:, 2] + np.einsum("mi,mi->m", n_m, t)
    pt = normal_to_minimal(n_b)
    r = np.empty((len(a), 3))
    r[:, 0] = _wrap(pt[:, 0] - meas[:, 0])
    r[:, 1] = _wrap(pt[:, 1] - meas[:, 1])
    r[:, 2] = d_b - meas[:, 2]
    return r


def _closest_points(a):
    """``-d n`` per plane row: equals ``|d| n`` after pointing n away from the origin."""
    return -a[:, 2:3] * minimal_to_normal(a[:, :2])


def _pair_midpoint(a, b):
    return 0.5 * (_closest_points(a) + _closest_points(b))


def res_four_wall(slots, meas):
    room, xa, xb, ya, yb = slots
    f = _pair_midpoint(xa, xb) + _pair_midpoint(ya, yb)
    return room - f[:, :2]


def res_two_wall(slots, meas):
    room, a, b = slots
    r = _pair_midpoint(a, b)
    c = np.zeros((len(room), 3))
    c[:, :2] = meas
    nr = np.linalg.norm(r, axis=1)
    degenerate = nr < 1e-12
    rh = r / np.where(degenerate, 1.0, nr)[:, None]
    k = r + c - np.einsum("mi,mi->m", c, rh)[:, None] * rh
    k[degenerate] = c[degenerate]
    return room - k[:, :2]


def res_floor(slots, meas):
    floor, room = slots
    return meas - (room - floor)


def res_duplicate(slots, meas):
    p, q = slots
    r = p - q
    r[:, :2] = _wrap(r[:, :2])
    return r


_RESIDUALS = {
    FactorKind.ODOMETRY: res_odometry,
    FactorKind.POSE_PLANE: res_pose_plane,
    FactorKind.FOUR_WALL_ROOM: res_four_wall,
    FactorKind.TWO_WALL_ROOM: res_two_wall,
    FactorKind.FLOOR_ROOM: res_floor,
    FactorKind.DUPLICATE_PLANE: res_duplicate,
}

#: residual components that are angles (finite differences wrap them)
_ANGULAR = {FactorKind.POSE_PLANE: [0, 1], FactorKind.DUPLICATE_PLANE: [0, 1]}


# --------------------------------------------------------------------------- #
# Stacked state
# --------------------------------------------------------------------------- #


class _State:
    """Arrays for every node, plus tangent column offsets for free nodes."""

    def __init__(self, graph: SituationalGraph, active: set[int]):
        self.ids = sorted(active)
        self.kind = {i: graph.nodes[i].kind for i in self.ids}
        self.index: dict[int, int] = {}
        poses, planes, vecs = [], [], []
        for i in self.ids:
            k = self.kind[i]
            s = graph.nodes[i].state
            if k is NodeKind.KEYFRAME:
                self.index[i] = len(poses)
                poses.append(s)
            elif k is NodeKind.WALL:
                self.index[i] = len(planes)
                planes.append(s)
            else:
                self.index[i] = len(vecs)
                vecs.append(s)
        poses = np.array(poses).reshape(-1, 7)
        from scipy.spatial.transform import Rotation

        self.R = Rotation.from_quat(poses[:, 3:]).as_matrix().reshape(-1, 3, 3) if len(poses) else np.zeros((0, 3, 3))
        self.t = poses[:, :3].copy()
        self.planes = np.array(planes, dtype=float).reshape(-1, 3)
        self.vecs = np.array(vecs, dtype=float).reshape(-1, 2)
        self.col: dict[int, int] = {}
        n = 0
        for i in self.ids:
            if not graph.nodes[i].fixed:
                self.col[i] = n
                n += self.kind[i].tangent_dim
        self.ncols = n

    def copy(self) -> "_State":
        s = object.__new__(_State)
        s.__dict__.update(self.__dict__)
        s.R, s.t, s.planes, s.vecs = self.R.copy(), self.t.copy(), self.planes.copy(), self.vecs.copy()
        return s

    def gather(self, node_ids: np.ndarray, kinds) -> object:
        idx = np.array([self.index[i] for i in node_ids], dtype=int)
        k0 = self.kind[node_ids[0]] if len(node_ids) else None
        if k0 is NodeKind.KEYFRAME:
            return (self.R[idx], self.t[idx])
        if k0 is NodeKind.WALL:
            return self.planes[idx]
        return self.vecs[idx]

    def retract(self, delta: np.ndarray) -> "_State":
        s = self.copy()
        for i, c in self.col.items():
            k, j = self.kind[i], self.index[i]
            if k is NodeKind.KEYFRAME:
                d = delta[c : c + 6]
                s.t[j] = self.t[j] + self.R[j] @ d[3:]
                s.R[j] = self.R[j] @ exp_batch(d[:3])[0]
            elif k is NodeKind.WALL:
                s.planes[j] = normalize_minimal(self.planes[j] + delta[c : c + 3])
            else:
                s.vecs[j] = self.vecs[j] + delta[c : c + 2]
        return s

    def write_back(self, graph: SituationalGraph) -> None:
        from scipy.spatial.transform import Rotation

        for i in self.ids:
            node = graph.nodes[i]
            if node.fixed:
                continue
            k, j = self.kind[i], self.index[i]
            if k is NodeKind.KEYFRAME:
                q = Rotation.from_matrix(self.R[j]).as_quat()
                if q[3] < 0:
                    q = -q
                node.state = np.concatenate([self.t[j], q])
            elif k is NodeKind.WALL:
                node.state = self.planes[j].copy()
            else:
                node.state = self.vecs[j].copy()


class _Group:
    """All factors of one kind, with precomputed whitening."""

    def __init__(self, kind: FactorKind, factors, row0: int):
        self.kind = kind
        self.nodes = np.array([f.nodes for f in factors], dtype=int)
        m = len(factors)
        meas = np.array([f.measurement for f in factors], dtype=float).reshape(m, -1)
        if kind is FactorKind.ODOMETRY:
            from scipy.spatial.transform import Rotation

            self.meas = (Rotation.from_quat(meas[:, 3:7]).as_matrix().reshape(m, 3, 3), meas[:, :3])
        else:
            self.meas = meas
        info = np.array([f.information for f in factors])
        # Lambda = L L^T, whitened residual e = L^T r
        self.LT = np.transpose(np.linalg.cholesky(info), (0, 2, 1))
        self.dim = kind.dim
        self.rows = row0 + np.arange(m)[:, None] * self.dim + np.arange(self.dim)[None, :]

    def slots(self, st: _State):
        return [st.gather(self.nodes[:, s], None) for s in range(self.nodes.shape[1])]

    def residual(self, st: _State, slots=None):
        return _RESIDUALS[self.kind](slots if slots is not None else self.slots(st), self.meas)

    def whiten(self, r):
        return np.einsum("mij,mj->mi", self.LT, r)

    def jacobians(self, st: _State, h: float):
        """List over slots of (m, dim, tangent_dim) blocks."""
        slots = self.slots(st)
        m = len(self.nodes)
        if self.kind is FactorKind.FLOOR_ROOM:
            eye = np.broadcast_to(np.eye(2), (m, 2, 2))
            return [eye.copy(), -eye]
        if self.kind is FactorKind.DUPLICATE_PLANE:
            eye = np.broadcast_to(np.eye(3), (m, 3, 3))
            return [eye.copy(), -eye]
        ang = _ANGULAR.get(self.kind, [])
        out = []
        for s, val in enumerate(slots):
            kind = self.kind_of_slot(st, s)
            td = kind.tangent_dim
            J = np.empty((m, self.dim, td))
            for k in range(td):
                plus = list(slots)
                minus = list(slots)
                plus[s] = _perturb(val, kind, k, h)
                minus[s] = _perturb(val, kind, k, -h)
                diff = self.residual(st, plus) - self.residual(st, minus)
                if ang:
                    diff[:, ang] = _wrap(diff[:, ang])
                J[:, :, k] = diff / (2.0 * h)
            out.append(J)
        return out

    def kind_of_slot(self, st: _State, s: int) -> NodeKind:
        return st.kind[int(self.nodes[0, s])]


def _perturb(val, kind: NodeKind, k: int, h: float):
    if kind is NodeKind.KEYFRAME:
        R, t = val
        if k < 3:
            w = np.zeros(3)
            w[k] = h
            return (R @ exp_batch(w)[0], t)
        e = np.zeros(3)
        e[k - 3] = h
        return (R, t + R @ e)
    out = val.copy()
    out[:, k] += h
    return out


# --------------------------------------------------------------------------- #
# LM
# --------------------------------------------------------------------------- #


class Problem:
    def __init__(self, graph: SituationalGraph, opts: SolverOptions):
        self.graph = graph
        self.opts = opts
        active = set()
        for f in graph.factors:
            active.update(f.nodes)
        self.state = _State(graph, active)
        self.groups: list[_Group] = []
        row = 0
        for kind in FactorKind:
            fs = graph.factors_of(kind)
            if fs:
                g = _Group(kind, fs, row)
                self.groups.append(g)
                row += len(fs) * kind.dim
        self.nrows = row

    def _robust_weights(self, e: np.ndarray) -> np.ndarray:
        if self.opts.huber is None:
            return np.ones(len(e))
        k = self.opts.huber
        n = np.linalg.norm(e, axis=1)
        return np.where(n <= k, 1.0, np.sqrt(k / np.maximum(n, 1e-300)))

    def _rho(self, e: np.ndarray) -> np.ndarray:
        s = np.einsum("mi,mi->m", e, e)
        if self.opts.huber is None:
            return s
        k = self.opts.huber
        n = np.sqrt(s)
        return np.where(n <= k, s, 2.0 * k * n - k * k)

    def cost(self, st: _State) -> float:
        c = 0.0
        for g in self.groups:
            c += float(self._rho(g.whiten(g.residual(st))).sum())
        return c

    def linearize(self, st: _State):
        rows, cols, vals = [], [], []
        e_all = np.zeros(self.nrows)
        for g in self.groups:
            e = g.whiten(g.residual(st))
            w = self._robust_weights(e)
            e_all[g.rows.ravel()] = (e * w[:, None]).ravel()
            for s, J in enumerate(g.jacobians(st, self.opts.fd_step)):
                col0 = np.array([st.col.get(int(i), -1) for i in g.nodes[:, s]])
                keep = col0 >= 0
                if not np.any(keep):
                    continue
                Jw = np.einsum("mij,mjk->mik", g.LT[keep], J[keep]) * w[keep, None, None]
                td = J.shape[2]
                r = np.broadcast_to(g.rows[keep][:, :, None], Jw.shape)
                c = np.broadcast_to(col0[keep][:, None, None] + np.arange(td)[None, None, :], Jw.shape)
                rows.append(r.ravel())
                cols.append(c.ravel())
                vals.append(Jw.ravel())
        if rows:
            J = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.nrows, st.ncols)
            )
        else:
            J = sp.csr_matrix((self.nrows, st.ncols))
        return J, e_all


def optimize(graph: SituationalGraph, opts: SolverOptions) -> SolverReport:
    """Levenberg-Marquardt with multiplicative damping; writes the solution back into ``graph``."""
    graph.check_gauge()
    prob = Problem(graph, opts)
    st = prob.state
    cost = prob.cost(st)
    initial = cost
    history = [cost]
    if st.ncols == 0 or prob.nrows == 0:
        return SolverReport(0, initial, cost, True, "CostTol", history)
    lam = opts.lambda_init
    termination = "MaxIter"
    converged = False
    it = 0
    while it < opts.max_iter:
        it += 1
        if cost <= opts.abs_cost_tol:
            termination, converged = "CostTol", True
            break
        J, e = prob.linearize(st)
        H = (J.T @ J).tocsc()
        g = J.T @ e
        if np.linalg.norm(g, np.inf) < opts.grad_tol:
            termination, converged = "GradTol", True
            break
        diag = np.maximum(H.diagonal(), 1e-9)
        accepted = False
        while lam <= opts.lambda_max:
            A = H + sp.diags(lam * diag, format="csc")
            try:
                delta = spla.spsolve(A, -g)
            except RuntimeError:
                delta = None
            if delta is None or not np.all(np.isfinite(delta)):
                lam *= opts.lambda_factor
                continue
            trial = st.retract(delta)
            new_cost = prob.cost(trial)
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            lam *= opts.lambda_factor
        if not accepted:
            termination, converged = "CostTol", True
            break
        rel = (cost - new_cost) / max(cost, 1e-300)
        st, cost = trial, new_cost
        history.append(cost)
        lam = max(lam / opts.lambda_factor, 1e-15)
        if rel < opts.cost_tol or cost < 1e-30:
            termination, converged = "CostTol", True
            break
    st.write_back(graph)
    return SolverReport(it, initial, cost, converged, termination, history)


def total_cost(graph: SituationalGraph) -> float:
    """Batched total cost (no robust kernel)."""
    active = set()
    for f in graph.factors:
        active.update(f.nodes)
    if not graph.factors:
        return 0.0
    prob = Problem(graph, SolverOptions())
    return prob.cost(prob.state)


def factor_jacobians(graph: SituationalGraph, factor_index: int, h: float = 1e-6):
    """Unwhitened solver Jacobian blocks for one factor (list over its nodes)."""
    f = graph.factors[factor_index]
    sub = SituationalGraph()
    sub.nodes = graph.nodes
    sub.factors = [f]
    st = _State(sub, set(f.nodes))
    grp = _Group(f.kind, [f], 0)
    return [J[0] for J in grp.jacobians(st, h)]


__all__ = ["optimize", "total_cost", "factor_jacobians", "GaugeError", "exp_batch", "log_batch"]
