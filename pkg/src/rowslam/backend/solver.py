"""Robust batch optimization of the factor graph.

Linearization is vectorized over all stereo factors; the normal
equations are reduced by a Schur complement over the (block-diagonal)
landmark system and the remaining pose system is solved with a dense
Cholesky factorization. Two trust strategies share the machinery: a
Dogleg trust region (default) and Levenberg-Marquardt damping. Steps are
accepted only when the true robustified cost decreases, so the sequence
of accepted costs is non-increasing.

Poses are updated through the SE(3) exponential map on the right; the
Huber loss enters as IRLS weights on the whitened stereo residuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ..core import PoseSE3, TrajectoryEstimate
from .graph import BackendConfig, FactorGraphProblem
from .lie import retract, skew, so3_jr_inv, so3_log

_Z_FLOOR_M = 1e-6
_BLOCK_EPS = 1e-12

# Dogleg trust-region schedule: initial radius, growth / shrink factors,
# gain-ratio thresholds for applying them.
_TR_RADIUS0 = 1.0
_TR_GROW = 2.0
_TR_SHRINK = 0.25
_TR_GOOD = 0.75
_TR_BAD = 0.25

_LM_LAMBDA0 = 1e-4
_LM_UP = 10.0
_LM_DOWN = 0.1
_LM_MAX = 1e10


class UnderConstrainedError(RuntimeError):
    """The normal equations are singular; names the offending variable."""


class DivergenceError(RuntimeError):
    """The cost became non-finite. Carries the last good state."""

    def __init__(self, message: str, poses=None, landmarks=None):
        super().__init__(message)
        self.poses = poses
        self.landmarks = landmarks


@dataclass
class OptimizeResult:
    trajectory: TrajectoryEstimate
    landmarks: dict[int, np.ndarray]
    final_cost: float
    initial_cost: float
    iterations: int
    cost_history: list[float] = field(default_factory=list)
    deactivated_factors: int = 0
    converged: bool = False


class _State:
    """Mutable optimization state: stacked pose and landmark values."""

    def __init__(self, poses: list[PoseSE3], lm_ids: list[int],
                 lm_positions: np.ndarray):
        self.Rs = np.stack([p.rotation for p in poses]) if poses else np.zeros((0, 3, 3))
        self.ts = np.stack([p.translation for p in poses]) if poses else np.zeros((0, 3))
        self.lm_ids = lm_ids
        self.lms = lm_positions.copy()

    def copy(self) -> "_State":
        s = _State.__new__(_State)
        s.Rs = self.Rs.copy()
        s.ts = self.ts.copy()
        s.lm_ids = self.lm_ids
        s.lms = self.lms.copy()
        return s

    def apply_step(self, dp: np.ndarray, dl: np.ndarray) -> "_State":
        out = self.copy()
        n = len(self.Rs)
        for i in range(n):
            out.Rs[i], out.ts[i] = retract(self.Rs[i], self.ts[i],
                                           dp[6 * i:6 * i + 6])
        if len(dl):
            out.lms = self.lms + dl.reshape(-1, 3)
        return out

    def poses(self) -> list[PoseSE3]:
        return [PoseSE3(self.Rs[i], self.ts[i]) for i in range(len(self.Rs))]


def _batched_skew(p: np.ndarray) -> np.ndarray:
    m = len(p)
    s = np.zeros((m, 3, 3))
    s[:, 0, 1] = -p[:, 2]
    s[:, 0, 2] = p[:, 1]
    s[:, 1, 0] = p[:, 2]
    s[:, 1, 2] = -p[:, 0]
    s[:, 2, 0] = -p[:, 1]
    s[:, 2, 1] = p[:, 0]
    return s


class _Linearizer:
    """Builds the robust-weighted normal equations for one state."""

    def __init__(self, graph: FactorGraphProblem, cfg: BackendConfig,
                 lm_index: dict[int, int]):
        self.graph = graph
        self.cfg = cfg
        self.rig = graph.rig
        sf = graph.stereo_factors
        self.sf_pose = np.array([f.pose_index for f in sf], dtype=int)
        self.sf_lm = np.array([lm_index[f.landmark_id] for f in sf], dtype=int)
        self.sf_z = (np.stack([f.measured for f in sf])
                     if sf else np.zeros((0, 3)))
        self.n_deactivated = 0

    def stereo_cost_terms(self, state: _State):
        """Whitened robust residual norms and projection intermediates."""
        if len(self.sf_pose) == 0:
            z = np.zeros(0)
            return z, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, bool), z
        R = state.Rs[self.sf_pose]
        t = state.ts[self.sf_pose]
        l = state.lms[self.sf_lm]
        p = np.einsum("mji,mj->mi", R, l - t)  # R^T (l - t)
        valid = p[:, 2] > _Z_FLOOR_M
        zc = np.where(valid, p[:, 2], 1.0)
        rig = self.rig
        pred = np.empty_like(p)
        pred[:, 0] = rig.f * p[:, 0] / zc + rig.cx
        pred[:, 1] = rig.f * (p[:, 0] - rig.baseline_m) / zc + rig.cx
        pred[:, 2] = rig.f * p[:, 1] / zc + rig.cy
        r = (pred - self.sf_z) / self.cfg.pixel_sigma
        e = np.linalg.norm(r, axis=1)
        return e, r, p, valid, zc

    def cost(self, state: _State) -> float:
        e, _, _, valid, _ = self.stereo_cost_terms(state)
        k = self.cfg.huber_k
        robust = np.where(e <= k, 0.5 * e**2, k * e - 0.5 * k**2)
        total = float(robust[valid].sum())
        for r6 in self._prior_and_motion_residuals(state):
            total += 0.5 * float(r6 @ r6)
        return total

    def _prior_and_motion_residuals(self, state: _State):
        cfg = self.cfg
        graph = self.graph
        if graph.gauge_prior is not None and len(state.Rs):
            prior = graph.gauge_prior
            r_e = prior.rotation.T @ state.Rs[0]
            t_e = prior.rotation.T @ (state.ts[0] - prior.translation)
            r6 = np.concatenate([so3_log(r_e) / cfg.gauge_sigma,
                                 t_e / cfg.gauge_sigma])
            yield r6
        for f in graph.motion_factors:
            ri, ti = state.Rs[f.pose_i], state.ts[f.pose_i]
            rj, tj = state.Rs[f.pose_j], state.ts[f.pose_j]
            rz, tz = f.measured.rotation, f.measured.translation
            r_e = rz.T @ ri.T @ rj
            t_e = rz.T @ (ri.T @ (tj - ti) - tz)
            r6 = np.concatenate([so3_log(r_e) / cfg.motion_sigma_rot,
                                 f.whitener_t @ t_e])
            yield r6

    def normal_equations(self, state: _State):
        """Assemble H (block form), gradient g, and the current cost."""
        n_pose = len(state.Rs)
        n_lm = len(state.lms)
        np6 = 6 * n_pose
        nl3 = 3 * n_lm
        Hpp = np.zeros((np6, np6))
        Hpl = np.zeros((np6, nl3))
        Hll = np.zeros((n_lm, 3, 3))
        gp = np.zeros(np6)
        gl = np.zeros(nl3)
        cost = 0.0

        # stereo factors, vectorized
        if len(self.sf_pose):
            e, r, p, valid, zc = self.stereo_cost_terms(state)
            k = self.cfg.huber_k
            robust = np.where(e <= k, 0.5 * e**2, k * e - 0.5 * k**2)
            cost += float(robust[valid].sum())
            self.n_deactivated = int((~valid).sum())
            with np.errstate(divide="ignore", invalid="ignore"):
                w = np.where(e <= k, 1.0, k / np.maximum(e, 1e-300))
            scale = np.sqrt(w) / self.cfg.pixel_sigma
            scale = np.where(valid, scale, 0.0)

            rig = self.rig
            R = state.Rs[self.sf_pose]
            x, y = p[:, 0], p[:, 1]
            dh = np.zeros((len(p), 3, 3))
            dh[:, 0, 0] = rig.f / zc
            dh[:, 0, 2] = -rig.f * x / zc**2
            dh[:, 1, 0] = rig.f / zc
            dh[:, 1, 2] = -rig.f * (x - rig.baseline_m) / zc**2
            dh[:, 2, 1] = rig.f / zc
            dh[:, 2, 2] = -rig.f * y / zc**2

            jp = np.concatenate([dh @ _batched_skew(p), -dh], axis=2)  # (m,3,6)
            jl = dh @ R.transpose(0, 2, 1)  # (m,3,3)
            # r from stereo_cost_terms is already whitened; the raw
            # Jacobians take the full scale sqrt(w)/sigma
            sw = np.where(valid, np.sqrt(w), 0.0)
            jp = jp * scale[:, None, None]
            jl = jl * scale[:, None, None]
            rw = r * sw[:, None]

            hpp_blocks = np.einsum("mij,mik->mjk", jp, jp)
            hll_blocks = np.einsum("mij,mik->mjk", jl, jl)
            hpl_blocks = np.einsum("mij,mik->mjk", jp, jl)
            gp_blocks = np.einsum("mij,mi->mj", jp, rw)
            gl_blocks = np.einsum("mij,mi->mj", jl, rw)

            np.add.at(Hll, self.sf_lm, hll_blocks)
            pose_rows = 6 * self.sf_pose[:, None] + np.arange(6)[None, :]
            lm_cols = 3 * self.sf_lm[:, None] + np.arange(3)[None, :]
            hpp4 = np.zeros((n_pose, 6, 6))
            np.add.at(hpp4, self.sf_pose, hpp_blocks)
            for i in range(n_pose):
                Hpp[6 * i:6 * i + 6, 6 * i:6 * i + 6] += hpp4[i]
            np.add.at(Hpl, (pose_rows[:, :, None], lm_cols[:, None, :]), hpl_blocks)
            np.add.at(gp, pose_rows, gp_blocks)
            np.add.at(gl, lm_cols, gl_blocks)

        # gauge prior
        cfg = self.cfg
        graph = self.graph
        if graph.gauge_prior is not None and n_pose:
            prior = graph.gauge_prior
            r_e = prior.rotation.T @ state.Rs[0]
            t_e = prior.rotation.T @ (state.ts[0] - prior.translation)
            phi = so3_log(r_e)
            r6 = np.concatenate([phi, t_e]) / cfg.gauge_sigma
            j = np.zeros((6, 6))
            j[:3, :3] = so3_jr_inv(phi)
            j[3:, 3:] = prior.rotation.T @ state.Rs[0]
            j /= cfg.gauge_sigma
            Hpp[:6, :6] += j.T @ j
            gp[:6] += j.T @ r6
            cost += 0.5 * float(r6 @ r6)

        # motion factors
        for f in graph.motion_factors:
            ri, ti = state.Rs[f.pose_i], state.ts[f.pose_i]
            rj, tj = state.Rs[f.pose_j], state.ts[f.pose_j]
            rz, tz = f.measured.rotation, f.measured.translation
            r_e = rz.T @ ri.T @ rj
            a = ri.T @ (tj - ti)
            t_e = rz.T @ (a - tz)
            phi = so3_log(r_e)
            jri = so3_jr_inv(phi)
            wr = 1.0 / cfg.motion_sigma_rot
            wt = f.whitener_t
            r6 = np.concatenate([phi * wr, wt @ t_e])

            ji = np.zeros((6, 6))
            jj = np.zeros((6, 6))
            ji[:3, :3] = (-jri @ rj.T @ ri) * wr
            jj[:3, :3] = jri * wr
            ji[3:, :3] = wt @ rz.T @ skew(a)
            ji[3:, 3:] = wt @ (-rz.T)
            jj[3:, 3:] = wt @ rz.T @ ri.T @ rj

            si = slice(6 * f.pose_i, 6 * f.pose_i + 6)
            sj = slice(6 * f.pose_j, 6 * f.pose_j + 6)
            Hpp[si, si] += ji.T @ ji
            Hpp[sj, sj] += jj.T @ jj
            Hpp[si, sj] += ji.T @ jj
            Hpp[sj, si] += jj.T @ ji
            gp[si] += ji.T @ r6
            gp[sj] += jj.T @ r6
            cost += 0.5 * float(r6 @ r6)

        return Hpp, Hpl, Hll, gp, gl, cost


def _solve_reduced(Hpp, Hpl, Hll, gp, gl, lm_ids, lam: float = 0.0):
    """Gauss-Newton (or damped) step via Schur complement over landmarks."""
    n_lm = len(Hll)
    np6 = Hpp.shape[0]
    Hpp_d = Hpp.copy()
    if lam > 0.0:
        Hpp_d[np.diag_indices(np6)] += lam * np.maximum(np.diag(Hpp), _BLOCK_EPS)
    if n_lm:
        Hll_d = Hll.copy()
        if lam > 0.0:
            diag = np.einsum("lii->li", Hll)
            for k in range(3):
                Hll_d[:, k, k] += lam * np.maximum(diag[:, k], _BLOCK_EPS)
        dets = np.linalg.det(Hll_d)
        degenerate = dets <= _BLOCK_EPS
        if degenerate.any():
            idx = int(np.argmax(degenerate))
            grad = gl.reshape(-1, 3)[degenerate]
            if np.abs(grad).max() > 1e-9:
                raise UnderConstrainedError(
                    f"landmark {lm_ids[idx]} is under-constrained "
                    "(singular normal-equation block)"
                )
            # deactivated landmarks: freeze them this iteration
            Hll_d[degenerate] = np.eye(3)
        Hll_inv = np.linalg.inv(Hll_d)
        M = Hpl.reshape(np6, n_lm, 3)
        T = np.einsum("alk,lkj->alj", M, Hll_inv)
        Tf = T.reshape(np6, 3 * n_lm)
        S = Hpp_d - Tf @ Hpl.T
        rhs = -(gp - Tf @ gl)
    else:
        S = Hpp_d
        rhs = -gp
    try:
        c, low = scipy.linalg.cho_factor(S, lower=True)
        dp = scipy.linalg.cho_solve((c, low), rhs)
    except np.linalg.LinAlgError as exc:
        diag = np.diag(S)
        pose = int(np.argmin(diag)) // 6
        raise UnderConstrainedError(
            f"pose {pose} is under-constrained (Cholesky failed: {exc})"
        ) from exc
    if n_lm:
        hlp_dp = np.einsum("alj,a->lj", M, dp)
        dl = -np.einsum("lij,lj->li", Hll_inv, gl.reshape(-1, 3) + hlp_dp)
        dl = dl.reshape(-1)
    else:
        dl = np.zeros(0)
    return dp, dl


def _h_times(Hpp, Hpl, Hll, vp, vl):
    n_lm = len(Hll)
    hp = Hpp @ vp
    if n_lm:
        hp = hp + Hpl @ vl
        hl = Hpl.T @ vp + np.einsum("lij,lj->li", Hll, vl.reshape(-1, 3)).reshape(-1)
    else:
        hl = np.zeros(0)
    return hp, hl


def _predicted_reduction(gp, gl, Hpp, Hpl, Hll, dp, dl) -> float:
    hp, hl = _h_times(Hpp, Hpl, Hll, dp, dl)
    lin = float(gp @ dp) + (float(gl @ dl) if len(dl) else 0.0)
    quad = 0.5 * (float(dp @ hp) + (float(dl @ hl) if len(dl) else 0.0))
    return -(lin + quad)


def _dogleg_step(gp, gl, Hpp, Hpl, Hll, dp_gn, dl_gn, radius: float):
    gn_norm = float(np.sqrt(dp_gn @ dp_gn + (dl_gn @ dl_gn if len(dl_gn) else 0.0)))
    if gn_norm <= radius:
        return dp_gn, dl_gn
    g_sq = float(gp @ gp) + (float(gl @ gl) if len(gl) else 0.0)
    hgp, hgl = _h_times(Hpp, Hpl, Hll, gp, gl)
    g_h_g = float(gp @ hgp) + (float(gl @ hgl) if len(gl) else 0.0)
    if g_h_g <= 0:
        s = radius / np.sqrt(g_sq)
        return -s * gp, (-s * gl if len(gl) else gl)
    alpha = g_sq / g_h_g
    sd_p, sd_l = -alpha * gp, -alpha * gl
    sd_norm = alpha * np.sqrt(g_sq)
    if sd_norm >= radius:
        s = radius / sd_norm
        return s * sd_p, (s * sd_l if len(sd_l) else sd_l)
    # blend: ||sd + beta (gn - sd)|| = radius
    diff_p = dp_gn - sd_p
    diff_l = dl_gn - sd_l if len(dl_gn) else dl_gn
    a = float(diff_p @ diff_p) + (float(diff_l @ diff_l) if len(diff_l) else 0.0)
    b = 2.0 * (float(sd_p @ diff_p) + (float(sd_l @ diff_l) if len(sd_l) else 0.0))
    c = sd_norm**2 - radius**2
    beta = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
    return sd_p + beta * diff_p, (sd_l + beta * diff_l if len(sd_l) else sd_l)


def optimize(graph: FactorGraphProblem, cfg: BackendConfig | None = None) -> OptimizeResult:
    """Batch-optimize the graph; returns trajectory, landmark map and cost.

    The accepted-cost sequence is non-increasing; iteration stops on the
    configured relative cost decrease, on ``max_iterations``, or when the
    trust region / damping can make no further progress.
    """
    cfg = cfg if cfg is not None else graph.cfg
    graph.validate()
    lm_ids = sorted(graph.landmarks.keys())
    lm_index = {lid: i for i, lid in enumerate(lm_ids)}
    lm_positions = (np.stack([graph.landmarks[i] for i in lm_ids])
                    if lm_ids else np.zeros((0, 3)))
    state = _State(graph.poses, lm_ids, lm_positions)
    lin = _Linearizer(graph, cfg, lm_index)

    cost = lin.cost(state)
    if not np.isfinite(cost):
        raise DivergenceError("initial cost is non-finite",
                              poses=state.poses(),
                              landmarks=dict(zip(lm_ids, state.lms)))
    history = [cost]
    radius = _TR_RADIUS0
    lam = _LM_LAMBDA0
    use_dogleg = cfg.optimizer == "dogleg"
    converged = False
    iterations = 0

    for iterations in range(1, cfg.max_iterations + 1):
        Hpp, Hpl, Hll, gp, gl, cost = lin.normal_equations(state)
        gmax = max(np.abs(gp).max(initial=0.0), np.abs(gl).max(initial=0.0))
        if cost < 1e-18 or gmax < 1e-12:
            converged = True
            break

        stepped = False
        if use_dogleg:
            dp_gn, dl_gn = _solve_reduced(Hpp, Hpl, Hll, gp, gl, lm_ids)
        for _ in range(30):  # inner retries at shrinking trust
            if use_dogleg:
                dp, dl = _dogleg_step(gp, gl, Hpp, Hpl, Hll, dp_gn, dl_gn, radius)
            else:
                dp, dl = _solve_reduced(Hpp, Hpl, Hll, gp, gl, lm_ids, lam=lam)
            pred = _predicted_reduction(gp, gl, Hpp, Hpl, Hll, dp, dl)
            if pred <= 1e-18:
                converged = True
                break
            trial = state.apply_step(dp, dl)
            trial_cost = lin.cost(trial)
            rho = (cost - trial_cost) / pred if pred > 0 else -1.0
            accept = np.isfinite(trial_cost) and trial_cost < cost
            if use_dogleg:
                if rho > _TR_GOOD:
                    radius *= _TR_GROW
                elif rho < _TR_BAD:
                    radius *= _TR_SHRINK
                if radius < 1e-14:
                    converged = True
                    break
            else:
                if accept:
                    lam = max(lam * _LM_DOWN, 1e-12)
                else:
                    lam *= _LM_UP
                    if lam > _LM_MAX:
                        converged = True
                        break
            if accept:
                rel = (cost - trial_cost) / max(cost, 1e-300)
                state = trial
                history.append(trial_cost)
                cost = trial_cost
                stepped = True
                if rel < cfg.convergence_tol:
                    converged = True
                break
        if converged or not stepped:
            break

    final_poses = state.poses()
    landmarks = {lid: state.lms[i].copy() for i, lid in enumerate(lm_ids)}
    if lin.n_deactivated:
        warnings.warn(
            f"{lin.n_deactivated} stereo factors deactivated (point behind camera)",
            RuntimeWarning, stacklevel=2)
    trajectory = TrajectoryEstimate(list(range(len(final_poses))), final_poses)
    return OptimizeResult(
        trajectory=trajectory,
        landmarks=landmarks,
        final_cost=cost,
        initial_cost=history[0],
        iterations=iterations,
        cost_history=history,
        deactivated_factors=lin.n_deactivated,
        converged=converged,
    )
