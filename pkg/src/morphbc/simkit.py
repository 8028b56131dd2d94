"""Planar articulated-body simulator with scripted experts and demo buffers.

Embodiments are kinematic trees of hinge / slide / free joints moving in the
x-y plane (gravity along -y). Dynamics use exact Newton-Euler inverse dynamics
in world frame; the mass matrix is assembled column-wise from unit-acceleration
passes and integration is semi-implicit Euler. Tasks carry bounded per-step
rewards that are used only for expert filtering and scoring, never by the
learner.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

HINGE, SLIDE, FREE = "hinge", "slide", "free"
JOINT_KINDS = (HINGE, SLIDE, FREE)

DEMO_MAGIC = b"MCD1"

# Seed convention: evaluation seeds live below 1000, demonstration seeds at or
# above 1000 (asserted where each is consumed).
DEMO_SEED_BASE = 1000
REF_SEED_BASE = 100  # reference-return rollouts, inside the eval (<1000) space


class SimSpecError(ValueError):
    """Invalid embodiment or task specification."""


class CyclicTree(SimSpecError):
    pass


class NonUnitAxis(SimSpecError):
    pass


class NegativeParameter(SimSpecError):
    pass


class NonFiniteState(ArithmeticError):
    """Integration diverged (dt too large for the given gains)."""


class InsufficientDemos(RuntimeError):
    """More than half of the expert rollouts fell below the return filter."""


# ---------------------------------------------------------------------------
# Specs


@dataclass(frozen=True)
class JointSpec:
    id: int
    kind: str                      # hinge | slide | free
    parent: Optional[int]          # parent joint id, None for the root
    axis: tuple                    # 2D unit vector
    link_length: float             # link length (hinge/free) or travel range (slide)
    damping: float = 0.0
    gear: float = 0.0              # max torque (hinge) / max force (slide); 0 for free
    position_limits: Optional[tuple] = None


@dataclass(frozen=True)
class EmbodimentSpec:
    name: str
    joints: tuple                  # ordered JointSpec entries; order is the token order
    link_masses: tuple             # kg per link, aligned with joints
    gravity: float = 9.81          # m/s^2, acting along -y
    control_dt: float = 0.01
    extrasensory_dim: int = 0

    @property
    def n_joints(self) -> int:
        return len(self.joints)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str                      # reach | swingup | balance
    horizon: int = 500
    goal_sampler: dict = field(default_factory=dict)   # seeded distribution params
    reward: dict = field(default_factory=dict)         # per-kind reward params

    def __post_init__(self):
        if self.kind not in ("reach", "swingup", "balance"):
            raise SimSpecError(f"unknown task kind {self.kind!r}")
        if self.horizon <= 0:
            raise SimSpecError("horizon must be positive")


@dataclass
class SimState:
    q: np.ndarray
    qdot: np.ndarray
    goal: np.ndarray               # extrasensory goal parameters (may be empty)
    t: int = 0

    def copy(self) -> "SimState":
        return SimState(self.q.copy(), self.qdot.copy(), self.goal.copy(), self.t)


# ---------------------------------------------------------------------------
# Embodiment handle with precomputed kinematic arrays


class Embodiment:
    """Validated embodiment with flattened per-joint arrays for the dynamics."""

    def __init__(self, spec: EmbodimentSpec):
        self.spec = spec
        J = spec.n_joints
        if J < 1:
            raise SimSpecError("embodiment needs at least one joint")
        if len(spec.link_masses) != J:
            raise SimSpecError("link_masses must align with joints")
        if spec.control_dt <= 0:
            raise SimSpecError("control_dt must be positive")
        if spec.extrasensory_dim < 0:
            raise SimSpecError("extrasensory_dim must be >= 0")

        ids = [j.id for j in spec.joints]
        if len(set(ids)) != J:
            raise SimSpecError("joint ids must be unique")
        by_id = {j.id: j for j in spec.joints}
        index_of = {j.id: i for i, j in enumerate(spec.joints)}

        for j in spec.joints:
            if j.kind not in JOINT_KINDS:
                raise SimSpecError(f"joint {j.id}: unknown kind {j.kind!r}")
            ax = np.asarray(j.axis, dtype=np.float64)
            if ax.shape != (2,) or abs(float(np.linalg.norm(ax)) - 1.0) > 1e-9:
                raise NonUnitAxis(f"joint {j.id}: axis {tuple(j.axis)} is not unit length")
            if j.gear < 0 or j.damping < 0 or j.link_length < 0:
                raise NegativeParameter(f"joint {j.id}: gear/damping/link_length must be >= 0")
            if j.kind == FREE and j.gear != 0:
                raise SimSpecError(f"joint {j.id}: free joints must have gear = 0")
            if j.parent is not None and j.parent not in by_id:
                raise SimSpecError(f"joint {j.id}: parent {j.parent} does not exist")
            if j.position_limits is not None:
                lo, hi = j.position_limits
                if not lo < hi:
                    raise SimSpecError(f"joint {j.id}: position_limits must satisfy lo < hi")

        roots = [j for j in spec.joints if j.parent is None]
        if len(roots) != 1:
            raise SimSpecError(f"expected exactly one root joint, found {len(roots)}")

        # Cycle check: walk to the root from every joint.
        for j in spec.joints:
            seen = set()
            node = j
            while node.parent is not None:
                if node.id in seen:
                    raise CyclicTree(f"joint {j.id} participates in a parent cycle")
                seen.add(node.id)
                node = by_id[node.parent]

        self.n_joints = J
        self.kinds = [j.kind for j in spec.joints]
        self.parent = np.array(
            [-1 if j.parent is None else index_of[j.parent] for j in spec.joints], dtype=int
        )
        self.axis = np.array([j.axis for j in spec.joints], dtype=np.float64)
        self.axis_angle = np.arctan2(self.axis[:, 1], self.axis[:, 0])
        self.length = np.array([j.link_length for j in spec.joints], dtype=np.float64)
        self.damping = np.array([j.damping for j in spec.joints], dtype=np.float64)
        self.gear = np.array([j.gear for j in spec.joints], dtype=np.float64)
        self.mass = np.array(spec.link_masses, dtype=np.float64)
        self.limit_lo = np.array(
            [-np.inf if j.position_limits is None else j.position_limits[0] for j in spec.joints]
        )
        self.limit_hi = np.array(
            [np.inf if j.position_limits is None else j.position_limits[1] for j in spec.joints]
        )
        self.is_hinge = np.array([k == HINGE for k in self.kinds])
        self.is_slide = np.array([k == SLIDE for k in self.kinds])
        self.is_free = np.array([k == FREE for k in self.kinds])
        self.rotational = ~self.is_slide            # hinge and free rotate
        self.actuated = (self.gear > 0) & ~self.is_free

        # Topological order (parents before children).
        order, pending = [], list(range(J))
        placed = set()
        while pending:
            progressed = False
            for i in list(pending):
                p = self.parent[i]
                if p < 0 or p in placed:
                    order.append(i)
                    placed.add(i)
                    pending.remove(i)
                    progressed = True
            if not progressed:  # unreachable given the cycle check above
                raise CyclicTree("joint tree is not topologically orderable")
        self.topo = order
        self.children = [[] for _ in range(J)]
        for i in range(J):
            if self.parent[i] >= 0:
                self.children[self.parent[i]].append(i)

        # Rod links for rotating joints (COM at L/2, I = mL^2/12); point mass
        # bodies for slides.
        self.com_local = np.zeros((J, 2))
        self.inertia_com = np.zeros(J)
        for i in range(J):
            if self.rotational[i]:
                self.com_local[i, 0] = self.length[i] / 2.0
                self.inertia_com[i] = self.mass[i] * self.length[i] ** 2 / 12.0

        # Reach of the articulated tip: total rotating-link length on the
        # longest root-to-leaf path.
        self.tip_joint = max(range(J), key=self._depth)
        self.total_reach = float(
            sum(self.length[i] for i in self._chain_to(self.tip_joint) if self.rotational[i])
        )

    def _depth(self, i: int) -> int:
        d, p = 0, self.parent[i]
        while p >= 0:
            d, p = d + 1, self.parent[p]
        return d

    def _chain_to(self, i: int) -> list:
        chain = [i]
        while self.parent[chain[-1]] >= 0:
            chain.append(self.parent[chain[-1]])
        return chain[::-1]

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_joints + self.spec.extrasensory_dim


def build_embodiment(spec: EmbodimentSpec) -> Embodiment:
    """Validate a spec and precompute its kinematic arrays."""
    return Embodiment(spec)


# ---------------------------------------------------------------------------
# Kinematics and dynamics


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def _perp(v):
    # z-hat cross v for 2D vectors; supports (..., 2) arrays.
    out = np.empty_like(v)
    out[..., 0] = -v[..., 1]
    out[..., 1] = v[..., 0]
    return out


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def forward_kinematics(emb: Embodiment, q: np.ndarray):
    """World-frame orientation, joint origin, COM and link tip per body."""
    J = emb.n_joints
    alpha = np.zeros(J)
    origin = np.zeros((J, 2))
    for i in emb.topo:
        p = emb.parent[i]
        p_alpha = alpha[p] if p >= 0 else 0.0
        p_origin = origin[p] if p >= 0 else np.zeros(2)
        attach = _attach_offset(emb, i)
        base = p_origin + _rot(p_alpha) @ attach
        if emb.is_slide[i]:
            alpha[i] = p_alpha
            origin[i] = base + q[i] * (_rot(p_alpha) @ emb.axis[i])
        else:
            alpha[i] = p_alpha + emb.axis_angle[i] + q[i]
            origin[i] = base
    com = origin + np.stack([_rot(alpha[i]) @ emb.com_local[i] for i in range(J)])
    tip = origin + np.stack(
        [_rot(alpha[i]) @ np.array([emb.length[i] if emb.rotational[i] else 0.0, 0.0])
         for i in range(J)]
    )
    return alpha, origin, com, tip


def _attach_offset(emb: Embodiment, i: int) -> np.ndarray:
    """Joint anchor in the parent body frame: the parent link's far end."""
    p = emb.parent[i]
    if p < 0 or emb.is_slide[p]:
        return np.zeros(2)
    return np.array([emb.length[p], 0.0])


def link_angles(emb: Embodiment, q: np.ndarray) -> np.ndarray:
    """Absolute link orientation (from the +x axis) per body."""
    alpha, _, _, _ = forward_kinematics(emb, q)
    return alpha


def tip_state(emb: Embodiment, state: SimState):
    """End-effector position and velocity of the deepest body."""
    _, origin, _, tip = forward_kinematics(emb, state.q)
    jac = tip_jacobian(emb, state.q)
    return tip[emb.tip_joint], jac @ state.qdot


def tip_jacobian(emb: Embodiment, q: np.ndarray) -> np.ndarray:
    alpha, origin, _, tip = forward_kinematics(emb, q)
    target = tip[emb.tip_joint]
    jac = np.zeros((2, emb.n_joints))
    chain = set(emb._chain_to(emb.tip_joint))
    for k in range(emb.n_joints):
        if k not in chain:
            continue
        if emb.is_slide[k]:
            p = emb.parent[k]
            p_alpha = alpha[p] if p >= 0 else 0.0
            jac[:, k] = _rot(p_alpha) @ emb.axis[k]
        else:
            jac[:, k] = _perp(target - origin[k])
    return jac


def _inverse_dynamics(emb: Embodiment, q, qdot_rows, qddot_rows, base_acc_rows):
    """Batched planar Newton-Euler inverse dynamics.

    Each row b of the batch gets its own (qdot, qddot, base linear
    acceleration); returns generalized forces [B, J]. Gravity enters through
    the base-acceleration trick, so rows with base_acc = (0, +g) include
    gravity and rows with base_acc = 0 do not.
    """
    J = emb.n_joints
    B = qdot_rows.shape[0]
    alpha = np.zeros(J)
    origin = np.zeros((J, 2))
    rot_cache = [None] * J

    omega = np.zeros((B, J))
    omegad = np.zeros((B, J))
    a_org = np.zeros((B, J, 2))
    v_org = np.zeros((B, J, 2))
    slide_dir = np.zeros((J, 2))

    for i in emb.topo:
        p = emb.parent[i]
        if p >= 0:
            p_alpha, p_origin = alpha[p], origin[p]
            p_rot = rot_cache[p]
            p_om, p_omd = omega[:, p], omegad[:, p]
            p_v, p_a = v_org[:, p], a_org[:, p]
        else:
            p_alpha, p_origin, p_rot = 0.0, np.zeros(2), np.eye(2)
            p_om = np.zeros(B)
            p_omd = np.zeros(B)
            p_v = np.zeros((B, 2))
            p_a = base_acc_rows
        attach_w = p_rot @ _attach_offset(emb, i)
        if emb.is_slide[i]:
            alpha[i] = p_alpha
            w_u = p_rot @ emb.axis[i]
            slide_dir[i] = w_u
            r = attach_w + q[i] * w_u                      # parent origin -> body origin
            origin[i] = p_origin + r
            omega[:, i] = p_om
            omegad[:, i] = p_omd
            qd = qdot_rows[:, i]
            v_org[:, i] = p_v + p_om[:, None] * _perp(r)[None, :] + qd[:, None] * w_u[None, :]
            a_org[:, i] = (
                p_a
                + p_omd[:, None] * _perp(r)[None, :]
                - (p_om ** 2)[:, None] * r[None, :]
                + 2.0 * (p_om * qd)[:, None] * _perp(w_u)[None, :]
                + qddot_rows[:, i][:, None] * w_u[None, :]
            )
        else:
            alpha[i] = p_alpha + emb.axis_angle[i] + q[i]
            origin[i] = p_origin + attach_w
            omega[:, i] = p_om + qdot_rows[:, i]
            omegad[:, i] = p_omd + qddot_rows[:, i]
            v_org[:, i] = p_v + p_om[:, None] * _perp(attach_w)[None, :]
            a_org[:, i] = (
                p_a
                + p_omd[:, None] * _perp(attach_w)[None, :]
                - (p_om ** 2)[:, None] * attach_w[None, :]
            )
        rot_cache[i] = _rot(alpha[i])

    # Body wrenches at the COM.
    rc = np.stack([rot_cache[i] @ emb.com_local[i] for i in range(J)])  # [J, 2]
    a_com = (
        a_org
        + omegad[:, :, None] * _perp(rc)[None, :, :]
        - (omega ** 2)[:, :, None] * rc[None, :, :]
    )
    F = emb.mass[None, :, None] * a_com                                  # [B, J, 2]
    N = emb.inertia_com[None, :] * omegad                                # [B, J]

    # Inward pass: joint force f and torque n about each body origin.
    f = np.zeros((B, J, 2))
    n = np.zeros((B, J))
    for i in reversed(emb.topo):
        f[:, i] = F[:, i]
        n[:, i] = N[:, i] + _cross2(rc[None, i], F[:, i])
        for c in emb.children[i]:
            f[:, i] += f[:, c]
            n[:, i] += n[:, c] + _cross2((origin[c] - origin[i])[None, :], f[:, c])

    tau = np.zeros((B, J))
    for i in range(J):
        if emb.is_slide[i]:
            tau[:, i] = f[:, i] @ slide_dir[i]
        else:
            tau[:, i] = n[:, i]
    return tau


def _forward_dynamics(emb: Embodiment, q, qdot, tau_applied):
    J = emb.n_joints
    # Rows 0..J-1: unit-acceleration passes (no gravity, no velocity) give the
    # mass-matrix columns; the last row gives the velocity/gravity bias.
    qdot_rows = np.zeros((J + 1, J))
    qdot_rows[J] = qdot
    qddot_rows = np.zeros((J + 1, J))
    qddot_rows[:J] = np.eye(J)
    base_rows = np.zeros((J + 1, 2))
    base_rows[J, 1] = emb.spec.gravity
    tau_rows = _inverse_dynamics(emb, q, qdot_rows, qddot_rows, base_rows)
    M = tau_rows[:J].T
    bias = tau_rows[J]
    return np.linalg.solve(M, tau_applied - bias)


def mass_matrix(emb: Embodiment, q: np.ndarray) -> np.ndarray:
    J = emb.n_joints
    rows = _inverse_dynamics(
        emb, q, np.zeros((J, J)), np.eye(J), np.zeros((J, 2))
    )
    return rows.T


def mechanical_energy(emb: Embodiment, state: SimState) -> float:
    """Kinetic plus gravitational potential energy of the whole tree."""
    J = emb.n_joints
    M = mass_matrix(emb, state.q)
    ke = 0.5 * float(state.qdot @ M @ state.qdot)
    _, _, com, _ = forward_kinematics(emb, state.q)
    pe = float(emb.spec.gravity * np.sum(emb.mass * com[:, 1]))
    return ke + pe


def step(state: SimState, action: np.ndarray, emb: Embodiment) -> SimState:
    """One semi-implicit Euler step; free joints receive zero actuation."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (emb.n_joints,):
        raise SimSpecError(f"action shape {action.shape} != ({emb.n_joints},)")
    if np.any(np.abs(action) > 1.0 + 1e-9):
        raise SimSpecError("actions must lie in [-1, 1]")
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qdot))):
        raise NonFiniteState(f"non-finite state at t={state.t}")

    tau = emb.gear * np.where(emb.is_free, 0.0, action) - emb.damping * state.qdot
    qddot = _forward_dynamics(emb, state.q, state.qdot, tau)

    dt = emb.spec.control_dt
    qdot = state.qdot + dt * qddot
    q = state.q + dt * qdot

    # Position limits: clamp, zero the velocity at the limit.
    below = q < emb.limit_lo
    above = q > emb.limit_hi
    q = np.clip(q, emb.limit_lo, emb.limit_hi)
    qdot = np.where(below | above, 0.0, qdot)

    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qdot))):
        raise NonFiniteState(
            f"integration diverged at t={state.t} (dt={dt} too large for the gains?)"
        )
    return SimState(q=q, qdot=qdot, goal=state.goal.copy(), t=state.t + 1)


# ---------------------------------------------------------------------------
# Tasks: resets, goals, rewards


def _task_rng(emb: Embodiment, task: TaskSpec, seed: int) -> np.random.Generator:
    return np.random.default_rng(
        [int(seed) & 0xFFFFFFFF,
         zlib.crc32(emb.name.encode()),
         zlib.crc32(task.name.encode())]
    )


def target_pose(emb: Embodiment, task: TaskSpec) -> np.ndarray:
    """Joint configuration whose links all point along the task's target angle.

    target_angle is measured from the world up-axis (+y); 0 = upright,
    pi = hanging ("inverted").
    """
    theta = float(task.reward.get("target_angle", 0.0))
    phi = np.pi / 2.0 - theta                     # absolute link angle from +x
    q = np.zeros(emb.n_joints)
    alpha = np.zeros(emb.n_joints)
    for i in emb.topo:
        p = emb.parent[i]
        p_alpha = alpha[p] if p >= 0 else 0.0
        if emb.is_slide[i]:
            alpha[i] = p_alpha
            q[i] = 0.0
        else:
            q[i] = phi - p_alpha - emb.axis_angle[i]
            alpha[i] = phi
    return q


def _goal_point(emb: Embodiment, task: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    if emb.spec.extrasensory_dim == 0:
        return np.zeros(0)
    kind = task.goal_sampler.get("type", "annulus" if task.kind == "reach" else "pose_tip")
    if kind == "annulus":
        reach = emb.total_reach
        r_lo = task.goal_sampler.get("r_min", 0.2) * reach
        r_hi = task.goal_sampler.get("r_max", 0.9) * reach
        r = rng.uniform(r_lo, r_hi)
        ang = rng.uniform(0.0, 2.0 * np.pi)
        return np.array([r * np.cos(ang), r * np.sin(ang)])
    if kind == "pose_tip":
        q_star = target_pose(emb, task)
        _, _, _, tip = forward_kinematics(emb, q_star)
        return tip[emb.tip_joint].copy()
    raise SimSpecError(f"unknown goal_sampler type {kind!r}")


def reset(emb: Embodiment, task: TaskSpec, seed: int) -> SimState:
    """Deterministic initial state for (embodiment, task, seed)."""
    rng = _task_rng(emb, task, seed)
    J = emb.n_joints
    if task.kind == "reach":
        q = np.where(emb.is_slide, rng.uniform(-0.3, 0.3, J), rng.uniform(-np.pi, np.pi, J))
        qdot = rng.uniform(-0.05, 0.05, J)
    elif task.kind == "balance":
        q = target_pose(emb, task) + rng.uniform(-0.15, 0.15, J)
        q = np.where(emb.is_slide, rng.uniform(-0.2, 0.2, J), q)
        qdot = rng.uniform(-0.05, 0.05, J)
    else:  # swingup: rotating joints start hanging, slides near the middle
        hang = target_pose(
            emb, TaskSpec(name="_hang", kind="balance", reward={"target_angle": np.pi})
        )
        q = hang + rng.uniform(-0.1, 0.1, J)
        q = np.where(emb.is_slide, rng.uniform(-0.1, 0.1, J), q)
        qdot = rng.uniform(-0.02, 0.02, J)
    q = np.clip(q, emb.limit_lo, emb.limit_hi)
    goal = _goal_point(emb, task, rng)
    return SimState(q=q, qdot=qdot, goal=goal, t=0)


def reward(emb: Embodiment, task: TaskSpec, state: SimState, action: np.ndarray) -> float:
    """Bounded per-step reward in [0, 1]."""
    if task.kind == "reach":
        tip, _ = tip_state(emb, state)
        dist = float(np.linalg.norm(tip - state.goal))
        rad = task.reward.get("target_size", 0.05) * emb.total_reach
        sigma = task.reward.get("sigma", 0.2) * emb.total_reach
        if dist <= rad:
            return 1.0
        return float(np.exp(-0.5 * ((dist - rad) / sigma) ** 2))
    # balance / swingup: closeness of every rotating link to the target angle,
    # discounted by joint speed.
    theta = float(task.reward.get("target_angle", 0.0))
    phi_star = np.pi / 2.0 - theta
    alpha = link_angles(emb, state.q)
    rot = emb.rotational
    upness = float(np.mean((1.0 + np.cos(alpha[rot] - phi_star)) / 2.0)) if rot.any() else 1.0
    speed = float(np.sum(state.qdot ** 2))
    return upness * (1.0 / (1.0 + task.reward.get("speed_cost", 0.05) * speed))


def observation(emb: Embodiment, task: TaskSpec, state: SimState) -> np.ndarray:
    """Raw observation [q, qdot, extrasensory]; extrasensory = goal + distance."""
    if emb.spec.extrasensory_dim == 0:
        extra = np.zeros(0)
    else:
        tip, _ = tip_state(emb, state)
        dist = np.linalg.norm(tip - state.goal)
        extra = np.concatenate([state.goal, [dist]])
        if extra.shape[0] != emb.spec.extrasensory_dim:
            raise SimSpecError(
                f"extrasensory_dim {emb.spec.extrasensory_dim} != built {extra.shape[0]}"
            )
    return np.concatenate([state.q, state.qdot, extra]).astype(np.float64)


# ---------------------------------------------------------------------------
# Scripted experts


def expert_action(task: TaskSpec, state: SimState, emb: Embodiment) -> np.ndarray:
    """Scripted controller output, clipped to [-1, 1] and zero at free joints."""
    if task.kind == "reach":
        act = _reach_expert(emb, state)
    elif task.kind == "balance":
        act = _balance_expert(emb, task, state)
    else:
        act = _swingup_expert(emb, task, state)
    act = np.where(emb.is_free, 0.0, act)
    return np.clip(act, -1.0, 1.0)


def _to_action(emb: Embodiment, tau: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(emb.actuated, tau / np.where(emb.gear > 0, emb.gear, 1.0), 0.0)


def _bias_forces(emb: Embodiment, q: np.ndarray, qdot: np.ndarray) -> np.ndarray:
    rows = _inverse_dynamics(
        emb, q, qdot[None, :], np.zeros((1, emb.n_joints)),
        np.array([[0.0, emb.spec.gravity]]),
    )
    return rows[0]


def _computed_torque(emb: Embodiment, state: SimState, qddot_des: np.ndarray) -> np.ndarray:
    # Feedback-linearized torque: independent-joint PD destabilizes near the
    # singular straight pose (mass-matrix coupling blows up), so ask the exact
    # model for the torque realizing the desired joint acceleration.
    M = mass_matrix(emb, state.q)
    return M @ qddot_des + _bias_forces(emb, state.q, state.qdot) + emb.damping * state.qdot


def _reach_expert(emb: Embodiment, state: SimState) -> np.ndarray:
    tip, tip_vel = tip_state(emb, state)
    jac = tip_jacobian(emb, state.q)
    m_tot = float(np.sum(emb.mass))
    force = 36.0 * m_tot * (state.goal - tip) - 9.0 * m_tot * tip_vel
    tau = jac.T @ force + _computed_torque(emb, state, -8.0 * state.qdot)
    return _to_action(emb, tau)


def _balance_expert(emb: Embodiment, task: TaskSpec, state: SimState) -> np.ndarray:
    passive = emb.is_free & emb.rotational
    if passive.any() and emb.is_slide.any():
        return _cart_balance_expert(emb, task, state)
    # Fully actuated: PD about the target pose through the exact model.
    q_star = target_pose(emb, task)
    omega, zeta = 6.0, 1.1
    v = omega ** 2 * (q_star - state.q) - 2.0 * zeta * omega * state.qdot
    return _to_action(emb, _computed_torque(emb, state, v))


def _pole_index(emb: Embodiment) -> int:
    for i in emb.topo:
        if emb.is_free[i] and emb.rotational[i]:
            return i
    raise SimSpecError("no passive pole joint found")


# Stabilizing state feedback for a cart carrying one light passive pole,
# in normalized-action units over (x, xdot, pole q, pole qdot).
_CART_BALANCE_K = np.array([-0.50, -0.71, 3.76, 0.73])


def _cart_balance_expert(emb: Embodiment, task: TaskSpec, state: SimState) -> np.ndarray:
    cart = int(np.argmax(emb.is_slide))
    pole = _pole_index(emb)
    theta_star = float(task.reward.get("target_angle", 0.0))
    alpha = link_angles(emb, state.q)
    # Pole angle from the target direction, wrapped to (-pi, pi].
    err = np.arctan2(
        np.sin(alpha[pole] - (np.pi / 2.0 - theta_star)),
        np.cos(alpha[pole] - (np.pi / 2.0 - theta_star)),
    )
    x_vec = np.array([state.q[cart], state.qdot[cart], err, state.qdot[pole]])
    act = np.zeros(emb.n_joints)
    act[cart] = float(-_CART_BALANCE_K @ x_vec)
    return act


def _pole_energy(emb: Embodiment, state: SimState, pole: int) -> float:
    # Pole energy about its pivot, upright rest = 0 (pivot treated as fixed).
    m, L = emb.mass[pole], emb.length[pole]
    d = L / 2.0
    i_piv = m * L ** 2 / 3.0
    alpha = link_angles(emb, state.q)
    cos_up = np.sin(alpha[pole])                  # cos(angle from +y) = sin(phi)
    g = emb.spec.gravity
    return 0.5 * i_piv * state.qdot[pole] ** 2 + m * g * d * (cos_up - 1.0)


def _swingup_expert(emb: Embodiment, task: TaskSpec, state: SimState) -> np.ndarray:
    alpha = link_angles(emb, state.q)
    if emb.is_slide.any():
        return _cart_swingup_expert(emb, task, state)
    # Actuated pendulum / chain: pump energy at the root, PD near the top.
    root = emb.topo[0]
    up_err = np.arctan2(np.cos(alpha[root]), np.sin(alpha[root]))  # angle from +y
    if abs(up_err) < 0.5 and abs(state.qdot[root]) < 3.0:
        return _balance_expert(emb, TaskSpec(name="_bal", kind="balance"), state)
    e = _pole_energy(emb, state, root)
    qd = state.qdot[root]
    tau = 6.0 * (-e) * np.sign(qd if qd != 0 else 1.0)
    act = np.zeros(emb.n_joints)
    with np.errstate(divide="ignore", invalid="ignore"):
        act[root] = tau / emb.gear[root] if emb.gear[root] > 0 else 0.0
    return act


def _cart_swingup_expert(emb: Embodiment, task: TaskSpec, state: SimState) -> np.ndarray:
    cart = int(np.argmax(emb.is_slide))
    pole = _pole_index(emb)
    alpha = link_angles(emb, state.q)
    up_err = np.arctan2(np.cos(alpha[pole]), np.sin(alpha[pole]))
    if abs(up_err) < 0.5 and abs(state.qdot[pole]) < 3.5:
        return _cart_balance_expert(emb, TaskSpec(name="_bal", kind="balance"), state)
    # Energy pumping accelerates the pivot against the pole's swing phase.
    e = _pole_energy(emb, state, pole)
    force = (
        30.0 * (-e) * state.qdot[pole] * np.cos(up_err)
        - 1.5 * state.q[cart]
        - 2.5 * state.qdot[cart]
    )
    act = np.zeros(emb.n_joints)
    act[cart] = force / emb.gear[cart]
    return act


# ---------------------------------------------------------------------------
# Rollouts and demonstration buffers


@dataclass
class Demonstration:
    states: np.ndarray             # [T, obs_dim] f32, observed before each action
    actions: np.ndarray            # [T, J] f32 in [-1, 1]
    episode_return: float          # metadata only; never read by training code
    source_epoch: int

    def __len__(self) -> int:
        return self.states.shape[0]


def run_episode(
    policy_fn: Callable[[SimState, np.ndarray], np.ndarray],
    emb: Embodiment,
    task: TaskSpec,
    seed: int,
    noise_sigma: float = 0.0,
    noise_rng: Optional[np.random.Generator] = None,
    frame_dump: Optional[io.TextIOBase] = None,
) -> Demonstration:
    """Shared rollout loop used by demo generation and evaluation.

    policy_fn maps (state, observation) -> action in [-1, 1]; gaussian
    exploration noise (if any) is added before clipping. The per-step reward is
    accumulated only into episode_return.
    """
    state = reset(emb, task, seed)
    T = task.horizon
    states = np.zeros((T, emb.obs_dim), dtype=np.float32)
    actions = np.zeros((T, emb.n_joints), dtype=np.float32)
    total = 0.0
    if frame_dump is not None:
        cols = ",".join(f"tip{i}_x,tip{i}_y" for i in range(emb.n_joints))
        frame_dump.write(f"t,{cols}\n")
    for t in range(T):
        obs = observation(emb, task, state)
        act = np.asarray(policy_fn(state, obs), dtype=np.float64)
        if noise_sigma > 0.0:
            act = act + noise_rng.normal(0.0, noise_sigma, act.shape)
        act = np.where(emb.is_free, 0.0, np.clip(act, -1.0, 1.0))
        states[t] = obs
        actions[t] = act
        total += reward(emb, task, state, act)
        if frame_dump is not None:
            _, _, _, tips = forward_kinematics(emb, state.q)
            flat = ",".join(f"{v:.6f}" for v in tips.reshape(-1))
            frame_dump.write(f"{t},{flat}\n")
        state = step(state, act, emb)
    return Demonstration(states=states, actions=actions,
                         episode_return=float(total), source_epoch=0)


class DemoBuffer:
    """Temporally ordered reward-free demonstrations for one (embodiment, task)."""

    def __init__(self, emb: Embodiment, task: TaskSpec, demos: Sequence[Demonstration]):
        self.emb = emb
        self.task = task
        self.demos = list(demos)
        epochs = [d.source_epoch for d in self.demos]
        if epochs != sorted(epochs):
            raise SimSpecError("demonstrations must be ordered by source_epoch")
        self.obs_min, self.obs_max = self._scan_stats()

    def _scan_stats(self):
        if not self.demos:
            return None, None
        lo = np.min(np.stack([d.states.min(axis=0) for d in self.demos]), axis=0)
        hi = np.max(np.stack([d.states.max(axis=0) for d in self.demos]), axis=0)
        return lo, hi

    def __len__(self) -> int:
        return len(self.demos)

    def __getitem__(self, i: int) -> Demonstration:
        return self.demos[i]

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "demos.bin"
        T = self.task.horizon
        J = self.emb.n_joints
        with open(path, "wb") as fh:
            fh.write(DEMO_MAGIC)
            fh.write(struct.pack("<III", J, T, self.emb.spec.extrasensory_dim))
            for d in self.demos:
                fh.write(d.states.astype("<f4").tobytes())
                fh.write(d.actions.astype("<f4").tobytes())
                fh.write(struct.pack("<f", d.episode_return))
                fh.write(struct.pack("<I", d.source_epoch))
        save_embodiment_spec(self.emb.spec, out_dir / "embodiment.json")
        save_task_spec(self.task, out_dir / "task.json")
        return path

    @classmethod
    def load(cls, buf_dir) -> "DemoBuffer":
        buf_dir = Path(buf_dir)
        emb = build_embodiment(load_embodiment_spec(buf_dir / "embodiment.json"))
        task = load_task_spec(buf_dir / "task.json")
        raw = (buf_dir / "demos.bin").read_bytes()
        if raw[:4] != DEMO_MAGIC:
            raise SimSpecError(f"{buf_dir}: bad magic {raw[:4]!r}")
        J, T, extra = struct.unpack("<III", raw[4:16])
        obs_dim = 2 * J + extra
        rec = T * obs_dim * 4 + T * J * 4 + 4 + 4
        body = raw[16:]
        if len(body) % rec != 0:
            raise SimSpecError(f"{buf_dir}: truncated demo records")
        demos = []
        for k in range(len(body) // rec):
            chunk = body[k * rec:(k + 1) * rec]
            off = T * obs_dim * 4
            states = np.frombuffer(chunk[:off], dtype="<f4").reshape(T, obs_dim).copy()
            acts = np.frombuffer(chunk[off:off + T * J * 4], dtype="<f4").reshape(T, J).copy()
            ret, epoch = struct.unpack("<fI", chunk[off + T * J * 4:])
            demos.append(Demonstration(states, acts, float(ret), int(epoch)))
        return cls(emb, task, demos)


def generate_demos(
    emb: Embodiment,
    task: TaskSpec,
    count: int,
    seed: int,
    threshold: Optional[float] = None,
    sigma_start: float = 0.4,
    probe_rollouts: int = 8,
) -> DemoBuffer:
    """Roll the scripted expert `count` times with linearly annealed noise.

    Noise decays from sigma_start to 0 across buffer positions, emulating the
    replay buffer of an improving agent. Demonstrations below the return
    threshold (default: 5% of the noiseless expert's mean return) are dropped.
    """
    if count < 1:
        raise SimSpecError("count must be >= 1")
    if threshold is None:
        probes = [
            run_episode(lambda s, o: expert_action(task, s, emb), emb, task,
                        seed=900_000 + j).episode_return
            for j in range(probe_rollouts)
        ]
        threshold = 0.05 * float(np.mean(probes))
    kept = []
    for i in range(count):
        sigma = sigma_start * (count - 1 - i) / (count - 1) if count > 1 else 0.0
        demo_seed = DEMO_SEED_BASE + seed * 4096 + i
        assert demo_seed >= DEMO_SEED_BASE
        rng = np.random.default_rng([seed & 0xFFFFFFFF, i, zlib.crc32(emb.name.encode())])
        demo = run_episode(
            lambda s, o: expert_action(task, s, emb), emb, task,
            seed=demo_seed, noise_sigma=sigma, noise_rng=rng,
        )
        demo.source_epoch = i
        if demo.episode_return >= threshold:
            kept.append(demo)
    if 2 * len(kept) < count:
        raise InsufficientDemos(
            f"{emb.name}/{task.name}: {count - len(kept)}/{count} rollouts below "
            f"threshold {threshold:.3f}"
        )
    return DemoBuffer(emb, task, kept)


# ---------------------------------------------------------------------------
# JSON spec I/O (schema keys match the dataclass field names)


def save_embodiment_spec(spec: EmbodimentSpec, path) -> None:
    doc = {
        "name": spec.name,
        "joints": [
            {
                "id": j.id,
                "kind": j.kind,
                "parent": j.parent,
                "axis": list(j.axis),
                "link_length": j.link_length,
                "damping": j.damping,
                "gear": j.gear,
                "position_limits": None if j.position_limits is None else list(j.position_limits),
            }
            for j in spec.joints
        ],
        "link_masses": list(spec.link_masses),
        "gravity": spec.gravity,
        "control_dt": spec.control_dt,
        "extrasensory_dim": spec.extrasensory_dim,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_embodiment_spec(path) -> EmbodimentSpec:
    doc = json.loads(Path(path).read_text())
    joints = tuple(
        JointSpec(
            id=j["id"],
            kind=j["kind"],
            parent=j["parent"],
            axis=tuple(j["axis"]),
            link_length=j["link_length"],
            damping=j.get("damping", 0.0),
            gear=j.get("gear", 0.0),
            position_limits=None if j.get("position_limits") is None
            else tuple(j["position_limits"]),
        )
        for j in doc["joints"]
    )
    return EmbodimentSpec(
        name=doc["name"],
        joints=joints,
        link_masses=tuple(doc["link_masses"]),
        gravity=doc.get("gravity", 9.81),
        control_dt=doc.get("control_dt", 0.01),
        extrasensory_dim=doc.get("extrasensory_dim", 0),
    )


def save_task_spec(task: TaskSpec, path) -> None:
    Path(path).write_text(json.dumps(asdict(task), indent=2) + "\n")


def load_task_spec(path) -> TaskSpec:
    doc = json.loads(Path(path).read_text())
    return TaskSpec(
        name=doc["name"],
        kind=doc["kind"],
        horizon=doc.get("horizon", 500),
        goal_sampler=doc.get("goal_sampler", {}),
        reward=doc.get("reward", {}),
    )


# ---------------------------------------------------------------------------
# Built-in embodiments and tasks


def chain_spec(n_links: int, name: Optional[str] = None) -> EmbodimentSpec:
    """Fixed-base planar arm with n actuated hinge links; zero gravity
    (horizontal plane), goal provided as an extrasensory observation."""
    joints = tuple(
        JointSpec(
            id=i, kind=HINGE, parent=None if i == 0 else i - 1,
            axis=(1.0, 0.0), link_length=0.5, damping=0.6, gear=25.0,
        )
        for i in range(n_links)
    )
    return EmbodimentSpec(
        name=name or f"chain-{n_links}",
        joints=joints,
        link_masses=tuple(0.5 for _ in range(n_links)),
        gravity=0.0,
        control_dt=0.01,
        extrasensory_dim=3,
    )


def cart_chain_spec(n_poles: int = 1, name: Optional[str] = None) -> EmbodimentSpec:
    """Actuated cart on a rail carrying n passive (free) pole links."""
    joints = [
        JointSpec(id=0, kind=SLIDE, parent=None, axis=(1.0, 0.0),
                  link_length=4.8, damping=0.8, gear=40.0,
                  position_limits=(-2.4, 2.4)),
    ]
    for i in range(1, n_poles + 1):
        joints.append(
            JointSpec(id=i, kind=FREE, parent=i - 1, axis=(0.0, 1.0),
                      link_length=0.6, damping=0.04, gear=0.0)
        )
    return EmbodimentSpec(
        name=name or f"cart-chain-{n_poles}",
        joints=tuple(joints),
        link_masses=(1.0,) + tuple(0.3 for _ in range(n_poles)),
        gravity=9.81,
        control_dt=0.01,
        extrasensory_dim=0,
    )


def pendulum_spec(name: str = "pend-1") -> EmbodimentSpec:
    """Single under-geared hinge pendulum; swingup needs energy pumping."""
    return EmbodimentSpec(
        name=name,
        joints=(JointSpec(id=0, kind=HINGE, parent=None, axis=(0.0, 1.0),
                          link_length=0.6, damping=0.05, gear=2.0),),
        link_masses=(1.0,),
        gravity=9.81,
        control_dt=0.01,
        extrasensory_dim=0,
    )


def reach_task(horizon: int = 500, name: str = "reach") -> TaskSpec:
    return TaskSpec(name=name, kind="reach", horizon=horizon,
                    goal_sampler={"type": "annulus", "r_min": 0.2, "r_max": 0.9},
                    reward={"target_size": 0.05, "sigma": 0.2})


def balance_task(horizon: int = 500, name: str = "balance",
                 target_angle: float = 0.0) -> TaskSpec:
    return TaskSpec(name=name, kind="balance", horizon=horizon,
                    reward={"target_angle": target_angle, "speed_cost": 0.05})


def swingup_task(horizon: int = 500, name: str = "swingup") -> TaskSpec:
    return TaskSpec(name=name, kind="swingup", horizon=horizon,
                    reward={"target_angle": 0.0, "speed_cost": 0.05})
