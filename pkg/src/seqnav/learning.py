"""Training mathematics: task losses, loss weighting, hand-written gradients and the training loop.

The trainable model mirrors the inference stack. Two tiny encoders produce
image and BEV features per frame. Auxiliary seg/depth heads read the newest
frame's image encoder hidden layer. A GRU is stepped over the K frames from a
zero state, then the rollout heads, the PID path, the command MLPs and the
gated blend run once on the final hidden state. Every array carries a
leading batch axis; per-sample losses are averaged over the batch.

Parameters live in a flat ``dict[str, np.ndarray]`` so the optimizer,
checkpoints and gradient checks treat every group uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .bevmap import NUM_CLASSES, pool_grid
from .controller import (
    DEFAULT_EPSILON,
    HEADING_IN_LOCAL,
    LATERAL_PID,
    LONGITUDINAL_PID,
    BlendWeights,
    MlpHead,
    MlpHeads,
    PolicyParams,
    PidState,
)
from .errors import AllZeroGradients, EmptySplit, NonFiniteLoss, ShapeMismatch
from .geodesy import DEFAULT_TAU1, DEFAULT_TAU2, Command, infer_command
from .perception import DEPTH_SCALE, downsample_labels, downsample_rgb, one_hot
from .planner import (
    AIM_TOLERANCE,
    ANCILLARY_DIM,
    NUM_WAYPOINTS,
    GruParams,
    GruTerms,
    RolloutHeads,
    gru_terms,
    prefix_sum,
    sigmoid,
)
from .tensorfile import read_tensors, write_tensors

BCE_FLOOR = 1e-7
DICE_EPS = 1e-6
MGN_STEP = 0.1
NUM_TASKS = 3
COMMANDS = tuple(Command)
GRU_NAMES = ("W_r", "W_u", "W_h", "b_r", "b_u", "b_h")


# -- losses -------------------------------------------------------------------------


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs truth {truth.shape}")


def seg_loss(pred, truth, floor: float = BCE_FLOOR, eps: float = DICE_EPS) -> float:
    """Mean binary cross-entropy plus soft Dice over all elements."""
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_shapes(p, t)
    p = np.clip(p, floor, 1.0 - floor)
    bce = -np.mean(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    dice = 1.0 - (2.0 * np.sum(p * t) + eps) / (np.sum(p) + np.sum(t) + eps)
    return float(bce + dice)


def seg_loss_grad(pred, truth, floor: float = BCE_FLOOR, eps: float = DICE_EPS) -> np.ndarray:
    """Gradient of :func:`seg_loss` w.r.t. ``pred`` (zero where the floor clamps)."""
    raw = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    _check_shapes(raw, t)
    p = np.clip(raw, floor, 1.0 - floor)
    n = p.size
    g_bce = (-t / p + (1.0 - t) / (1.0 - p)) / n
    inter, denom = np.sum(p * t), np.sum(p) + np.sum(t) + eps
    g_dice = -(2.0 * t * denom - (2.0 * inter + eps)) / denom**2
    inside = (raw > floor) & (raw < 1.0 - floor)
    return np.where(inside, g_bce + g_dice, 0.0)


def l1l2_loss(pred, truth) -> float:
    """``mean |d| + mean d**2`` with ``d = pred - truth``."""
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_shapes(p, t)
    d = p - t
    return float(np.mean(np.abs(d)) + np.mean(d * d))


def l1l2_grad(pred, truth) -> np.ndarray:
    """Gradient of :func:`l1l2_loss`; the subgradient of ``|d|`` at 0 is 0."""
    p, t = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check_shapes(p, t)
    d = p - t
    return (np.sign(d) + 2.0 * d) / d.size


def mgn_update(norms: Sequence[float], weights: Sequence[float], step: float = MGN_STEP) -> np.ndarray:
    """Move task weights multiplicatively toward equal ``weight * grad norm``.

    ``w_k <- w_k * exp(-step * (w_k g_k - m) / m)`` with ``m`` the mean of
    ``w_k g_k``, then renormalized so the weights sum to exactly 3.
    Raises :class:`AllZeroGradients` (leaving nothing changed) when every
    norm is zero.
    """
    g = np.asarray(norms, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if g.shape != (NUM_TASKS,) or w.shape != (NUM_TASKS,):
        raise ShapeMismatch("mgn_update needs three norms and three weights")
    if np.any(g < 0) or not np.all(np.isfinite(g)):
        raise ValueError("gradient norms must be finite and non-negative")
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    scaled = w * g
    m = scaled.mean()
    if m == 0.0:
        raise AllZeroGradients("all task gradient norms are zero")
    new = w * np.exp(-step * (scaled - m) / m)
    return renormalize(new)


def renormalize(w: np.ndarray, total: float = float(NUM_TASKS)) -> np.ndarray:
    """Scale positive weights so that ``sum(w) == total`` holds exactly in float arithmetic.

    After scaling, the last weight absorbs the rounding residual of the
    left-to-right sum, nudged one ulp at a time until the sum is exact.
    """
    w = np.asarray(w, dtype=np.float64) * (total / float(np.sum(w)))
    partial = sum(float(v) for v in w[:-1])
    last = total - partial
    for _ in range(64):
        s = partial + last
        if s == total:
            break
        last = float(np.nextafter(last, math.inf if s < total else -math.inf))
    w[-1] = last
    return w


# -- model --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    img_in: int
    bev_in: int
    seg_out: int
    depth_out: int
    enc_hidden: int = 32
    feat_dim: int = 16
    hidden_dim: int = 32
    mlp_width: int = 16
    gamma: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    dt: float = 1.0 / 30.0
    lat_gains: tuple = (LATERAL_PID.kp, LATERAL_PID.ki)
    lon_gains: tuple = (LONGITUDINAL_PID.kp, LONGITUDINAL_PID.ki)
    integral_clamp: float = 1.0
    tau1: float = DEFAULT_TAU1
    tau2: float = DEFAULT_TAU2

    @property
    def input_dim(self) -> int:
        return 2 * self.feat_dim + ANCILLARY_DIM

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["lat_gains"] = tuple(d["lat_gains"])
        d["lon_gains"] = tuple(d["lon_gains"])
        return cls(**d)


def init_params(cfg: ModelConfig, rng: np.random.Generator, scale: float = 0.3) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    for enc, n_in in (("rgb", cfg.img_in), ("bev", cfg.bev_in)):
        p[f"{enc}.W1"] = rng.normal(0.0, 1.0 / math.sqrt(n_in), (cfg.enc_hidden, n_in))
        p[f"{enc}.b1"] = np.zeros(cfg.enc_hidden)
        p[f"{enc}.W2"] = rng.normal(0.0, 1.0 / math.sqrt(cfg.enc_hidden), (cfg.feat_dim, cfg.enc_hidden))
        p[f"{enc}.b2"] = np.zeros(cfg.feat_dim)
    p["seg.W"] = rng.normal(0.0, scale / math.sqrt(cfg.enc_hidden), (cfg.seg_out, cfg.enc_hidden))
    p["seg.b"] = np.full(cfg.seg_out, -2.0)
    p["depth.W"] = rng.normal(0.0, scale / math.sqrt(cfg.enc_hidden), (cfg.depth_out, cfg.enc_hidden))
    p["depth.b"] = np.zeros(cfg.depth_out)
    gru = GruParams.random(cfg.input_dim, cfg.hidden_dim, rng, scale / math.sqrt(cfg.input_dim / 4))
    for name in GRU_NAMES:
        p[f"gru.{name}"] = getattr(gru, name)
    p["wp.W"] = rng.normal(0.0, scale, (NUM_WAYPOINTS, 2, cfg.hidden_dim))
    p["wp.b"] = np.tile([0.0, 1.0], (NUM_WAYPOINTS, 1))
    for c in COMMANDS:
        head = MlpHead.random(cfg.hidden_dim, cfg.mlp_width, rng, scale)
        for name in ("W1", "b1", "W2", "b2"):
            p[f"mlp.{c.name}.{name}"] = getattr(head, name)
    p["beta.logits"] = np.zeros((2, 2))
    return p


@dataclass
class Batch:
    """Stacked training windows.

    ``x_img`` and ``x_bev`` are ``(B, K, n)``; ``anc`` holds the newest
    frame's ``[p1.x, p1.y, p2.x, p2.y, speed]``; ``cmd`` indexes ``COMMANDS``.
    """

    x_img: np.ndarray
    x_bev: np.ndarray
    anc: np.ndarray
    cmd: np.ndarray
    seg: np.ndarray
    depth: np.ndarray
    wp: np.ndarray
    ctrl: np.ndarray

    def __len__(self) -> int:
        return self.x_img.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.fields()))

    @staticmethod
    def fields() -> tuple[str, ...]:
        return ("x_img", "x_bev", "anc", "cmd", "seg", "depth", "wp", "ctrl")

    @classmethod
    def concat(cls, batches: Sequence["Batch"]) -> "Batch":
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in cls.fields()))


@dataclass
class LossReport:
    l_seg: float
    l_depth: float
    l_percep: float
    l_wp: float
    l_ctrl: float
    l_total: float
    alpha_percep: float
    alpha_wp: float
    alpha_ctrl: float

    @property
    def task_losses(self) -> tuple[float, float, float]:
        return (self.l_percep, self.l_wp, self.l_ctrl)

    @property
    def weights(self) -> tuple[float, float, float]:
        return (self.alpha_percep, self.alpha_wp, self.alpha_ctrl)

    @classmethod
    def combine(cls, l_seg: float, l_depth: float, l_wp: float, l_ctrl: float, weights: Sequence[float]) -> "LossReport":
        a = [float(w) for w in weights]
        if len(a) != NUM_TASKS or min(a) <= 0:
            raise ValueError("three positive task weights required")
        l_percep = l_seg + l_depth
        total = a[0] * l_percep + a[1] * l_wp + a[2] * l_ctrl
        if not math.isfinite(total):
            raise NonFiniteLoss(f"loss is {total}")
        return cls(l_seg, l_depth, l_percep, l_wp, l_ctrl, total, *a)


def _clip_unit(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamp to [-1, 1] and report where the clamp is inactive."""
    return np.clip(v, -1.0, 1.0), (np.abs(v) < 1.0)


def forward(params: Mapping[str, np.ndarray], batch: Batch, cfg: ModelConfig) -> dict:
    """Run the model; returns a cache holding every intermediate used by :func:`backward`."""
    c: dict = {}
    for enc, x in (("rgb", batch.x_img), ("bev", batch.x_bev)):
        a1 = np.tanh(x @ params[f"{enc}.W1"].T + params[f"{enc}.b1"])
        f = np.tanh(a1 @ params[f"{enc}.W2"].T + params[f"{enc}.b2"])
        c[f"{enc}.a1"], c[f"{enc}.f"] = a1, f
    newest = c["rgb.a1"][:, -1]
    c["seg"] = sigmoid(newest @ params["seg.W"].T + params["seg.b"])
    c["depth"] = newest @ params["depth.W"].T + params["depth.b"]

    gru = GruParams(*(params[f"gru.{n}"] for n in GRU_NAMES))
    B, K = batch.x_img.shape[:2]
    h = np.zeros((B, cfg.hidden_dim))
    steps = []
    for k in range(K):
        z = np.concatenate([c["rgb.f"][:, k], c["bev.f"][:, k], batch.anc], axis=1)
        t = gru_terms(z, h, gru)
        steps.append((z, h, t))
        h = t.h_new
    c["gru"], c["gru_params"], c["h"] = steps, gru, h

    deltas = np.einsum("lkh,bh->blk", params["wp.W"], h) + params["wp.b"]
    wp = prefix_sum(deltas)
    c["wp"] = wp

    # PID path from a fresh controller state: no derivative, one integral step
    w1, w2 = wp[:, 0], wp[:, 1]
    aim = 0.5 * (w1 + w2)
    r2 = np.sum(aim * aim, axis=1)
    valid = np.sqrt(r2) > AIM_TOLERANCE
    theta_ref = np.where(valid, np.arctan2(aim[:, 1], aim[:, 0]), HEADING_IN_LOCAL)
    e_lat = np.mod(theta_ref - HEADING_IN_LOCAL + math.pi, 2 * math.pi) - math.pi
    gap = w2 - w1
    gap_n = np.linalg.norm(gap, axis=1)
    v_ref = np.where(valid, cfg.gamma * gap_n, 0.0)
    e_lon = v_ref - batch.anc[:, 4]
    cl = cfg.integral_clamp
    i_lat, i_lon = e_lat * cfg.dt, e_lon * cfg.dt
    u_lat = cfg.lat_gains[0] * e_lat + cfg.lat_gains[1] * np.clip(i_lat, -cl, cl)
    u_lon = cfg.lon_gains[0] * e_lon + cfg.lon_gains[1] * np.clip(i_lon, -cl, cl)
    pid_raw = np.stack([u_lat, u_lon, u_lat], axis=1)
    u_pid, pid_in = _clip_unit(pid_raw)
    c.update(aim=aim, r2=r2, valid=valid, gap=gap, gap_n=gap_n, i_lat=i_lat, i_lon=i_lon, u_pid=u_pid, pid_in=pid_in)

    # command-specific MLPs
    mlp_a = np.zeros((B, cfg.mlp_width))
    mlp_raw = np.zeros((B, 3))
    for ci, cmd in enumerate(COMMANDS):
        sel = batch.cmd == ci
        if not sel.any():
            continue
        a = np.tanh(h[sel] @ params[f"mlp.{cmd.name}.W1"].T + params[f"mlp.{cmd.name}.b1"])
        mlp_a[sel] = a
        mlp_raw[sel] = a @ params[f"mlp.{cmd.name}.W2"].T + params[f"mlp.{cmd.name}.b2"]
    u_mlp, mlp_in = _clip_unit(mlp_raw)
    c.update(mlp_a=mlp_a, u_mlp=u_mlp, mlp_in=mlp_in)

    beta = sigmoid(params["beta.logits"])
    on_m = np.linalg.norm(u_mlp, axis=1) >= cfg.epsilon
    on_p = np.linalg.norm(u_pid, axis=1) >= cfg.epsilon
    mixed_raw = np.stack([
        beta[0, 0] * u_mlp[:, 0] + beta[1, 0] * u_pid[:, 0],
        beta[0, 0] * u_mlp[:, 1] + beta[1, 0] * u_pid[:, 1],
        beta[0, 1] * u_mlp[:, 2] + beta[1, 1] * u_pid[:, 2],
    ], axis=1)
    mixed, mix_in = _clip_unit(mixed_raw)
    both, only_m, only_p = on_m & on_p, on_m & ~on_p, ~on_m & on_p
    u = np.where(both[:, None], mixed, np.where(only_m[:, None], u_mlp, np.where(only_p[:, None], u_pid, 0.0)))
    c.update(beta=beta, both=both, only_m=only_m, only_p=only_p, mix_in=mix_in, u=u)
    return c


def losses(cache: dict, batch: Batch) -> tuple[float, float, float, float]:
    """Batch-mean ``(l_seg, l_depth, l_wp, l_ctrl)``."""
    B = len(batch)
    l_seg = sum(seg_loss(cache["seg"][b], batch.seg[b]) for b in range(B)) / B
    l_depth = sum(l1l2_loss(cache["depth"][b], batch.depth[b]) for b in range(B)) / B
    l_wp = sum(l1l2_loss(cache["wp"][b], batch.wp[b]) for b in range(B)) / B
    l_ctrl = sum(l1l2_loss(cache["u"][b], batch.ctrl[b]) for b in range(B)) / B
    return l_seg, l_depth, l_wp, l_ctrl


def evaluate(params, batch: Batch, cfg: ModelConfig, weights: Sequence[float] = (1.0, 1.0, 1.0)) -> LossReport:
    cache = forward(params, batch, cfg)
    return LossReport.combine(*losses(cache, batch), weights)


def gru_backward(
    z: np.ndarray, h_prev: np.ndarray, params: GruParams, terms: GruTerms, dh_new: np.ndarray
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Reverse-mode step through one GRU update (batched); returns ``(dz, dh_prev, grads)``."""
    r, u, h_tilde, _ = terms
    d = params.input_dim
    zh = np.concatenate([z, h_prev], axis=-1)
    du = dh_new * (h_tilde - h_prev)
    dh_prev = dh_new * (1.0 - u)
    dpre_h = dh_new * u * (1.0 - h_tilde**2)
    rh = r * h_prev
    g = {
        "W_h": np.concatenate([dpre_h.T @ z, dpre_h.T @ rh], axis=1),
        "b_h": dpre_h.sum(axis=0),
    }
    dz = dpre_h @ params.W_h[:, :d]
    drh = dpre_h @ params.W_h[:, d:]
    dh_prev = dh_prev + drh * r
    dpre_r = drh * h_prev * r * (1.0 - r)
    dpre_u = du * u * (1.0 - u)
    g["W_r"], g["b_r"] = dpre_r.T @ zh, dpre_r.sum(axis=0)
    g["W_u"], g["b_u"] = dpre_u.T @ zh, dpre_u.sum(axis=0)
    dzh = dpre_r @ params.W_r + dpre_u @ params.W_u
    return dz + dzh[:, :d], dh_prev + dzh[:, d:], g


def rollout_backward(h: np.ndarray, W: np.ndarray, dwaypoints: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the prefix-summed rollout: returns ``(dh, dW, db)``."""
    ddeltas = np.flip(np.cumsum(np.flip(dwaypoints, axis=1), axis=1), axis=1)
    dW = np.einsum("blk,bh->lkh", ddeltas, h)
    db = ddeltas.sum(axis=0)
    dh = np.einsum("blk,lkh->bh", ddeltas, W)
    return dh, dW, db


def backward(
    params: Mapping[str, np.ndarray],
    batch: Batch,
    cfg: ModelConfig,
    weights: Sequence[float] = (1.0, 1.0, 1.0),
    cache: Optional[dict] = None,
) -> dict[str, np.ndarray]:
    """Analytic gradient of ``l_total`` w.r.t. every parameter."""
    for name, v in params.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteLoss(f"parameter {name} is not finite")
    c = cache if cache is not None else forward(params, batch, cfg)
    a_p, a_w, a_c = (float(w) for w in weights)
    B = len(batch)
    g = {name: np.zeros_like(v) for name, v in params.items()}

    # control loss through the gate
    du = np.stack([l1l2_grad(c["u"][b], batch.ctrl[b]) for b in range(B)]) * (a_c / B)
    beta = c["beta"]
    dmix = np.where(c["both"][:, None], du, 0.0) * c["mix_in"]
    du_mlp = np.where(c["only_m"][:, None], du, 0.0)
    du_pid = np.where(c["only_p"][:, None], du, 0.0)
    du_mlp[:, :2] += beta[0, 0] * dmix[:, :2]
    du_mlp[:, 2] += beta[0, 1] * dmix[:, 2]
    du_pid[:, :2] += beta[1, 0] * dmix[:, :2]
    du_pid[:, 2] += beta[1, 1] * dmix[:, 2]
    u_m, u_p = c["u_mlp"], c["u_pid"]
    dbeta = np.array([
        [np.sum(dmix[:, :2] * u_m[:, :2]), np.sum(dmix[:, 2] * u_m[:, 2])],
        [np.sum(dmix[:, :2] * u_p[:, :2]), np.sum(dmix[:, 2] * u_p[:, 2])],
    ])
    g["beta.logits"] = dbeta * beta * (1.0 - beta)

    h = c["h"]
    dh = np.zeros_like(h)
    draw = du_mlp * c["mlp_in"]
    for ci, cmd in enumerate(COMMANDS):
        sel = batch.cmd == ci
        if not sel.any():
            continue
        pre = f"mlp.{cmd.name}"
        a = c["mlp_a"][sel]
        g[f"{pre}.W2"] = draw[sel].T @ a
        g[f"{pre}.b2"] = draw[sel].sum(axis=0)
        dpre = (draw[sel] @ params[f"{pre}.W2"]) * (1.0 - a * a)
        g[f"{pre}.W1"] = dpre.T @ h[sel]
        g[f"{pre}.b1"] = dpre.sum(axis=0)
        dh[sel] += dpre @ params[f"{pre}.W1"]

    # PID path back to the first two waypoints
    dpid = du_pid * c["pid_in"]
    cl = cfg.integral_clamp
    du_lat = dpid[:, 0] + dpid[:, 2]
    du_lon = dpid[:, 1]
    de_lat = du_lat * (cfg.lat_gains[0] + cfg.lat_gains[1] * cfg.dt * (np.abs(c["i_lat"]) < cl))
    de_lon = du_lon * (cfg.lon_gains[0] + cfg.lon_gains[1] * cfg.dt * (np.abs(c["i_lon"]) < cl))
    valid = c["valid"]
    aim, r2 = c["aim"], np.where(valid, c["r2"], 1.0)
    dtheta = np.where(valid, de_lat, 0.0)
    daim = np.stack([-aim[:, 1] / r2, aim[:, 0] / r2], axis=1) * dtheta[:, None]
    gap_n = np.where(c["gap_n"] > 0, c["gap_n"], 1.0)
    dgap = np.where((valid & (c["gap_n"] > 0))[:, None], cfg.gamma * c["gap"] / gap_n[:, None], 0.0) * de_lon[:, None]
    dwp = np.stack([l1l2_grad(c["wp"][b], batch.wp[b]) for b in range(B)]) * (a_w / B)
    dwp[:, 0] += 0.5 * daim - dgap
    dwp[:, 1] += 0.5 * daim + dgap

    dh_roll, g["wp.W"], g["wp.b"] = rollout_backward(h, params["wp.W"], dwp)
    dh += dh_roll

    # GRU through the K steps
    gp = c["gru_params"]
    F = cfg.feat_dim
    K = batch.x_img.shape[1]
    df = {"rgb": np.zeros((B, K, F)), "bev": np.zeros((B, K, F))}
    for k in reversed(range(K)):
        z, h_prev, terms = c["gru"][k]
        dz, dh, gg = gru_backward(z, h_prev, gp, terms, dh)
        for name, v in gg.items():
            g[f"gru.{name}"] += v
        df["rgb"][:, k] = dz[:, :F]
        df["bev"][:, k] = dz[:, F : 2 * F]

    # perception heads on the newest image frame
    dseg = np.stack([seg_loss_grad(c["seg"][b], batch.seg[b]) for b in range(B)]) * (a_p / B)
    dseg_pre = dseg * c["seg"] * (1.0 - c["seg"])
    ddepth = np.stack([l1l2_grad(c["depth"][b], batch.depth[b]) for b in range(B)]) * (a_p / B)
    newest = c["rgb.a1"][:, -1]
    g["seg.W"], g["seg.b"] = dseg_pre.T @ newest, dseg_pre.sum(axis=0)
    g["depth.W"], g["depth.b"] = ddepth.T @ newest, ddepth.sum(axis=0)

    for enc, x in (("rgb", batch.x_img), ("bev", batch.x_bev)):
        a1, f = c[f"{enc}.a1"], c[f"{enc}.f"]
        dpre2 = df[enc] * (1.0 - f * f)
        da1 = dpre2 @ params[f"{enc}.W2"]
        if enc == "rgb":
            da1[:, -1] += dseg_pre @ params["seg.W"] + ddepth @ params["depth.W"]
        dpre1 = da1 * (1.0 - a1 * a1)
        g[f"{enc}.W2"] = np.einsum("bkf,bkh->fh", dpre2, a1)
        g[f"{enc}.b2"] = dpre2.sum(axis=(0, 1))
        g[f"{enc}.W1"] = np.einsum("bkh,bki->hi", dpre1, x)
        g[f"{enc}.b1"] = dpre1.sum(axis=(0, 1))
    return g


def task_gradient_norms(params, batch: Batch, cfg: ModelConfig) -> np.ndarray:
    """Gradient norm of each task loss over all parameters."""
    cache = forward(params, batch, cfg)
    out = []
    for k in range(NUM_TASKS):
        w = [0.0] * NUM_TASKS
        w[k] = 1.0
        g = backward(params, batch, cfg, w, cache)
        out.append(math.sqrt(sum(float(np.sum(v * v)) for v in g.values())))
    return np.array(out)


def finite_difference(loss_fn: Callable[[], float], array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` over every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn()
        flat[i] = old - step
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return 0.0 if scale == 0.0 else float(np.linalg.norm(a - b)) / scale


# -- optimization -------------------------------------------------------------------


@dataclass
class AdamW:
    """Adaptive moments with decoupled weight decay."""

    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name in sorted(params):
            g = grads[name]
            m = self.m.get(name, 0.0) * b1 + (1.0 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name]
            p -= self.lr * ((m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


@dataclass
class PlateauSchedule:
    """Halve the rate after ``patience`` epochs without improvement, never below ``lr_min``."""

    lr: float = 1e-4
    factor: float = 0.5
    patience: int = 5
    lr_min: float = 1e-6
    best: float = math.inf
    stale: int = 0

    def update(self, value: float) -> float:
        if value < self.best:
            self.best, self.stale = value, 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.lr_min)
                self.stale = 0
        return self.lr


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 5
    early_stop_patience: int = 30
    lr_patience: int = 5
    lr_factor: float = 0.5
    lr_min: float = 1e-6
    K: int = 1
    max_epochs: int = 200
    seed: int = 0
    mgn_step: float = MGN_STEP
    # "epoch" or "step"
    mgn_every: str = "epoch"
    probe_size: int = 20

    def __post_init__(self) -> None:
        positive = (self.lr, self.weight_decay, self.batch_size, self.early_stop_patience, self.lr_patience,
                    self.lr_factor, self.lr_min, self.max_epochs)
        if not all(v > 0 for v in positive):
            raise ValueError("training hyper-parameters must be positive")
        if self.K not in (1, 2, 3):
            raise ValueError("K must be 1, 2 or 3")
        if self.mgn_every not in ("epoch", "step"):
            raise ValueError("mgn_every must be 'epoch' or 'step'")


HISTORY_FIELDS = [
    ("epoch", "i"), ("lr", "f"), ("l_seg", "f"), ("l_depth", "f"), ("l_percep", "f"), ("l_wp", "f"),
    ("l_ctrl", "f"), ("l_total", "f"), ("alpha_percep", "f"), ("alpha_wp", "f"), ("alpha_ctrl", "f"),
    ("val_l_total", "f"), ("val_l_ctrl", "f"),
]


@dataclass
class TrainResult:
    params: dict
    history: list
    best_epoch: int
    stopped_epoch: int
    weights: np.ndarray
    step_reports: list = field(default_factory=list)


def _mean_report(params, data: Batch, cfg: ModelConfig, weights, chunk: int = 64) -> LossReport:
    parts = []
    for s in range(0, len(data), chunk):
        sub = data.take(slice(s, s + chunk))
        parts.append((len(sub), losses(forward(params, sub, cfg), sub)))
    n = sum(k for k, _ in parts)
    comps = [sum(k * ls[i] for k, ls in parts) / n for i in range(4)]
    return LossReport.combine(*comps, weights)


def train(
    train_set: Batch,
    val_set: Batch,
    cfg: ModelConfig,
    tcfg: TrainConfig = TrainConfig(),
    params: Optional[dict] = None,
) -> TrainResult:
    """Mini-batch training with early stopping; returns the best-validation parameters.

    Epoch 0 records the untrained model. Task weights start at 1 and are
    updated by :func:`mgn_update` once per epoch (or per step) from
    gradient norms on a fixed probe batch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptySplit("train and validation splits must be non-empty")
    rng = np.random.default_rng(tcfg.seed)
    if params is None:
        params = init_params(cfg, rng)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt = AdamW(tcfg.lr, weight_decay=tcfg.weight_decay)
    sched = PlateauSchedule(tcfg.lr, tcfg.lr_factor, tcfg.lr_patience, tcfg.lr_min)
    weights = np.ones(NUM_TASKS)
    probe = train_set.take(slice(0, tcfg.probe_size))

    def adapt(w: np.ndarray) -> np.ndarray:
        try:
            return mgn_update(task_gradient_norms(params, probe, cfg), w, tcfg.mgn_step)
        except AllZeroGradients:
            return w

    val = _mean_report(params, val_set, cfg, weights)
    tr = _mean_report(params, train_set, cfg, weights)
    history = [_history_row(0, opt.lr, tr, val)]
    best, best_epoch, best_params = val.l_total, 0, {k: v.copy() for k, v in params.items()}
    stale = 0
    step_reports = []
    epoch = 0
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(len(train_set))
        sums = np.zeros(4)
        for s in range(0, len(order), tcfg.batch_size):
            mb = train_set.take(order[s : s + tcfg.batch_size])
            cache = forward(params, mb, cfg)
            comps = losses(cache, mb)
            report = LossReport.combine(*comps, weights)
            step_reports.append(report)
            sums += np.array(comps) * len(mb)
            grads = backward(params, mb, cfg, weights, cache)
            opt.step(params, grads)
            if tcfg.mgn_every == "step":
                weights = adapt(weights)
        if tcfg.mgn_every == "epoch":
            weights = adapt(weights)
        tr = LossReport.combine(*(sums / len(train_set)), weights)
        val = _mean_report(params, val_set, cfg, weights)
        history.append(_history_row(epoch, opt.lr, tr, val))
        if val.l_total < best:
            best, best_epoch, stale = val.l_total, epoch, 0
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            stale += 1
        opt.lr = sched.update(val.l_total)
        if stale >= tcfg.early_stop_patience:
            break
    return TrainResult(best_params, history, best_epoch, epoch, weights, step_reports)


def _history_row(epoch: int, lr: float, tr: LossReport, val: LossReport) -> dict:
    return {
        "epoch": epoch, "lr": lr, "l_seg": tr.l_seg, "l_depth": tr.l_depth, "l_percep": tr.l_percep,
        "l_wp": tr.l_wp, "l_ctrl": tr.l_ctrl, "l_total": tr.l_total, "alpha_percep": tr.alpha_percep,
        "alpha_wp": tr.alpha_wp, "alpha_ctrl": tr.alpha_ctrl, "val_l_total": val.l_total, "val_l_ctrl": val.l_ctrl,
    }


# -- checkpoints and inference --------------------------------------------------------


def _json_entry(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(path: str, params: Mapping[str, np.ndarray], cfg: ModelConfig,
                    meta: Optional[dict] = None) -> None:
    """Parameters plus the model config (and optional run metadata) in one tensor file."""
    tensors = {name: np.asarray(v, dtype=np.float64) for name, v in sorted(params.items())}
    tensors["config.json"] = np.frombuffer(cfg.to_json().encode("utf-8"), dtype=np.uint8)
    if meta is not None:
        tensors["meta.json"] = _json_entry(meta)
    write_tensors(path, tensors)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], ModelConfig]:
    params, cfg, _ = load_checkpoint_meta(path)
    return params, cfg


def load_checkpoint_meta(path: str) -> tuple[dict[str, np.ndarray], ModelConfig, dict]:
    tensors = read_tensors(path)
    raw = tensors.pop("config.json", None)
    if raw is None:
        raise ValueError(f"{path}: checkpoint has no config entry")
    meta = tensors.pop("meta.json", None)
    meta = json.loads(meta.tobytes().decode("utf-8")) if meta is not None else {}
    return tensors, ModelConfig.from_json(raw.tobytes().decode("utf-8")), meta


def policy_params(params: Mapping[str, np.ndarray], cfg: ModelConfig) -> PolicyParams:
    """Planner/controller part of a trained model, in the inference-time types."""
    gru = GruParams(*(params[f"gru.{n}"] for n in GRU_NAMES))
    heads = RolloutHeads(params["wp.W"], params["wp.b"])
    mlp = MlpHeads({c: MlpHead(*(params[f"mlp.{c.name}.{n}"] for n in ("W1", "b1", "W2", "b2"))) for c in COMMANDS})
    lat = PidState(cfg.lat_gains[0], cfg.lat_gains[1], LATERAL_PID.kd, cfg.integral_clamp)
    lon = PidState(cfg.lon_gains[0], cfg.lon_gains[1], LONGITUDINAL_PID.kd, cfg.integral_clamp)
    return PolicyParams(gru, heads, mlp, BlendWeights.from_logits(params["beta.logits"]), cfg.epsilon, cfg.gamma,
                        lat, lon, tau1=cfg.tau1, tau2=cfg.tau2)


def encode(params: Mapping[str, np.ndarray], x_img: np.ndarray, x_bev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Features of single frames from the trained encoders."""
    out = []
    for enc, x in (("rgb", x_img), ("bev", x_bev)):
        a1 = np.tanh(x @ params[f"{enc}.W1"].T + params[f"{enc}.b1"])
        out.append(np.tanh(a1 @ params[f"{enc}.W2"].T + params[f"{enc}.b2"]))
    return out[0], out[1]


# -- features from observations -----------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    """Toy-resolution inputs and targets derived from full frames."""

    image_factor: int = 4
    bev_factor: int = 16

    def image_input(self, rgb: np.ndarray, depth: np.ndarray) -> np.ndarray:
        d = downsample_labels(depth, self.image_factor).astype(np.float64) / DEPTH_SCALE
        return np.concatenate([downsample_rgb(rgb, self.image_factor).ravel(), d.ravel()])

    def bev_input(self, bev: np.ndarray) -> np.ndarray:
        return pool_grid(bev, self.bev_factor).ravel()

    def seg_target(self, labels: np.ndarray) -> np.ndarray:
        return one_hot(downsample_labels(labels, self.image_factor), NUM_CLASSES).ravel()

    def depth_target(self, depth: np.ndarray) -> np.ndarray:
        return downsample_labels(depth, self.image_factor).astype(np.float64).ravel() / DEPTH_SCALE


def model_config_for(frames_shape: tuple[int, int], bev_shape: tuple[int, int], fs: FeatureSpec = FeatureSpec(),
                     **overrides) -> ModelConfig:
    h, w = frames_shape[0] // fs.image_factor, frames_shape[1] // fs.image_factor
    bh, bw = bev_shape[0] // fs.bev_factor, bev_shape[1] // fs.bev_factor
    return ModelConfig(img_in=h * w * 4, bev_in=bh * bw * NUM_CLASSES, seg_out=h * w * NUM_CLASSES,
                       depth_out=h * w, **overrides)


def route_batch(route, K: int, fs: FeatureSpec = FeatureSpec(), cache: Optional[dict] = None,
                first: int = 0) -> Batch:
    """All K-frame windows of a dataset route whose newest frame index is at least ``first``."""
    from .dataset import window

    intr, ext = route.spec.intrinsics, route.spec.extrinsics
    n = len(route.frames)
    key = id(route)
    if cache is not None and key in cache:
        per_frame = cache[key]
    else:
        per_frame = []
        for o in route.frames:
            p1, p2 = o.route_local()
            per_frame.append((
                fs.image_input(o.rgb, o.depth), fs.bev_input(o.bev(intr, ext)),
                np.array([p1.x, p1.y, p2.x, p2.y, o.speed]),
                COMMANDS.index(infer_command(p1, p2)),
                fs.seg_target(o.labels), fs.depth_target(o.depth),
                o.wp_truth.waypoints, o.control.as_array(),
            ))
        if cache is not None:
            cache[key] = per_frame
    windows = window(route, K)
    idx = [list(range(i, i + K)) for i in range(len(windows))]
    assert len(idx) == n - K + 1
    idx = [ix for ix in idx if ix[-1] >= first]
    x_img = np.stack([[per_frame[j][0] for j in ix] for ix in idx])
    x_bev = np.stack([[per_frame[j][1] for j in ix] for ix in idx])
    last = [per_frame[ix[-1]] for ix in idx]
    return Batch(
        x_img, x_bev,
        np.stack([r[2] for r in last]), np.array([r[3] for r in last]),
        np.stack([r[4] for r in last]), np.stack([r[5] for r in last]),
        np.stack([r[6] for r in last]), np.stack([r[7] for r in last]),
    )


def routes_batch(routes: Iterable, K: int, fs: FeatureSpec = FeatureSpec(), cache: Optional[dict] = None,
                 first: int = 0) -> Batch:
    return Batch.concat([route_batch(r, K, fs, cache, first) for r in routes])


def control_mae(params, data: Batch, cfg: ModelConfig) -> float:
    """Mean of ``(|dx| + |dy| + |dtheta|) / 3`` over samples."""
    u = forward(params, data, cfg)["u"]
    return float(np.mean(np.abs(u - data.ctrl).sum(axis=1) / 3.0))


def teacher_task(cfg: ModelConfig, n: int, K: int, rng: np.random.Generator, teacher: Optional[dict] = None,
                 scale: float = 0.5, margin: float = 0.5) -> Batch:
    """Imitation data whose targets the student architecture can fit exactly.

    Depth, waypoint and control targets come from a random model of the same
    architecture, stored with the separator under ``task.sep`` so train and
    validation draws share it. Segmentation labels are the sign pattern of a fixed linear
    map of the newest image features; samples closer than ``margin`` to any
    class boundary are redrawn so the labels are linearly separable.
    """
    if teacher is None:
        teacher = init_params(cfg, rng, scale)
        teacher["seg.b"] = np.zeros(cfg.seg_out)
    if "task.sep" not in teacher:
        teacher["task.sep"] = rng.normal(0.0, 1.0, (cfg.seg_out, cfg.img_in)) / np.sqrt(cfg.img_in)
    sep = teacher["task.sep"]
    x_img = rng.normal(0.0, 1.0, (n, K, cfg.img_in))
    for _ in range(1000):
        bad = np.abs(x_img[:, -1] @ sep.T).min(axis=1) < margin
        if not bad.any():
            break
        x_img[bad, -1] = rng.normal(0.0, 1.0, (int(bad.sum()), cfg.img_in))
    anc = np.column_stack([rng.normal(0.0, 3.0, (n, 2)), rng.normal(0.0, 5.0, (n, 2)), rng.uniform(0.0, 1.0, n)])
    cmd = np.array([COMMANDS.index(infer_command(_lp(a[0], a[1]), _lp(a[2], a[3]), cfg.tau1, cfg.tau2)) for a in anc])
    data = Batch(x_img, rng.normal(0.0, 1.0, (n, K, cfg.bev_in)), anc, cmd,
                 np.zeros((n, cfg.seg_out)), np.zeros((n, cfg.depth_out)), np.zeros((n, NUM_WAYPOINTS, 2)), np.zeros((n, 3)))
    c = forward(teacher, data, cfg)
    data.seg = (x_img[:, -1] @ sep.T > 0).astype(np.float64)
    data.depth, data.wp, data.ctrl = c["depth"], c["wp"], c["u"]
    return data


def _lp(x: float, y: float):
    from .geodesy import LocalPoint

    return LocalPoint(float(x), float(y))


def history_scene():
    """Synthetic scene where the expert's yaw carries a slow random disturbance.

    The disturbance is invisible in a single frame but shows up as yaw rate
    across consecutive frames, so longer input windows can predict it.
    """
    from .dataset import ExpertSpec, SceneSpec
    from .world import PathSpec

    return SceneSpec(path=PathSpec("straight", 30.0), sample_every=10,
                     expert=ExpertSpec(disturbance_sigma=0.4, disturbance_tau=2.0))


@dataclass
class HistoryTrial:
    seed: int
    mae: dict
    best_epoch: dict


def compare_history(seed: int, Ks: Sequence[int] = (1, 3), scene=None, counts: Sequence[int] = (8, 3, 0),
                    fs: FeatureSpec = FeatureSpec(image_factor=8, bev_factor=16), lr: float = 1e-3,
                    max_epochs: int = 60) -> HistoryTrial:
    """Train one model per window length on the same routes; report validation control MAE.

    Every K is scored on the same target frames (those with at least ``max(Ks) - 1`` predecessors).
    """
    from .dataset import generate_splits

    splits = generate_splits(scene if scene is not None else history_scene(), seed, counts)
    first = splits["train"][0]
    o = first.frames[0]
    cfg = model_config_for(o.rgb.shape[:2], o.bev(first.spec.intrinsics, first.spec.extrinsics).shape[:2], fs)
    cache: dict = {}
    lead = max(Ks) - 1
    mae, best = {}, {}
    for K in Ks:
        tr = routes_batch(splits["train"], K, fs, cache)
        va = routes_batch(splits["val"], K, fs, cache, first=lead)
        res = train(tr, va, cfg, TrainConfig(lr=lr, K=K, max_epochs=max_epochs, seed=seed))
        mae[K], best[K] = control_mae(res.params, va, cfg), res.best_epoch
    return HistoryTrial(seed, mae, best)
