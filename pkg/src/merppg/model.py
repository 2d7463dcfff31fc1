"""Full network: per-frame conv encoder, TN + state-space mixer blocks, head.

The model is frame-aligned: a (T, H, W, C) clip maps to T pulse values.
Two forward paths share the same parameters and (for everything but
temporal normalization) the same arithmetic:

* chunk — whole segments in parallel; least-squares TN; blocked scan.
* flow  — one frame at a time against a small carried state (running TN
  trends plus the mixer hidden state), with per-step work and memory
  independent of stream position.

Spatial encoding never mixes time, so the encoder is evaluated in frame
slabs to keep chunk-mode transients bounded while outputs stay identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tn as tn_mod
from .autodiff import Var
from .data import BVPSignal, FormatError, FrameTensor, decode_array, encode_array
from .ssd import SSDState, softplus, ssd_step_heads, zoh_input_coeff
from .tn import TNState

_ZOH_SERIES_CUTOFF = 1e-8
_ENCODER_SLAB = 128


@dataclass(frozen=True)
class ModelConfig:
    input_resolution: tuple[int, int] = (32, 32)
    encoder_channels: tuple[int, ...] = (64, 160, 256)
    n_blocks: int = 2
    feature_dim: int = 64
    state_dim: int = 16
    n_heads: int = 8
    tn_alpha: float = tn_mod.DEFAULT_ALPHA
    tn_eps: float = tn_mod.DEFAULT_EPS
    selective: bool = True
    seed: int = 0

    def validate(self) -> None:
        h, w = self.input_resolution
        factor = 2 ** len(self.encoder_channels)
        if not self.encoder_channels:
            raise ValueError("encoder needs at least one stage")
        if h % factor or w % factor or h < factor or w < factor:
            raise ValueError(
                f"resolution {h}x{w} not divisible by encoder downsampling {factor}"
            )
        if self.n_blocks < 1:
            raise ValueError("need at least one temporal block")
        if self.feature_dim % self.n_heads:
            raise ValueError("feature_dim must be divisible by n_heads")
        if self.state_dim < 1:
            raise ValueError("state_dim must be >= 1")
        if not (0.0 < self.tn_alpha < 1.0) or self.tn_eps <= 0:
            raise ValueError("invalid TN settings")

    @property
    def head_width(self) -> int:
        return self.feature_dim // self.n_heads


@dataclass
class ModelParams:
    cfg: ModelConfig
    tensors: dict[str, np.ndarray]

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            cfg=self.cfg,
            tensors={k: v.astype(dtype) for k, v in self.tensors.items()},
        )


@dataclass
class ModelState:
    """Carried per-stream inference state: one TN and one mixer state per block."""

    tn: list[TNState]
    mixer: list[SSDState]
    frames_seen: int = 0


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_model(cfg: ModelConfig) -> ModelParams:
    """Fan-in-scaled uniform initialization, deterministic in cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    t: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    c_in = 3
    for i, c_out in enumerate(cfg.encoder_channels):
        t[f"enc{i}.w"] = uniform((9 * c_in, c_out), 9 * c_in)
        t[f"enc{i}.b"] = np.zeros(c_out)
        c_in = c_out
    d = cfg.feature_dim
    t["proj.w"] = uniform((c_in, d), c_in)
    t["proj.b"] = np.zeros(d)

    n, heads = cfg.state_dim, cfg.n_heads
    for i in range(cfg.n_blocks):
        p = f"blk{i}."
        t[p + "in.w"] = uniform((d, d), d)
        t[p + "in.b"] = np.zeros(d)
        t[p + "dt.w"] = uniform((d, heads), d) * 0.1
        t[p + "dt.b"] = np.array(
            [_inv_softplus(v) for v in np.linspace(0.3, 0.9, heads)]
        )
        t[p + "bsel.w"] = uniform((d, n), d)
        t[p + "bsel.b"] = uniform((n,), n)
        t[p + "csel.w"] = uniform((d, n), d)
        t[p + "csel.b"] = uniform((n,), n)
        # decay rates spread per state channel; kept negative via -exp(.)
        t[p + "a_log"] = np.broadcast_to(
            np.log(np.linspace(0.5, 8.0, n)), (heads, n)
        ).copy()
        t[p + "out.w"] = uniform((d, d), d)
        t[p + "out.b"] = np.zeros(d)
    t["head.w"] = uniform((d, 1), d)
    t["head.b"] = np.zeros(1)
    return ModelParams(cfg=cfg, tensors={k: v.astype(np.float32) for k, v in t.items()})


def param_count(params: ModelParams) -> int:
    return int(sum(v.size for v in params.tensors.values()))


def param_nbytes(params: ModelParams) -> int:
    return int(sum(v.nbytes for v in params.tensors.values()))


# ---------------------------------------------------------------------------
# chunk path (autodiff graph; run under no_grad for inference)
# ---------------------------------------------------------------------------


def _encoder_stage(x: Var, w: Var, b: Var) -> Var:
    m, h, ww, _ = x.shape
    cols = ad.extract_patches(x, 3, 1, 1)
    c_out = w.shape[1]
    y = cols.reshape(m * h * ww, -1) @ w + b
    y = y.reshape(m, h, ww, c_out).tanh()
    y = y.reshape(m, h // 2, 2, ww // 2, 2, c_out).mean(axis=(2, 4))
    return y


def _encoder_features(pv: dict[str, Var], x: Var, cfg: ModelConfig) -> Var:
    for i in range(len(cfg.encoder_channels)):
        x = _encoder_stage(x, pv[f"enc{i}.w"], pv[f"enc{i}.b"])
    x = x.mean(axis=(1, 2))
    return (x @ pv["proj.w"] + pv["proj.b"]).tanh()


def _tn_chunk_graph(f: Var, eps: float) -> Var:
    """Differentiable least-squares detrend + standardize over axis 1."""
    b, t_len, d = f.shape
    idx = np.arange(1, t_len + 1, dtype=f.data.dtype)[None, :, None]
    s_t = idx.sum()
    s_tt = (idx * idx).sum()
    denom = t_len * s_tt - s_t * s_t
    s_x = f.sum(axis=1, keepdims=True)
    s_tx = (f * idx).sum(axis=1, keepdims=True)
    beta0 = (s_tx * float(t_len) - s_x * s_t) * (1.0 / denom)
    beta1 = (s_x - beta0 * s_t) * (1.0 / t_len)
    r = f - (beta0 * idx + beta1)
    sigma = (r * r).mean(axis=1, keepdims=True).sqrt()
    return r / (sigma + eps)


def _zoh_graph(a: Var, la: Var, dt1: Var) -> Var:
    """Input coefficient (exp(a dt) - 1)/a with the small-|a dt| series."""
    small = np.abs(la.data) < _ZOH_SERIES_CUTOFF
    a_safe = Var(np.ones((1,), dtype=a.data.dtype)).where(small, a)
    exact = (la.exp() - 1.0) / a_safe
    series = dt1 * (la * 0.5 + 1.0)
    return series.where(small, exact)


def _block_graph(
    pv: dict[str, Var], prefix: str, f: Var, cfg: ModelConfig, tn_identity: bool
) -> Var:
    b, t_len, d = f.shape
    heads, n, w = cfg.n_heads, cfg.state_dim, cfg.head_width

    z = f if tn_identity else _tn_chunk_graph(f, cfg.tn_eps)
    u = (z @ pv[prefix + "in.w"] + pv[prefix + "in.b"]).tanh()

    if cfg.selective:
        dt = (u @ pv[prefix + "dt.w"] + pv[prefix + "dt.b"]).softplus()
        bsel = u @ pv[prefix + "bsel.w"] + pv[prefix + "bsel.b"]
        csel = u @ pv[prefix + "csel.w"] + pv[prefix + "csel.b"]
    else:
        grid = Var(np.zeros((b, t_len, 1), dtype=u.data.dtype))
        dt = (grid + pv[prefix + "dt.b"]).softplus()
        bsel = grid + pv[prefix + "bsel.b"]
        csel = grid + pv[prefix + "csel.b"]

    a = -pv[prefix + "a_log"].exp()  # (heads, N), strictly negative
    dt1 = dt.reshape(b, t_len, heads, 1)
    la = dt1 * a.reshape(1, 1, heads, n)
    bvec = _zoh_graph(a.reshape(1, 1, heads, n), la, dt1) * bsel.reshape(b, t_len, 1, n)

    la_h = la.transpose((0, 2, 1, 3))  # (B, heads, T, N)
    bvec_h = bvec.transpose((0, 2, 1, 3))
    x_h = u.reshape(b, t_len, heads, w).transpose((0, 2, 1, 3))
    drive = bvec_h.reshape(b, heads, t_len, n, 1) * x_h.reshape(b, heads, t_len, 1, w)
    states = ad.decay_scan(la_h, drive)
    c_h = csel.reshape(b, t_len, 1, n).transpose((0, 2, 1, 3))
    y = (states * c_h.reshape(b, 1, t_len, n, 1)).sum(axis=3)
    y = y.transpose((0, 2, 1, 3)).reshape(b, t_len, d)
    return f + (y @ pv[prefix + "out.w"] + pv[prefix + "out.b"])


def forward_graph(
    params: ModelParams,
    frames: np.ndarray,
    tn_identity: bool = False,
    slab: int = _ENCODER_SLAB,
) -> tuple[Var, dict[str, Var]]:
    """Build the (B, T) output graph for a (B, T, H, W, C) batch.

    Returns the output node and the parameter leaves (for gradient reads).
    """
    cfg = params.cfg
    b, t_len, h, w, c = frames.shape
    if (h, w) != cfg.input_resolution or c != 3:
        raise ValueError(
            f"frames {h}x{w}x{c} do not match configured {cfg.input_resolution} x3"
        )
    if t_len < 2:
        raise ValueError("chunk forward needs at least 2 frames")
    pv = {k: Var(v) for k, v in params.tensors.items()}

    flat = frames.reshape(b * t_len, h, w, c)
    feats = []
    for s in range(0, flat.shape[0], slab):
        feats.append(_encoder_features(pv, Var(flat[s : s + slab]), cfg))
    f = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)
    f = f.reshape(b, t_len, cfg.feature_dim)

    for i in range(cfg.n_blocks):
        f = _block_graph(pv, f"blk{i}.", f, cfg, tn_identity)
    out = (f @ pv["head.w"] + pv["head.b"]).reshape(b, t_len)
    return out, pv


def encode_frames(params: ModelParams, frames: np.ndarray) -> np.ndarray:
    """Per-frame encoder features, (T, D). Purely spatial: no temporal mixing."""
    dtype = params.tensors["head.w"].dtype
    pv = {k: Var(v) for k, v in params.tensors.items()}
    with ad.no_grad():
        out = _encoder_features(pv, Var(np.asarray(frames, dtype=dtype)), params.cfg)
    return out.data


def forward_chunk(
    params: ModelParams,
    frames: FrameTensor | np.ndarray,
    tn_identity: bool = False,
) -> BVPSignal:
    """Whole-clip parallel inference; output is frame-aligned with the input."""
    fps = 30.0
    if isinstance(frames, FrameTensor):
        fps = frames.fps
        frames = frames.values
    arr = np.asarray(frames, dtype=params.tensors["head.w"].dtype)
    with ad.no_grad():
        out, _ = forward_graph(params, arr[None], tn_identity=tn_identity)
    return BVPSignal(samples=out.data[0].astype(np.float64), fps=fps)


# ---------------------------------------------------------------------------
# flow path (plain numpy, constant work and memory per frame)
# ---------------------------------------------------------------------------


def flow_init(params: ModelParams) -> ModelState:
    """Fresh stream state: zero mixer states, TN trends seeded on first frame."""
    cfg = params.cfg
    dtype = params.tensors["head.w"].dtype
    d, n, heads, w = cfg.feature_dim, cfg.state_dim, cfg.n_heads, cfg.head_width
    tn_states = [
        TNState(
            mu=np.zeros(d), var=np.zeros(d), alpha=cfg.tn_alpha, eps=cfg.tn_eps
        )
        for _ in range(cfg.n_blocks)
    ]
    mixer = [SSDState(h=np.zeros((heads, n, w), dtype=dtype)) for _ in range(cfg.n_blocks)]
    return ModelState(tn=tn_states, mixer=mixer)


def state_bytes(state: ModelState) -> int:
    return int(
        sum(s.nbytes() for s in state.tn) + sum(s.nbytes() for s in state.mixer)
    )


def forward_flow_step(
    params: ModelParams,
    state: ModelState,
    frame: np.ndarray,
    tn_identity: bool = False,
) -> tuple[ModelState, float]:
    """Consume one (H, W, C) frame and emit one pulse value.

    Work and memory are independent of how many frames the stream has seen.
    """
    cfg = params.cfg
    p = params.tensors
    heads, n, w = cfg.n_heads, cfg.state_dim, cfg.head_width
    if frame.shape != cfg.input_resolution + (3,):
        raise ValueError(f"frame shape {frame.shape} does not match config")

    dtype = p["head.w"].dtype
    pv = {k: Var(v) for k, v in p.items()}
    with ad.no_grad():
        f = _encoder_features(pv, Var(frame[None].astype(dtype)), cfg).data[0]
    f = f.astype(np.float64)

    first = state.frames_seen == 0
    for i in range(cfg.n_blocks):
        if tn_identity:
            z = f
        else:
            tn_state = state.tn[i]
            if first:
                tn_state.mu[:] = f
            _, z = tn_mod.tn_flow_step(tn_state, f)
        u = np.tanh(z @ p[f"blk{i}.in.w"] + p[f"blk{i}.in.b"])
        if cfg.selective:
            dt = softplus(u @ p[f"blk{i}.dt.w"] + p[f"blk{i}.dt.b"])
            bsel = u @ p[f"blk{i}.bsel.w"] + p[f"blk{i}.bsel.b"]
            csel = u @ p[f"blk{i}.csel.w"] + p[f"blk{i}.csel.b"]
        else:
            dt = softplus(p[f"blk{i}.dt.b"])
            bsel = p[f"blk{i}.bsel.b"]
            csel = p[f"blk{i}.csel.b"]
        a = -np.exp(p[f"blk{i}.a_log"])  # (heads, N)
        abar = np.exp(a * dt[:, None])
        bvec = zoh_input_coeff(a, dt[:, None]) * bsel[None, :]
        y = ssd_step_heads(
            abar,
            bvec,
            np.broadcast_to(csel, (heads, n)),
            u.reshape(heads, w),
            state.mixer[i].h,
        )
        f = f + (y.reshape(cfg.feature_dim) @ p[f"blk{i}.out.w"] + p[f"blk{i}.out.b"])
    state.frames_seen += 1
    bvp = float(f @ p["head.w"][:, 0] + p["head.b"][0])
    return state, bvp


# ---------------------------------------------------------------------------
# checkpoint archive: text header (config + manifest) then tensor blobs
# ---------------------------------------------------------------------------

_CKPT_MAGIC = "MECKPT 1"


def _cfg_to_lines(cfg: ModelConfig) -> list[str]:
    return [
        f"cfg.input_resolution={cfg.input_resolution[0]},{cfg.input_resolution[1]}",
        "cfg.encoder_channels=" + ",".join(str(c) for c in cfg.encoder_channels),
        f"cfg.n_blocks={cfg.n_blocks}",
        f"cfg.feature_dim={cfg.feature_dim}",
        f"cfg.state_dim={cfg.state_dim}",
        f"cfg.n_heads={cfg.n_heads}",
        f"cfg.tn_alpha={cfg.tn_alpha:.9g}",
        f"cfg.tn_eps={cfg.tn_eps:.9g}",
        f"cfg.selective={int(cfg.selective)}",
        f"cfg.seed={cfg.seed}",
    ]


def _cfg_from_kv(kv: dict[str, str]) -> ModelConfig:
    def ints(s):
        return tuple(int(x) for x in s.split(",") if x)

    try:
        return ModelConfig(
            input_resolution=ints(kv["cfg.input_resolution"]),
            encoder_channels=ints(kv["cfg.encoder_channels"]),
            n_blocks=int(kv["cfg.n_blocks"]),
            feature_dim=int(kv["cfg.feature_dim"]),
            state_dim=int(kv["cfg.state_dim"]),
            n_heads=int(kv["cfg.n_heads"]),
            tn_alpha=float(kv["cfg.tn_alpha"]),
            tn_eps=float(kv["cfg.tn_eps"]),
            selective=bool(int(kv["cfg.selective"])),
            seed=int(kv["cfg.seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint config invalid: {exc}") from exc


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    extra: dict[str, np.ndarray] | None = None,
    meta: dict[str, str] | None = None,
) -> None:
    """Write config, manifest, and float32 tensor entries as one archive."""
    entries = dict(params.tensors)
    for k, v in (extra or {}).items():
        entries["extra." + k] = v
    blobs: list[bytes] = []
    manifest: list[str] = []
    offset = 0
    for name, arr in entries.items():
        blob = encode_array(np.asarray(arr, dtype=np.float32))
        shape = ",".join(str(s) for s in arr.shape)
        manifest.append(f"tensor {name} {shape} {offset} {len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    lines = [_CKPT_MAGIC]
    lines.extend(_cfg_to_lines(params.cfg))
    for k, v in (meta or {}).items():
        lines.append(f"meta.{k}={v}")
    lines.extend(manifest)
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(
    path: str | Path,
) -> tuple[ModelParams, dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    head_end = raw.find(b"\nend\n")
    if not raw.startswith(_CKPT_MAGIC.encode()) or head_end < 0:
        raise FormatError(f"{path}: not a checkpoint archive")
    header = raw[:head_end].decode("utf-8").splitlines()
    payload = raw[head_end + len(b"\nend\n") :]
    kv: dict[str, str] = {}
    manifest: list[tuple[str, tuple[int, ...], int, int]] = []
    for line in header[1:]:
        if line.startswith("tensor "):
            try:
                _, name, shape_s, off_s, len_s = line.split(" ")
                shape = tuple(int(x) for x in shape_s.split(",") if x)
                manifest.append((name, shape, int(off_s), int(len_s)))
            except ValueError as exc:
                raise FormatError(f"{path}: bad manifest line {line!r}") from exc
        elif "=" in line:
            k, _, v = line.partition("=")
            kv[k] = v
    cfg = _cfg_from_kv(kv)
    tensors: dict[str, np.ndarray] = {}
    extra: dict[str, np.ndarray] = {}
    for name, shape, off, length in manifest:
        if off + length > len(payload):
            raise FormatError(f"{path}: tensor {name} exceeds payload")
        arr = decode_array(payload[off : off + length], name=name)
        if arr.shape != shape:
            raise FormatError(
                f"{path}: tensor {name} shape {arr.shape} != manifest {shape}"
            )
        if name.startswith("extra."):
            extra[name[len("extra.") :]] = arr
        else:
            tensors[name] = arr
    params = ModelParams(cfg=cfg, tensors=tensors)
    expected = {k for k in init_model(cfg).tensors}
    if set(tensors) != expected:
        raise FormatError(f"{path}: parameter set does not match config")
    meta = {k[len("meta.") :]: v for k, v in kv.items() if k.startswith("meta.")}
    return params, extra, meta
