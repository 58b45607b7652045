"""Device-conditioned transformer for species identification.

Each record is z-scored per channel and passed through a residual stack of
conditional modification modules. A module turns statistics of the device's
reference waveforms into a channel-expansion matrix, adds a learnable
positional embedding, runs multi-head self-attention over time, aggregates
across channels with several square kernels and maps back to the input
channels. A small GELU head classifies the time-mean of the final hidden
state.

Parameters live in a flat ``dict[str, torch.Tensor]`` so that checkpoints,
finite-difference checks and ablations can address every tensor by name.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-6
CKPT_MAGIC = b"PSTM"
CKPT_VERSION = 1
ABLATIONS = ("cmm", "pos_enc", "attention", "aggregation")
FULL_SCALE = 4095.0
GEN_HIDDEN = 16


@dataclass(frozen=True)
class ModelConfig:
    T: int = 128
    C: int = 2
    C_prime: int = 16
    L_layers: int = 2
    heads: int = 4
    d_model: int = 32
    k_ref: int = 8
    N_pool: int = 100
    kernel_scales: tuple = (1, 3, 5)
    classes: int = 5
    head_hidden: int = 32
    # ablation switches: False replaces the component by its identity
    cmm: bool = True
    pos_enc: bool = True
    attention: bool = True
    aggregation: bool = True

    def __post_init__(self):
        if self.k_ref < 1 or self.k_ref > self.N_pool:
            raise ValueError(f"k_ref must satisfy 1 <= k <= N ({self.k_ref} vs {self.N_pool})")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.C_prime < self.C:
            raise ValueError("C_prime must be at least C")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_scales):
            raise ValueError("kernel sizes must be odd and positive")

    def ablated(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}")
        return dataclasses.replace(self, **{name: False})

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["kernel_scales"] = list(self.kernel_scales)
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        d = json.loads(text)
        d["kernel_scales"] = tuple(d["kernel_scales"])
        return cls(**d)


# --- reference waves ---------------------------------------------------------


def sample_refwaves(pool, k: int, seed) -> np.ndarray:
    """Uniform sample of ``k`` pool waveforms without replacement."""
    pool = np.asarray(pool)
    n = pool.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"cannot sample k={k} reference waves from a pool of {n}")
    idx = np.random.default_rng(seed).permutation(n)[:k]
    return pool[idx]


def ref_stats(refs) -> np.ndarray:
    """``(..., k, T, C)`` raw reference waves to a ``(..., 2C)`` summary.

    Per channel: mean over k and T divided by the ADC full scale, then
    ``log1p`` of the standard deviation.
    """
    refs = np.asarray(refs, dtype=float)
    mean = refs.mean(axis=(-3, -2))
    sd = refs.std(axis=(-3, -2))
    return np.concatenate([mean / FULL_SCALE, np.log1p(sd)], axis=-1)


def normalize(x):
    """Per-instance, per-channel z-score over time; ``x`` is ``(..., T, C)``."""
    if isinstance(x, torch.Tensor):
        mu = x.mean(dim=-2, keepdim=True)
        sd = x.std(dim=-2, unbiased=False, keepdim=True)
        return (x - mu) / (sd + EPS)
    x = np.asarray(x, dtype=float)
    return (x - x.mean(axis=-2, keepdims=True)) / (x.std(axis=-2, keepdims=True) + EPS)


# --- parameters --------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0, *, zero_merge: bool = False,
                dtype=torch.float64) -> dict[str, torch.Tensor]:
    g = torch.Generator().manual_seed(int(seed))

    def rnd(*shape, scale):
        return torch.randn(*shape, generator=g, dtype=torch.float64) * scale

    C, Cp, d = cfg.C, cfg.C_prime, cfg.d_model
    p: dict[str, torch.Tensor] = {}
    for l in range(cfg.L_layers):
        pre = f"l{l}."
        p[pre + "gen_w1"] = rnd(2 * C, GEN_HIDDEN, scale=1 / math.sqrt(2 * C))
        p[pre + "gen_b1"] = torch.zeros(GEN_HIDDEN, dtype=torch.float64)
        p[pre + "gen_w2"] = rnd(GEN_HIDDEN, C * Cp, scale=0.5 / math.sqrt(GEN_HIDDEN))
        p[pre + "gen_b2"] = torch.zeros(C * Cp, dtype=torch.float64)
        p[pre + "pos"] = rnd(cfg.T, Cp, scale=0.1)
        p[pre + "w_in"] = rnd(Cp, d, scale=1 / math.sqrt(Cp))
        for name in ("w_q", "w_k", "w_v", "w_o"):
            p[pre + name] = rnd(d, d, scale=1 / math.sqrt(d))
        p[pre + "w_out"] = rnd(d, Cp, scale=1 / math.sqrt(d))
        for k in cfg.kernel_scales:
            p[pre + f"conv{k}"] = rnd(k, k, scale=1 / k)
        merge = rnd(Cp, C, scale=1 / math.sqrt(Cp))
        p[pre + "merge"] = torch.zeros_like(merge) if zero_merge else merge
        p[pre + "merge_b"] = torch.zeros(C, dtype=torch.float64)
    p["head_w1"] = rnd(C, cfg.head_hidden, scale=1 / math.sqrt(C))
    p["head_b1"] = torch.zeros(cfg.head_hidden, dtype=torch.float64)
    p["head_w2"] = rnd(cfg.head_hidden, cfg.classes, scale=1 / math.sqrt(cfg.head_hidden))
    p["head_b2"] = torch.zeros(cfg.classes, dtype=torch.float64)
    return {k: v.to(dtype) for k, v in p.items()}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {k: tuple(v.shape) for k, v in init_params(cfg).items()}


def _identity_pad(C: int, Cp: int, dtype) -> torch.Tensor:
    eye = torch.zeros(C, Cp, dtype=dtype)
    eye[:, :C] = torch.eye(C, dtype=dtype)
    return eye


# --- forward -----------------------------------------------------------------


def projection(stats: torch.Tensor, params: dict, layer: int, cfg: ModelConfig) -> torch.Tensor:
    """``(B, 2C)`` reference statistics to ``(B, C, C')`` expansion matrices."""
    base = _identity_pad(cfg.C, cfg.C_prime, stats.dtype)
    if not cfg.cmm:
        return base.expand(stats.shape[0], -1, -1)
    pre = f"l{layer}."
    h = torch.tanh(stats @ params[pre + "gen_w1"] + params[pre + "gen_b1"])
    delta = (h @ params[pre + "gen_w2"] + params[pre + "gen_b2"]).view(-1, cfg.C, cfg.C_prime)
    return base + delta


def multi_head_attention(e: torch.Tensor, params: dict, layer: int, cfg: ModelConfig):
    """Scaled dot-product attention over time; returns ``(out, weights)``."""
    pre = f"l{layer}."
    B, T, _ = e.shape
    h, dk = cfg.heads, cfg.d_model // cfg.heads
    z = e @ params[pre + "w_in"]

    def split(m):
        return m.view(B, T, h, dk).transpose(1, 2)

    q, k, v = (split(z @ params[pre + n]) for n in ("w_q", "w_k", "w_v"))
    att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dk), dim=-1)
    heads = (att @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
    return (heads @ params[pre + "w_o"]) @ params[pre + "w_out"], att


def aggregate(a: torch.Tensor, params: dict, layer: int, cfg: ModelConfig) -> torch.Tensor:
    """Average of same-padded square convolutions over the ``T x C'`` plane."""
    if not cfg.aggregation:
        return a
    x = a.unsqueeze(1)
    outs = [F.conv2d(x, params[f"l{layer}.conv{k}"][None, None], padding=k // 2) for k in cfg.kernel_scales]
    return torch.stack(outs).mean(dim=0).squeeze(1)


def cmm_forward(h: torch.Tensor, stats: torch.Tensor, params: dict, layer: int, cfg: ModelConfig):
    """One residual module: ``(B, T, C)`` to ``(B, T, C)`` plus attention weights."""
    if h.dim() != 3 or h.shape[1:] != (cfg.T, cfg.C):
        raise ValueError(f"expected (B, {cfg.T}, {cfg.C}) hidden state, got {tuple(h.shape)}")
    if stats.shape != (h.shape[0], 2 * cfg.C):
        raise ValueError(f"expected ({h.shape[0]}, {2 * cfg.C}) reference statistics, got {tuple(stats.shape)}")
    pre = f"l{layer}."
    w = projection(stats, params, layer, cfg)
    e = torch.bmm(h, w)
    if cfg.pos_enc:
        e = e + params[pre + "pos"]
    if cfg.attention:
        a, att = multi_head_attention(e, params, layer, cfg)
    else:
        a, att = e, None
    y = aggregate(a, params, layer, cfg) @ params[pre + "merge"] + params[pre + "merge_b"]
    return h + y, att


def model_forward(x, stats, params: dict, cfg: ModelConfig, *, return_aux: bool = False):
    """Logits ``(B, classes)`` for raw inputs ``x`` of shape ``(B, T, C)``."""
    dtype = next(iter(params.values())).dtype
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=dtype)
    stats = torch.as_tensor(np.asarray(stats) if not isinstance(stats, torch.Tensor) else stats, dtype=dtype)
    h = normalize(x)
    hidden, atts = [h], []
    for l in range(cfg.L_layers):
        h, att = cmm_forward(h, stats, params, l, cfg)
        hidden.append(h)
        atts.append(att)
    z = F.gelu(h.mean(dim=1) @ params["head_w1"] + params["head_b1"])
    logits = z @ params["head_w2"] + params["head_b2"]
    if return_aux:
        return logits, {"hidden": hidden, "attention": atts}
    return logits


# --- batching ----------------------------------------------------------------


def _step_seed(seed: int, *parts: int) -> int:
    return int(np.random.default_rng([seed, *parts]).integers(2**62))


def batch_stats(devices, pools: dict, k: int, seed: int) -> np.ndarray:
    """Fresh reference sample per record from its own device pool."""
    rng = np.random.default_rng(seed)
    out = []
    for dev in devices:
        if dev not in pools:
            raise KeyError(f"no reference pool for device {dev!r}")
        out.append(ref_stats(sample_refwaves(pools[dev], k, rng.integers(2**62))))
    return np.stack(out)


def loss_fn(params, x, stats, y, cfg):
    logits = model_forward(x, stats, params, cfg)
    return F.cross_entropy(logits, torch.as_tensor(np.asarray(y), dtype=torch.long))


# --- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 60
    patience: int = 10
    seed: int = 0
    float32: bool = True


def predict(x, devices, pools, params, cfg: ModelConfig, seed: int = 0, batch: int = 256) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    preds = []
    with torch.no_grad():
        for s in range(0, len(x), batch):
            st = batch_stats(devices[s : s + batch], pools, cfg.k_ref, _step_seed(seed, 7, s))
            preds.append(model_forward(x[s : s + batch], st, params, cfg).argmax(dim=1).numpy())
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def train(x, y, devices, pools, cfg: ModelConfig, tcfg: TrainConfig = TrainConfig(), *,
          val=None, params=None):
    """Adam on softmax cross-entropy with early stopping on validation accuracy.

    ``x`` is ``(n, T, C)`` raw counts, ``devices`` the device id of every
    record and ``pools`` maps device id to its ``(N, T, C)`` reference pool.
    ``val`` is an optional ``(x, y, devices)`` triple. Returns the best
    parameters (float64) and the per-epoch history.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    devices = list(devices)
    for d in set(devices) | (set(val[2]) if val is not None else set()):
        if d not in pools:
            raise KeyError(f"no reference pool for device {d!r}")
    torch.manual_seed(tcfg.seed)
    dtype = torch.float32 if tcfg.float32 else torch.float64
    if params is None:
        params = init_params(cfg, tcfg.seed)
    params = {k: v.detach().to(dtype).clone().requires_grad_(True) for k, v in params.items()}
    opt = torch.optim.Adam(params.values(), lr=tcfg.lr)
    rng = np.random.default_rng([tcfg.seed, 1])
    history = []
    best = {k: v.detach().double().clone() for k, v in params.items()}
    best_acc, stale = -1.0, 0
    for epoch in range(tcfg.max_epochs):
        order = rng.permutation(len(y))
        losses, seeds = [], []
        for step, s in enumerate(range(0, len(y), tcfg.batch_size)):
            idx = order[s : s + tcfg.batch_size]
            step_seed = _step_seed(tcfg.seed, epoch, step)
            seeds.append(step_seed)
            st = batch_stats([devices[i] for i in idx], pools, cfg.k_ref, step_seed)
            opt.zero_grad()
            loss = loss_fn(params, x[idx], st, y[idx], cfg)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "refwave_seed_first": seeds[0],
                 "refwave_seed_last": seeds[-1], "steps": len(seeds)}
        if val is not None and len(val[1]):
            pred = predict(val[0], list(val[2]), pools, params, cfg, seed=tcfg.seed)
            acc = float(np.mean(pred == np.asarray(val[1])))
            entry["val_acc"] = acc
            if acc > best_acc:
                best_acc, stale = acc, 0
                best = {k: v.detach().double().clone() for k, v in params.items()}
            else:
                stale += 1
        history.append(entry)
        if val is not None and stale >= tcfg.patience:
            break
    if val is None or not len(val[1]):
        best = {k: v.detach().double().clone() for k, v in params.items()}
    return best, history


# --- gradient verification ---------------------------------------------------


def fd_errors(params, x, stats, y, cfg: ModelConfig, *, n_params: int = 200, step: float = 1e-5,
              seed: int = 0):
    """Analytic and central-difference gradients at random parameter entries.

    Returns ``(analytic, numeric)`` arrays for ``n_params`` entries drawn
    uniformly over all scalar parameters (float64).
    """
    p = {k: v.detach().double().clone().requires_grad_(True) for k, v in params.items()}
    loss = loss_fn(p, x, stats, y, cfg)
    grads = torch.autograd.grad(loss, list(p.values()), allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(p[k])) for k, g in zip(p, grads)}
    names = list(p)
    sizes = np.array([p[k].numel() for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    analytic, numeric = [], []
    with torch.no_grad():
        for flat in np.sort(picks):
            t = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, j = names[t], int(flat - offsets[t])
            view = p[name].view(-1)
            old = view[j].item()
            view[j] = old + step
            lp = loss_fn(p, x, stats, y, cfg).item()
            view[j] = old - step
            lm = loss_fn(p, x, stats, y, cfg).item()
            view[j] = old
            analytic.append(grads[name].view(-1)[j].item())
            numeric.append((lp - lm) / (2 * step))
    return np.array(analytic), np.array(numeric)


def relative_errors(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(params, x, stats, y, cfg: ModelConfig, *, n_params: int = 200, step: float = 1e-5,
               seed: int = 0) -> float:
    """Max relative error of the backward pass over random parameter entries."""
    a, n = fd_errors(params, x, stats, y, cfg, n_params=n_params, step=step, seed=seed)
    return float(relative_errors(a, n).max())


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: dict, cfg: ModelConfig) -> None:
    """Binary tensor container plus ``<path>.json`` holding the config."""
    names = sorted(params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(names)))
        for name in names:
            t = params[name]
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), t.dim()))
            fh.write(raw)
            fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
        for name in names:
            arr = params[name].detach().double().numpy()
            fh.write(arr.astype("<f8").tobytes())
    with open(f"{path}.json", "w") as fh:
        fh.write(cfg.to_json())
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict, ModelConfig]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError("not a model checkpoint")
    version, n = struct.unpack_from("<HI", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 10
    table = []
    for _ in range(n):
        ln, nd = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos : pos + ln].decode()
        pos += ln
        shape = struct.unpack_from(f"<{nd}I", blob, pos)
        pos += 4 * nd
        table.append((name, shape))
    params = {}
    for name, shape in table:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        params[name] = torch.from_numpy(arr.astype(np.float64))
    if pos != len(blob):
        raise ValueError("trailing bytes in checkpoint")
    with open(f"{path}.json") as fh:
        cfg = ModelConfig.from_json(fh.read())
    return params, cfg
