"""Differentiable substrate: Pre-LN transformer blocks, masked attention,
PEFT slots (bias deltas, low-rank deltas, layer-scale) and checkpoint I/O.

Tensor math is backed by torch; training runs in f32 and gradient checks in
f64. Base linears carry weight matrices only; biases exist solely as PEFT
deltas. The attention / prelm_block / grad_check surfaces are verified against
hand-written oracles in the test suite.
"""

from __future__ import annotations

import struct
from typing import Iterable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

CKPT_MAGIC = b"MCCK"
CKPT_VERSION = 1

PEFT_TARGETS = ("q", "k", "v", "o", "f1", "f2")


class ShapeMismatch(ValueError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


def _init(out_dim: int, in_dim: int, gen: torch.Generator,
          std: Optional[float] = None, dtype=torch.float32) -> nn.Parameter:
    # Fan-in scaling by default; a fixed small std starves the matching
    # softmax of signal at the widths used here.
    if std is None:
        std = in_dim ** -0.5
    w = torch.empty(out_dim, in_dim, dtype=dtype)
    w.normal_(0.0, std, generator=gen)
    return nn.Parameter(w)


class BlockParams(nn.Module):
    """One Pre-LN transformer block: attention projections + 4x GELU MLP.

    Residual-branch output projections are shrunk by 1/sqrt(2 * depth) so the
    stream keeps roughly unit scale through the stack.
    """

    def __init__(self, width: int, heads: int, gen: torch.Generator,
                 dtype=torch.float32, depth: int = 1):
        super().__init__()
        if width % heads:
            raise ShapeMismatch(f"heads {heads} must divide width {width}")
        self.width, self.heads = width, heads
        branch = (2.0 * max(depth, 1)) ** -0.5
        for name in ("wq", "wk", "wv"):
            setattr(self, name, _init(width, width, gen, dtype=dtype))
        self.wo = _init(width, width, gen, std=branch * width ** -0.5, dtype=dtype)
        self.w1 = _init(4 * width, width, gen, dtype=dtype)
        self.w2 = _init(width, 4 * width, gen,
                        std=branch * (4 * width) ** -0.5, dtype=dtype)
        self.ln1_w = nn.Parameter(torch.ones(width, dtype=dtype))
        self.ln1_b = nn.Parameter(torch.zeros(width, dtype=dtype))
        self.ln2_w = nn.Parameter(torch.ones(width, dtype=dtype))
        self.ln2_b = nn.Parameter(torch.zeros(width, dtype=dtype))


class PeftParams(nn.Module):
    """Adaptive slots for one block: per-projection bias delta + low-rank pair,
    and one layer-scale vector per residual branch.

    Neutral at construction: bias = 0, up-factor = 0, layer-scale = 1, so a
    fresh PEFT forward equals the shared-only forward exactly.
    """

    OUT_DIMS = {"q": 1, "k": 1, "v": 1, "o": 1, "f1": 4, "f2": 1}
    IN_DIMS = {"q": 1, "k": 1, "v": 1, "o": 1, "f1": 1, "f2": 4}

    def __init__(self, width: int, rank: int, gen: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.width, self.rank = width, rank
        for t in PEFT_TARGETS:
            out_d = self.OUT_DIMS[t] * width
            in_d = self.IN_DIMS[t] * width
            setattr(self, f"bias_{t}", nn.Parameter(torch.zeros(out_d, dtype=dtype)))
            setattr(self, f"down_{t}", _init(rank, in_d, gen, std=0.02, dtype=dtype))
            setattr(self, f"up_{t}", nn.Parameter(torch.zeros(out_d, rank, dtype=dtype)))
        self.ls_attn = nn.Parameter(torch.ones(width, dtype=dtype))
        self.ls_mlp = nn.Parameter(torch.ones(width, dtype=dtype))


def peft_linear(x: torch.Tensor, weight: torch.Tensor,
                peft: Optional[PeftParams], target: str) -> torch.Tensor:
    y = F.linear(x, weight)
    if peft is not None:
        y = y + F.linear(F.linear(x, getattr(peft, f"down_{target}")),
                         getattr(peft, f"up_{target}"))
        y = y + getattr(peft, f"bias_{target}")
    return y


def layer_norm(x: torch.Tensor, weight: Optional[torch.Tensor] = None,
               bias: Optional[torch.Tensor] = None, eps: float = 1e-5) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def causal_mask(n: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Additive [n, n] mask with -inf above the diagonal."""
    m = torch.full((n, n), float("-inf"), dtype=dtype, device=device)
    return torch.triu(m, diagonal=1)


def key_padding_mask(valid: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Additive [..., 1, K] mask hiding invalid keys (valid: [..., K] bool)."""
    m = torch.zeros(valid.shape, dtype=dtype, device=valid.device)
    m = m.masked_fill(~valid, float("-inf"))
    return m.unsqueeze(-2)


def attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor,
              mask: Optional[torch.Tensor] = None, heads: int = 1,
              w_o: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Multi-head scaled dot-product attention over already-projected inputs.

    queries [..., Sq, w], keys/values [..., Sk, w]; mask is additive and
    broadcastable to [..., Sq, Sk] (applied per head). Heads are split from the
    feature axis, re-concatenated, and optionally output-projected by w_o.
    """
    if queries.shape[-1] != keys.shape[-1] or keys.shape[:-2] != values.shape[:-2] \
            or keys.shape[-2] != values.shape[-2]:
        raise ShapeMismatch("query/key/value shapes are inconsistent")
    w = queries.shape[-1]
    if w % heads:
        raise ShapeMismatch(f"heads {heads} must divide width {w}")
    d_head = w // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, d_head).transpose(-3, -2)

    q, k, v = split(queries), split(keys), split(values)
    scores = q @ k.transpose(-1, -2) / d_head ** 0.5
    if mask is not None:
        if mask.dim() == scores.dim() - 1:
            mask = mask.unsqueeze(-3)  # broadcast over heads
        scores = scores + mask
    attn = torch.softmax(scores, dim=-1)
    out = attn @ v
    out = out.transpose(-3, -2).reshape(*queries.shape[:-1], w)
    if w_o is not None:
        out = F.linear(out, w_o)
    return out


def _qkv(h: torch.Tensor, params: BlockParams,
         peft: Optional[PeftParams]) -> torch.Tensor:
    # Single fused GEMM for the three projections (and their low-rank paths);
    # equivalent to per-target peft_linear but far fewer kernel launches.
    w = torch.cat([params.wq, params.wk, params.wv], dim=0)
    y = F.linear(h, w)
    if peft is not None:
        down = torch.cat([peft.down_q, peft.down_k, peft.down_v], dim=0)
        up = torch.block_diag(peft.up_q, peft.up_k, peft.up_v)
        y = y + F.linear(F.linear(h, down), up)
        y = y + torch.cat([peft.bias_q, peft.bias_k, peft.bias_v])
    return y


def prelm_block(x: torch.Tensor, params: BlockParams,
                mask: Optional[torch.Tensor] = None,
                peft: Optional[PeftParams] = None) -> torch.Tensor:
    """x + LS1 * Attn(LN(x)) followed by + LS2 * MLP(LN(.))."""
    if x.shape[-1] != params.width:
        raise ShapeMismatch(f"input width {x.shape[-1]} != block width {params.width}")
    h = layer_norm(x, params.ln1_w, params.ln1_b)
    q, k, v = _qkv(h, params, peft).chunk(3, dim=-1)
    a = attention(q, k, v, mask=mask, heads=params.heads)
    a = peft_linear(a, params.wo, peft, "o")
    if peft is not None:
        a = a * peft.ls_attn
    x = x + a
    h = layer_norm(x, params.ln2_w, params.ln2_b)
    m = F.gelu(peft_linear(h, params.w1, peft, "f1"))
    m = peft_linear(m, params.w2, peft, "f2")
    if peft is not None:
        m = m * peft.ls_mlp
    return x + m


def block_stack(x: torch.Tensor, blocks: Iterable[BlockParams],
                mask: Optional[torch.Tensor] = None,
                pefts: Optional[Sequence[Optional[PeftParams]]] = None) -> torch.Tensor:
    blocks = list(blocks)
    if pefts is None:
        pefts = [None] * len(blocks)
    if len(pefts) != len(blocks):
        raise ShapeMismatch("one PEFT slice per block is required")
    for blk, pf in zip(blocks, pefts):
        x = prelm_block(x, blk, mask=mask, peft=pf)
    return x


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(fn, params: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    fn() must return a scalar tensor computed from `params` (f64 leaves with
    requires_grad). Relative error per scalar is
    |analytic - numeric| / max(|numeric|, 1e-8).
    """
    params = list(params)
    for p in params:
        if p.grad is not None:
            p.grad = None
    loss = fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NonFiniteGradient("autograd produced a non-finite gradient")
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = fn().item()
                flat[i] = orig - h
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                if not (abs(numeric) < float("inf")):
                    raise NonFiniteGradient("finite differences produced a non-finite value")
                rel = abs(gflat[i].item() - numeric) / max(abs(numeric), 1e-8)
                worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint format: single little-endian file of named f32 records


def save_checkpoint(path, named_tensors: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name in sorted(named_tensors):
            t = named_tensors[name]
            if isinstance(t, torch.Tensor):
                arr = t.detach().cpu().to(torch.float32).numpy()
            else:
                import numpy as np
                arr = np.asarray(t, dtype=np.float32)
            nb = name.encode("utf-8")
            if len(nb) > 0xFFFF:
                raise CheckpointError(f"record name too long: {name}")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            dims = arr.shape
            fh.write(struct.pack("<B", len(dims)))
            fh.write(struct.pack(f"<{len(dims)}I", *dims))
            fh.write(arr.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    raw = open(path, "rb").read()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    import numpy as np
    out = {}
    off = 8
    while off < len(raw):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        count = 1
        for d in dims:
            count *= d
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
        out[name] = torch.from_numpy(arr)
    return out
