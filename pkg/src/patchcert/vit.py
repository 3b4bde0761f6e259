"""Toy-scale vision transformer with fully-masked-token dropping.

The model is a pre-norm encoder over a *set* of positionally encoded
patch tokens: attention sees exactly the tokens present, so grid cells
whose entire p*p region is masked can be removed before the encoder
without changing what the surviving tokens compute. The masked-attention
path exists only as a verification oracle; the production path shrinks
the token sequence physically.

Parameters live in a flat name->array dict (float32) whose insertion
order doubles as the checkpoint manifest order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .ablation import AblatedImage, AblationSpec, ablation_set
from .certify import aggregate_votes, smoothed_predict
from .errors import DimensionError, FormatError, InputError, ParameterError

__all__ = [
    "ViTConfig",
    "TokenSet",
    "Model",
    "TOY_CONFIG",
    "init_params",
    "tokenize",
    "drop_masked_tokens",
    "encoder_forward",
    "ablation_logits",
    "process_ablation",
    "masked_attention_oracle_forward",
    "per_ablation_predictions",
    "smoothed_vit_forward",
    "loss_and_gradients",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"SVIT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    h: int
    w: int
    c: int
    p: int
    d: int
    heads: int
    layers: int
    k: int
    use_class_token: bool = True

    def __post_init__(self):
        if min(self.h, self.w, self.c, self.p, self.d, self.heads, self.layers) < 1:
            raise ParameterError("all config dimensions must be positive")
        if self.c not in (1, 3):
            raise ParameterError(f"channels must be 1 or 3, got {self.c}")
        if self.h % self.p or self.w % self.p:
            raise ParameterError(f"patch size {self.p} must divide {self.h}x{self.w}")
        if self.d % self.heads:
            raise ParameterError(f"embedding dim {self.d} not divisible by {self.heads} heads")
        if self.k < 2:
            raise ParameterError(f"need at least 2 classes, got {self.k}")

    @property
    def grid_h(self) -> int:
        return self.h // self.p

    @property
    def grid_w(self) -> int:
        return self.w // self.p

    @property
    def grid_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    def to_dict(self) -> dict:
        return {
            "h": self.h, "w": self.w, "c": self.c, "p": self.p, "d": self.d,
            "heads": self.heads, "layers": self.layers, "k": self.k,
            "use_class_token": self.use_class_token,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


TOY_CONFIG = ViTConfig(h=16, w=16, c=1, p=4, d=32, heads=4, layers=2, k=4)


@dataclass(frozen=True)
class TokenSet:
    """Unordered token collection; position identity travels with each token.

    positions[i] is the (row, col) grid cell of token i, or None for the
    class token. embeddings has one length-d row per token.
    """

    positions: tuple
    embeddings: np.ndarray

    def __post_init__(self):
        if len(self.positions) != self.embeddings.shape[0]:
            raise DimensionError("positions and embeddings disagree on token count")
        grid = [p for p in self.positions if p is not None]
        if len(set(grid)) != len(grid):
            raise InputError("duplicate grid positions in token set")
        if sum(1 for p in self.positions if p is None) > 1:
            raise InputError("at most one class token allowed")

    def __len__(self) -> int:
        return len(self.positions)

    def class_row(self) -> int | None:
        for i, p in enumerate(self.positions):
            if p is None:
                return i
        return None


def _param_names(cfg: ViTConfig) -> list[str]:
    names = ["patch_embed.weight", "patch_embed.bias", "pos_embed"]
    if cfg.use_class_token:
        names += ["cls_token", "cls_pos"]
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        names += [pre + "ln1.gamma", pre + "ln1.beta"]
        names += [pre + "attn." + n for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [pre + "ln2.gamma", pre + "ln2.beta"]
        names += [pre + "mlp.w1", pre + "mlp.b1", pre + "mlp.w2", pre + "mlp.b2"]
    names += ["final_ln.gamma", "final_ln.beta", "head.weight", "head.bias"]
    return names


def init_params(cfg: ViTConfig, seed: int = 0) -> dict:
    """Fresh float32 parameter dict: N(0, 0.02) weights, unit layer norms."""
    rng = np.random.default_rng(seed)
    d, k, pdim = cfg.d, cfg.k, cfg.p * cfg.p * cfg.c

    def w(*shape):
        return rng.normal(0.0, 0.02, size=shape).astype(np.float32)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    params: dict[str, np.ndarray] = {
        "patch_embed.weight": w(pdim, d),
        "patch_embed.bias": zeros(d),
        "pos_embed": w(cfg.grid_tokens, d),
    }
    if cfg.use_class_token:
        params["cls_token"] = w(d)
        params["cls_pos"] = w(d)
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        params[pre + "ln1.gamma"] = ones(d)
        params[pre + "ln1.beta"] = zeros(d)
        for nm in ("q", "k", "v", "o"):
            params[pre + "attn.w" + nm] = w(d, d)
            params[pre + "attn.b" + nm] = zeros(d)
        params[pre + "ln2.gamma"] = ones(d)
        params[pre + "ln2.beta"] = zeros(d)
        params[pre + "mlp.w1"] = w(d, 4 * d)
        params[pre + "mlp.b1"] = zeros(4 * d)
        params[pre + "mlp.w2"] = w(4 * d, d)
        params[pre + "mlp.b2"] = zeros(d)
    params["final_ln.gamma"] = ones(d)
    params["final_ln.beta"] = zeros(d)
    params["head.weight"] = w(d, k)
    params["head.bias"] = zeros(k)
    assert list(params) == _param_names(cfg)
    return params


@dataclass
class Model:
    """A config plus its parameter dict; immutable during inference."""

    cfg: ViTConfig
    params: dict

    @classmethod
    def init(cls, cfg: ViTConfig, seed: int = 0) -> "Model":
        return cls(cfg=cfg, params=init_params(cfg, seed))

    def copy(self) -> "Model":
        return Model(cfg=self.cfg, params={k: v.copy() for k, v in self.params.items()})


def _check_shape(z_m: AblatedImage, cfg: ViTConfig) -> None:
    if z_m.pixels.shape != (cfg.h, cfg.w, cfg.c):
        raise DimensionError(
            f"ablated image shape {z_m.pixels.shape} does not match config "
            f"({cfg.h}, {cfg.w}, {cfg.c})"
        )
    if z_m.mask.shape != (cfg.h, cfg.w):
        raise DimensionError(f"mask shape {z_m.mask.shape} != ({cfg.h}, {cfg.w})")


def _patch_matrix(pixels: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """All grid patches flattened row-major: (grid_tokens, p*p*c)."""
    gh, gw, p, c = cfg.grid_h, cfg.grid_w, cfg.p, cfg.c
    blocks = pixels.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(blocks.reshape(gh * gw, p * p * c))


def _surviving_cells(mask: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    """Boolean (grid_h, grid_w): cells whose p*p block keeps any pixel."""
    gh, gw, p = cfg.grid_h, cfg.grid_w, cfg.p
    return mask.reshape(gh, p, gw, p).any(axis=(1, 3))


def _embed_cells(patches, grid_idx, params, cfg, with_cls=True):
    """Project patch rows and add positional embeddings; prepend class token."""
    t = nx.bias_add(nx.matmul(patches, params["patch_embed.weight"]), params["patch_embed.bias"])
    t = t + params["pos_embed"][grid_idx]
    positions = [(int(g) // cfg.grid_w, int(g) % cfg.grid_w) for g in grid_idx]
    if cfg.use_class_token and with_cls:
        cls = (params["cls_token"] + params["cls_pos"])[None, :]
        t = np.concatenate([cls.astype(t.dtype), t], axis=0)
        positions = [None] + positions
    return TokenSet(positions=tuple(positions), embeddings=t)


def tokenize(z_m: AblatedImage, params: dict, cfg: ViTConfig) -> TokenSet:
    """Positionally encode every grid cell of the (already masked) image."""
    _check_shape(z_m, cfg)
    patches = _patch_matrix(z_m.pixels, cfg)
    return _embed_cells(patches, np.arange(cfg.grid_tokens), params, cfg)


def drop_masked_tokens(t: TokenSet, mask: np.ndarray, cfg: ViTConfig) -> TokenSet:
    """Remove grid tokens whose entire p*p region is masked out."""
    if mask.shape != (cfg.h, cfg.w):
        raise DimensionError(f"mask shape {mask.shape} != ({cfg.h}, {cfg.w})")
    alive = _surviving_cells(mask, cfg)
    keep = [i for i, pos in enumerate(t.positions) if pos is None or alive[pos[0], pos[1]]]
    return TokenSet(
        positions=tuple(t.positions[i] for i in keep),
        embeddings=t.embeddings[keep],
    )


def _layer_params(params: dict, i: int) -> dict:
    pre = f"layers.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def _forward_core(x, readout, params, cfg, key_keep=None, record=False):
    """Shared encoder body.

    readout is ("cls", row) or ("mean", keep_bool_or_None). key_keep, when
    given, blanks attention scores toward dropped tokens (the oracle
    path); it cannot be combined with gradient recording.
    """
    if x.shape[0] == 0:
        raise InputError("cannot classify an empty token set")
    if record and key_keep is not None:
        raise ParameterError("gradient recording is only supported on the reduced path")
    n = x.shape[0]
    dh = cfg.head_dim
    scale = 1.0 / math.sqrt(dh)  # python float: keeps float32 inputs float32
    ctx = {"layers": [], "n": n, "readout": readout} if record else None

    for i in range(cfg.layers):
        lp = _layer_params(params, i)
        h1, ln1_ctx = nx.layer_norm_fwd(x, lp["ln1.gamma"], lp["ln1.beta"])
        q = nx.bias_add(nx.matmul(h1, lp["attn.wq"]), lp["attn.bq"])
        kk = nx.bias_add(nx.matmul(h1, lp["attn.wk"]), lp["attn.bk"])
        v = nx.bias_add(nx.matmul(h1, lp["attn.wv"]), lp["attn.bv"])
        o = np.empty_like(q)
        attn_maps = []
        for hd in range(cfg.heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            scores = nx.matmul(q[:, sl], np.ascontiguousarray(kk[:, sl].T)) * scale
            if key_keep is not None:
                scores[:, ~key_keep] = -np.inf
            a = nx.softmax_last_dim(scores)
            o[:, sl] = nx.matmul(a, v[:, sl])
            attn_maps.append(a)
        attn_out = nx.bias_add(nx.matmul(o, lp["attn.wo"]), lp["attn.bo"])
        x_mid = x + attn_out
        h2, ln2_ctx = nx.layer_norm_fwd(x_mid, lp["ln2.gamma"], lp["ln2.beta"])
        m1 = nx.bias_add(nx.matmul(h2, lp["mlp.w1"]), lp["mlp.b1"])
        act = nx.gelu(m1)
        m2 = nx.bias_add(nx.matmul(act, lp["mlp.w2"]), lp["mlp.b2"])
        x_out = x_mid + m2
        if record:
            ctx["layers"].append(
                {
                    "ln1": ln1_ctx, "h1": h1, "q": q, "k": kk, "v": v,
                    "attn": attn_maps, "o": o, "ln2": ln2_ctx, "h2": h2,
                    "m1": m1, "act": act,
                }
            )
        x = x_out

    f, lnf_ctx = nx.layer_norm_fwd(x, params["final_ln.gamma"], params["final_ln.beta"])
    mode, arg = readout
    if mode == "cls":
        r = f[arg : arg + 1]
    else:
        keep = arg if arg is not None else np.ones(n, dtype=bool)
        r = f[keep].mean(axis=0, keepdims=True)
    logits = nx.bias_add(nx.matmul(r, params["head.weight"]), params["head.bias"])[0]
    if record:
        ctx["final_ln"] = lnf_ctx
        ctx["f"] = f
        ctx["r"] = r
        ctx["scale"] = scale
        return logits, ctx
    return logits


def encoder_forward(t: TokenSet, params: dict, cfg: ViTConfig) -> np.ndarray:
    """Logits for an explicit token set; readout from the class token."""
    if cfg.use_class_token:
        row = t.class_row()
        if row is None:
            raise InputError("config expects a class token but none is present")
        readout = ("cls", row)
    else:
        readout = ("mean", None)
    return _forward_core(t.embeddings, readout, params, cfg)


def _reduced_tokens(z_m: AblatedImage, params: dict, cfg: ViTConfig):
    """Fused tokenize+drop: project only grid cells that keep a pixel."""
    _check_shape(z_m, cfg)
    alive = _surviving_cells(z_m.mask, cfg).ravel()
    grid_idx = np.nonzero(alive)[0]
    if grid_idx.size == 0:
        raise InputError("ablation masks every token; nothing to classify")
    patches = _patch_matrix(z_m.pixels, cfg)[grid_idx]
    return _embed_cells(patches, grid_idx, params, cfg), patches, grid_idx


def ablation_logits(z_m: AblatedImage, params: dict, cfg: ViTConfig) -> np.ndarray:
    """Logits of the reduced-token forward pass for one ablation."""
    tokens, _, _ = _reduced_tokens(z_m, params, cfg)
    return encoder_forward(tokens, params, cfg)


def process_ablation(z_m: AblatedImage, params: dict, cfg: ViTConfig) -> int:
    """Class of one ablation: tokenize, drop masked tokens, encode, argmax."""
    return int(np.argmax(ablation_logits(z_m, params, cfg)))


def masked_attention_oracle_forward(z_m: AblatedImage, params: dict, cfg: ViTConfig) -> np.ndarray:
    """Reference path: full token set with dropped tokens neutralized.

    Dropped-eligible tokens are blocked as attention keys and excluded
    from readout, which is mathematically the same computation as running
    the encoder on the reduced set.
    """
    _check_shape(z_m, cfg)
    t = tokenize(z_m, params, cfg)
    alive = _surviving_cells(z_m.mask, cfg)
    keep = np.array(
        [pos is None or alive[pos[0], pos[1]] for pos in t.positions], dtype=bool
    )
    if not keep.any():
        raise InputError("ablation masks every token; nothing to classify")
    if cfg.use_class_token:
        readout = ("cls", t.class_row())
    else:
        readout = ("mean", keep)
    return _forward_core(t.embeddings, readout, params, cfg, key_keep=keep)


def per_ablation_predictions(x: np.ndarray, spec: AblationSpec, params: dict, cfg: ViTConfig):
    """Base-classifier prediction for every ablation in the set."""
    return [process_ablation(z_m, params, cfg) for z_m in ablation_set(x, spec)]


def smoothed_vit_forward(x, spec: AblationSpec, params: dict, cfg: ViTConfig):
    """Smoothed prediction and vote counts over the full ablation set."""
    votes = aggregate_votes(per_ablation_predictions(x, spec, params, cfg), cfg.k)
    return smoothed_predict(votes), votes


def loss_and_gradients(z_m: AblatedImage, label: int, params: dict, cfg: ViTConfig):
    """Cross-entropy loss of one ablation and exact parameter gradients.

    Returns (loss, grads) where grads has one entry per parameter;
    parameters untouched by dropped tokens receive zero gradient rows.
    """
    tokens, patches, grid_idx = _reduced_tokens(z_m, params, cfg)
    readout = ("cls", tokens.class_row()) if cfg.use_class_token else ("mean", None)
    logits, ctx = _forward_core(tokens.embeddings, readout, params, cfg, record=True)
    loss = nx.cross_entropy(logits, label)

    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dlogits = nx.cross_entropy_backward(logits, label)

    r = ctx["r"]
    grads["head.weight"] += nx.matmul(r.T, dlogits[None, :])
    grads["head.bias"] += dlogits
    dr = nx.matmul(dlogits[None, :], params["head.weight"].T)

    n = ctx["n"]
    df = np.zeros_like(ctx["f"])
    mode, arg = readout
    if mode == "cls":
        df[arg] = dr[0]
    else:
        df += dr / n
    dx, dgf, dbf = nx.layer_norm_bwd(ctx["final_ln"], df)
    grads["final_ln.gamma"] += dgf
    grads["final_ln.beta"] += dbf

    dh = cfg.head_dim
    scale = ctx["scale"]
    for i in reversed(range(cfg.layers)):
        lc = ctx["layers"][i]
        lp = _layer_params(params, i)
        pre = f"layers.{i}."

        # MLP residual: x_out = x_mid + W2(gelu(W1 ln2(x_mid)))
        dm2 = dx
        grads[pre + "mlp.w2"] += nx.matmul(lc["act"].T, dm2)
        grads[pre + "mlp.b2"] += dm2.sum(axis=0)
        dact = nx.matmul(dm2, lp["mlp.w2"].T)
        dm1 = nx.gelu_backward(lc["m1"], dact)
        grads[pre + "mlp.w1"] += nx.matmul(lc["h2"].T, dm1)
        grads[pre + "mlp.b1"] += dm1.sum(axis=0)
        dh2 = nx.matmul(dm1, lp["mlp.w1"].T)
        dx_mid, dg2, db2 = nx.layer_norm_bwd(lc["ln2"], dh2)
        grads[pre + "ln2.gamma"] += dg2
        grads[pre + "ln2.beta"] += db2
        dx = dx + dx_mid

        # attention residual: x_mid = x_in + Wo(attn(ln1(x_in)))
        dattn = dx
        grads[pre + "attn.wo"] += nx.matmul(lc["o"].T, dattn)
        grads[pre + "attn.bo"] += dattn.sum(axis=0)
        do = nx.matmul(dattn, lp["attn.wo"].T)
        dq = np.empty_like(lc["q"])
        dk = np.empty_like(lc["k"])
        dv = np.empty_like(lc["v"])
        for hd in range(cfg.heads):
            sl = slice(hd * dh, (hd + 1) * dh)
            a = lc["attn"][hd]
            doh = do[:, sl]
            da = nx.matmul(doh, np.ascontiguousarray(lc["v"][:, sl].T))
            dv[:, sl] = nx.matmul(a.T, doh)
            ds = nx.softmax_backward(a, da)
            dq[:, sl] = nx.matmul(ds, lc["k"][:, sl]) * scale
            dk[:, sl] = nx.matmul(ds.T, lc["q"][:, sl]) * scale
        h1 = lc["h1"]
        grads[pre + "attn.wq"] += nx.matmul(h1.T, dq)
        grads[pre + "attn.bq"] += dq.sum(axis=0)
        grads[pre + "attn.wk"] += nx.matmul(h1.T, dk)
        grads[pre + "attn.bk"] += dk.sum(axis=0)
        grads[pre + "attn.wv"] += nx.matmul(h1.T, dv)
        grads[pre + "attn.bv"] += dv.sum(axis=0)
        dh1 = (
            nx.matmul(dq, lp["attn.wq"].T)
            + nx.matmul(dk, lp["attn.wk"].T)
            + nx.matmul(dv, lp["attn.wv"].T)
        )
        dx_in, dg1, db1 = nx.layer_norm_bwd(lc["ln1"], dh1)
        grads[pre + "ln1.gamma"] += dg1
        grads[pre + "ln1.beta"] += db1
        dx = dx + dx_in

    # token embeddings: cls row first (if present), then surviving grid rows
    dtok = dx
    row0 = 0
    if cfg.use_class_token:
        grads["cls_token"] += dtok[0]
        grads["cls_pos"] += dtok[0]
        row0 = 1
    dgrid = dtok[row0:]
    grads["patch_embed.weight"] += nx.matmul(patches.T, dgrid)
    grads["patch_embed.bias"] += dgrid.sum(axis=0)
    np.add.at(grads["pos_embed"], grid_idx, dgrid)
    return loss, grads


def save_checkpoint(model: Model, path) -> None:
    """Write magic, version, JSON header, then raw little-endian float32."""
    names = _param_names(model.cfg)
    manifest = [{"name": n, "shape": list(model.params[n].shape)} for n in names]
    header = json.dumps(
        {"config": model.cfg.to_dict(), "manifest": manifest}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes())


def load_checkpoint(path) -> Model:
    """Read and validate a checkpoint written by save_checkpoint."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
        cfg = ViTConfig.from_dict(header["config"])
        manifest = header["manifest"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    if [e["name"] for e in manifest] != _param_names(cfg):
        raise FormatError("checkpoint manifest does not match its config")
    params = {}
    off = 12 + hlen
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = off + 4 * count
        if end > len(blob):
            raise FormatError(f"checkpoint truncated in tensor {entry['name']!r}")
        params[entry["name"]] = (
            np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).astype(np.float32)
        )
        off = end
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after last tensor")
    return Model(cfg=cfg, params=params)
