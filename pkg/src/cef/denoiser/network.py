"""Small convolutional residual network with hand-written gradients.

The raw network F maps (scaled noisy target, noise embedding input, lead
time embedding input, conditioning channels) to a target-shaped output.
Convolutions are 3x3 with periodic padding along W and zero padding along H.
Parameters live in one flat float64 vector ``theta``; layers are views.

Layer stack::

    emb   = silu(silu((phi(c_noise) + phi(t)) W1 + b1) W2 + b2)
    h     = conv_in([x, cond])
    block: h = h + conv2(drop(silu(conv1(silu(h)) + emb P + p)))
    out   = conv_out(silu(h))
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import EmbeddingConfig, fourier_features, fourier_features_grad


class TrainingFault(FloatingPointError):
    """Nonfinite activations or losses during a forward/backward pass."""


def _mm(a, b):
    # single-row products take a GEMV path whose rounding differs from GEMM;
    # padding keeps every row bit-identical regardless of batch composition
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


# exp(-x) overflowing to inf gives the correct limit 0, so the warning is noise
def silu(x):
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def silu_grad(x):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


def pad_periodic(x):
    """(B, H, W, C) -> (B, H+2, W+2, C): wrap along W, zeros along H."""
    xp = np.concatenate([x[:, :, -1:], x, x[:, :, :1]], axis=2)
    return np.pad(xp, ((0, 0), (1, 1), (0, 0), (0, 0)))


def im2col(x):
    b, h, w, c = x.shape
    xp = pad_periodic(x)
    cols = np.empty((b, h, w, 9, c), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, 3 * dy + dx] = xp[:, dy : dy + h, dx : dx + w]
    return cols.reshape(b * h * w, 9 * c)


def col2im(dcols, shape):
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 9, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + w] += dcols[:, :, :, 3 * dy + dx]
    dx_ = dxp[:, 1 : h + 1, 1 : w + 1].copy()
    dx_[:, :, -1] += dxp[:, 1 : h + 1, 0]
    dx_[:, :, 0] += dxp[:, 1 : h + 1, w + 1]
    return dx_


@dataclass(frozen=True)
class Architecture:
    target_channels: int
    cond_channels: int
    width: int = 32
    blocks: int = 3
    dropout: float = 0.1
    lead_time_scale: float = 240.0
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["embedding"] = EmbeddingConfig(**d.get("embedding", {}))
        return cls(**d)


class ConvResNet:
    """Trainable backend. ``raw_apply`` is the inference entry point."""

    kind = "convresnet"

    def __init__(self, arch: Architecture, theta=None, seed: int = 0, dtype=np.float64):
        self.arch = arch
        self.dtype = np.dtype(dtype)
        self.layout = self._layout(arch)
        self.size = sum(int(np.prod(s)) for _, s in self.layout)
        if theta is None:
            theta = self.init_theta(seed)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.size,):
            raise ValueError(f"theta has shape {theta.shape}, expected ({self.size},)")
        self.theta = theta

    @staticmethod
    def _layout(arch: Architecture):
        e, d, c = arch.embedding.feature_dim, arch.embedding.output_dim, arch.width
        cin = arch.target_channels + arch.cond_channels
        layout = [
            ("emb_w1", (e, d)), ("emb_b1", (d,)),
            ("emb_w2", (d, d)), ("emb_b2", (d,)),
            ("conv_in_w", (9 * cin, c)), ("conv_in_b", (c,)),
        ]
        for i in range(arch.blocks):
            layout += [
                (f"b{i}_conv1_w", (9 * c, c)), (f"b{i}_conv1_b", (c,)),
                (f"b{i}_proj_w", (d, c)), (f"b{i}_proj_b", (c,)),
                (f"b{i}_conv2_w", (9 * c, c)), (f"b{i}_conv2_b", (c,)),
            ]
        layout += [("conv_out_w", (9 * c, arch.target_channels)), ("conv_out_b", (arch.target_channels,))]
        return layout

    def views(self, theta):
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = theta[i : i + n].reshape(shape)
            i += n
        return out

    def init_theta(self, seed: int = 0) -> np.ndarray:
        """Xavier-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.size)
        for name, arr in self.views(theta).items():
            if name.endswith("_b") or name.endswith("_b1") or name.endswith("_b2"):
                continue
            fan_in, fan_out = arr.shape
            if "conv" in name:
                fan_out *= 9
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr[...] = rng.uniform(-limit, limit, size=arr.shape)
        return theta

    # -- forward / backward -------------------------------------------------

    def forward(self, x, c_noise, t_norm, cond, theta=None, train=False, rng=None, keep=False):
        """Evaluate F for a batch.

        x: (B, V, H, W) scaled noisy target; c_noise, t_norm: (B,);
        cond: (B, Cc, H, W). Returns (out, cache); cache is None unless
        ``keep``.
        """
        theta = self.theta if theta is None else theta
        dt = self.dtype
        p = {k: v.astype(dt, copy=False) for k, v in self.views(theta).items()}
        arch = self.arch
        b = x.shape[0]
        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (b,))
        t_norm = np.broadcast_to(np.asarray(t_norm, dtype=np.float64), (b,))
        feats = (fourier_features(c_noise, arch.embedding) + fourier_features(t_norm, arch.embedding)).astype(dt)
        e1 = _mm(feats, p["emb_w1"]) + p["emb_b1"]
        a1 = silu(e1)
        e2 = _mm(a1, p["emb_w2"]) + p["emb_b2"]
        emb = silu(e2)

        inp = np.concatenate([x, cond], axis=1).astype(dt).transpose(0, 2, 3, 1)
        shape_in = inp.shape
        bh, hh, ww = b, inp.shape[1], inp.shape[2]
        cols_in = im2col(inp)
        h = (_mm(cols_in, p["conv_in_w"]) + p["conv_in_b"]).reshape(bh, hh, ww, arch.width)
        blocks = []
        for i in range(arch.blocks):
            u1 = silu(h)
            cols1 = im2col(u1)
            proj = _mm(emb, p[f"b{i}_proj_w"]) + p[f"b{i}_proj_b"]
            c1 = (_mm(cols1, p[f"b{i}_conv1_w"]) + p[f"b{i}_conv1_b"]).reshape(h.shape) + proj[:, None, None, :]
            u2 = silu(c1)
            mask = None
            if train and arch.dropout > 0:
                if rng is None:
                    raise ValueError("dropout in training mode needs an rng")
                keep_p = 1.0 - arch.dropout
                mask = (rng.random(u2.shape) < keep_p).astype(dt) / keep_p
                u2 = u2 * mask
            cols2 = im2col(u2)
            c2 = (_mm(cols2, p[f"b{i}_conv2_w"]) + p[f"b{i}_conv2_b"]).reshape(h.shape)
            if keep:
                blocks.append((h, cols1, c1, mask, cols2))
            h = h + c2
        uo = silu(h)
        cols_o = im2col(uo)
        out = (_mm(cols_o, p["conv_out_w"]) + p["conv_out_b"]).reshape(bh, hh, ww, arch.target_channels)
        out = out.transpose(0, 3, 1, 2).astype(np.float64)
        if not np.all(np.isfinite(out)):
            raise TrainingFault("nonfinite network output")
        cache = None
        if keep:
            cache = dict(
                p=p, c_noise=c_noise, t_norm=t_norm, feats=feats, e1=e1, a1=a1, e2=e2, emb=emb,
                shape_in=shape_in, cols_in=cols_in, blocks=blocks, h=h, cols_o=cols_o,
                n_target=x.shape[1],
            )
        return out, cache

    def backward(self, cache, dout):
        """Gradients of sum(dout * out) w.r.t. theta and the inputs."""
        p = cache["p"]
        arch = self.arch
        dt = self.dtype
        grads = {name: None for name, _ in self.layout}
        h = cache["h"]
        b, hh, ww, c = h.shape
        g = np.ascontiguousarray(np.asarray(dout, dtype=dt).transpose(0, 2, 3, 1)).reshape(-1, arch.target_channels)
        grads["conv_out_w"] = cache["cols_o"].T @ g
        grads["conv_out_b"] = g.sum(axis=0)
        dh = col2im(g @ p["conv_out_w"].T, h.shape) * silu_grad(h)
        demb = np.zeros_like(cache["emb"])
        for i in reversed(range(arch.blocks)):
            h_in, cols1, c1, mask, cols2 = cache["blocks"][i]
            dc2 = dh.reshape(-1, c)
            grads[f"b{i}_conv2_w"] = cols2.T @ dc2
            grads[f"b{i}_conv2_b"] = dc2.sum(axis=0)
            du2 = col2im(dc2 @ p[f"b{i}_conv2_w"].T, h.shape)
            if mask is not None:
                du2 = du2 * mask
            dc1 = du2 * silu_grad(c1)
            dproj = dc1.sum(axis=(1, 2))
            grads[f"b{i}_proj_w"] = cache["emb"].T @ dproj
            grads[f"b{i}_proj_b"] = dproj.sum(axis=0)
            demb += dproj @ p[f"b{i}_proj_w"].T
            dc1f = dc1.reshape(-1, c)
            grads[f"b{i}_conv1_w"] = cols1.T @ dc1f
            grads[f"b{i}_conv1_b"] = dc1f.sum(axis=0)
            du1 = col2im(dc1f @ p[f"b{i}_conv1_w"].T, h.shape)
            dh = dh + du1 * silu_grad(h_in)
        dhf = dh.reshape(-1, c)
        grads["conv_in_w"] = cache["cols_in"].T @ dhf
        grads["conv_in_b"] = dhf.sum(axis=0)
        dinp = col2im(dhf @ p["conv_in_w"].T, cache["shape_in"]).transpose(0, 3, 1, 2)

        de2 = demb * silu_grad(cache["e2"])
        grads["emb_w2"] = cache["a1"].T @ de2
        grads["emb_b2"] = de2.sum(axis=0)
        de1 = (de2 @ p["emb_w2"].T) * silu_grad(cache["e1"])
        grads["emb_w1"] = cache["feats"].T @ de1
        grads["emb_b1"] = de1.sum(axis=0)
        dfeats = (de1 @ p["emb_w1"].T).astype(np.float64)

        dtheta = np.concatenate([np.asarray(grads[name], dtype=np.float64).ravel() for name, _ in self.layout])
        if not np.all(np.isfinite(dtheta)):
            raise TrainingFault("nonfinite gradient")
        nt = cache["n_target"]
        dinp = dinp.astype(np.float64)
        inputs = dict(
            x=dinp[:, :nt],
            cond=dinp[:, nt:],
            c_noise=(dfeats * fourier_features_grad(cache["c_noise"], arch.embedding)).sum(axis=-1),
            t_norm=(dfeats * fourier_features_grad(cache["t_norm"], arch.embedding)).sum(axis=-1),
        )
        return dtheta, inputs

    # -- backend interface --------------------------------------------------

    def raw_apply(self, x, c_noise, t_norm, cond):
        out, _ = self.forward(x, c_noise, t_norm, cond)
        return out

    def descriptor(self) -> dict:
        return {"kind": self.kind, "architecture": self.arch.to_dict(), "dtype": self.dtype.name}
