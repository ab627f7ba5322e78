"""Small shared builders for the test suite."""
import numpy as np

from safectrl import detect, suppress
from safectrl import numerics as nx
from safectrl.data import PreferencePair
from safectrl.diffusion import Denoiser, encode_prompts
from safectrl.numerics import Tensor


def denoiser64(seed: int = 0) -> Denoiser:
    """A fresh denoiser with float64 weights, for finite-difference checks."""
    den = Denoiser(seed=seed)
    for k, p in den.params.items():
        den.params[k] = Tensor(p.data, dtype=np.float64)
    den.trained = True
    return den


def to64(*tensors):
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True


def directional_check(fn, params, seed: int = 0, h: float = 1e-6) -> float:
    """Relative error between the tape gradient and a central difference along a random direction."""
    for p in params:
        p.grad = None
    nx.backward(fn())
    rng = np.random.default_rng([seed, 77])
    dirs = [rng.standard_normal(p.shape) for p in params]
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, dirs))
    base = [p.data.copy() for p in params]
    with nx.no_grad():
        for p, b, d in zip(params, base, dirs):
            p.data = b + h * d
        fp = float(fn().data)
        for p, b, d in zip(params, base, dirs):
            p.data = b - h * d
        fm = float(fn().data)
    for p, b in zip(params, base):
        p.data = b
    numeric = (fp - fm) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-12)


def toy_pairs(n: int, seed: int = 0) -> list[PreferencePair]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        y_w = rng.uniform(-1, 1, (16, 16, 3)).astype(np.float32)
        y_l = y_w.copy()
        y_l[2:7, 9:14] = (1.0, 0.7, -1.0)
        out.append(PreferencePair(i, ["red", "box", "hazard", "park"], y_w, y_l))
    return out


def head_setup(seed: int):
    """A detection head and a captured bundle, both in float64, plus a ground-truth pair of masks."""
    den = Denoiser(seed=0)
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(-1, 1, (2, 16, 16, 3)).astype(np.float32)
    tokens = encode_prompts([["red", "box", "hazard", "park"], ["blue", "box", "night"]])
    gt = np.zeros((2, 8, 8), np.float32)
    gt[0, 1:4, 5:8] = 1
    gt[1, 4:7, 1:4] = 1
    eps = rng.standard_normal(imgs.shape).astype(np.float32)
    bundle = detect._capture(den, imgs, tokens, np.array([650, 750]), eps)
    head = detect.DetectHead(seed).attach(den)
    head.q_risk = Tensor(head.q_risk.data, requires_grad=True, dtype=np.float64)
    head.log_temp = Tensor(head.log_temp.data, requires_grad=True, dtype=np.float64)
    head.w_k = head.w_k.astype(np.float64)
    bundle.queries = bundle.queries.astype(np.float64)
    bundle.text = bundle.text.astype(np.float64)
    bundle.a_self = bundle.a_self.astype(np.float64)
    return head, bundle, gt


def dpo_setup(seed: int, beta: float = 0.1):
    """Batched DPO loss closure over two toy pairs with a perturbed float64 adapter."""
    den = denoiser64(0)
    ad = suppress.SuppressAdapter(den, seed)
    to64(ad.w_v, ad.safe_ctx)
    rng = np.random.default_rng(seed)
    ad.safe_ctx.data = rng.normal(size=ad.safe_ctx.shape) * 0.1
    pairs = toy_pairs(2, seed)
    y_w = np.stack([p.y_w for p in pairs])
    y_l = np.stack([p.y_l for p in pairs])
    tok = encode_prompts([p.tokens for p in pairs])
    t = rng.integers(1, 601, size=2)
    eps = rng.standard_normal(y_w.shape)

    def loss():
        return suppress.batch_dpo_loss(ad, den, y_w, y_l, tok, t, eps, beta)[0]

    return loss, ad
