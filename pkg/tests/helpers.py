import numpy as np

from dreamaug import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def analytic_grad(f_tensor, x: np.ndarray) -> np.ndarray:
    xt = ad.Tensor(x, requires_grad=True)
    f_tensor(xt).backward()
    return xt.grad


def conv_oracle(x, k, b, stride=1, padding=0):
    n, c, h, w = x.shape
    d, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, d, ho, wo))
    for a in range(n):
        for o in range(d):
            for i in range(ho):
                for j in range(wo):
                    s = b[o]
                    for ch in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                s += xp[a, ch, i * stride + p, j * stride + q] * k[o, ch, p, q]
                    out[a, o, i, j] = s
    return out
