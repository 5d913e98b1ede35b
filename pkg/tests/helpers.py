"""Hand-built models shared by the unit tests."""
import numpy as np

from transferlab.nn import Dense, Network


def linear_model(W, b=None, input_shape=None):
    """Single Dense layer with the given (in, out) weights."""
    W = np.asarray(W, dtype=np.float64)
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=np.float64)
    shape = input_shape or (W.shape[0],)
    return Network([Dense(W.shape[0], W.shape[1])], [{"weight": W, "bias": b}], shape, W.shape[1])


def constant_model(cls, num_classes=3, in_features=2):
    """Predicts ``cls`` everywhere: zero weights, bias favouring one class."""
    b = np.zeros(num_classes)
    b[cls] = 1.0
    return linear_model(np.zeros((in_features, num_classes)), b)


def finite_diff(f, x, h=1e-5):
    """Central differences of scalar f at every coordinate of x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))
