import numpy as np

from synthvision import data
from synthvision.core import Tensor


def numeric_grad(fn, arrays, index, h=1e-5, entries=None):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``entries`` restricts the probe to a list of flat indices; other entries
    are left as NaN.
    """
    target = arrays[index]
    grad = np.full(target.shape, np.nan)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        orig = flat[i]
        flat[i] = orig + h
        up = fn(*arrays)
        flat[i] = orig - h
        down = fn(*arrays)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def tape_grads(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) via backward."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    return [t.grad for t in tensors]


def scalar_fn(build):
    def fn(*arrays):
        return float(build(*[Tensor(a) for a in arrays]).data)
    return fn


def rel_error(a, b, floor=1e-12):
    """Max abs difference over the larger magnitude; ``floor`` guards all-zero gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_op_grads(build, arrays, h=1e-5):
    """Max relative error over all inputs between tape and finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = tape_grads(build, arrays)
    fn = scalar_fn(build)
    worst = 0.0
    for i in range(len(arrays)):
        numeric = numeric_grad(fn, arrays, i, h)
        worst = max(worst, rel_error(analytic[i], numeric))
    return worst


def records_for(policy_counts):
    recs = []
    for label in data.LABELS:
        for split, n in policy_counts.items():
            origin = "synthetic" if (label == "M-pox" and split == "train") else "real"
            recs.extend(data.SampleRecord(f"{label}/{split}/{i}.png", label, origin, split) for i in range(n))
    return recs


def reference_manifest():
    return data.DatasetManifest(records_for({"train": 1000, "validation": 150, "test": 100}), data.reference_policy())


def mutate_record(records, index, kind, choice):
    recs = [data.SampleRecord(r.path, r.label, r.origin, r.split) for r in records]
    r = recs[index]
    if kind == "delete":
        del recs[index]
    elif kind == "duplicate":
        recs.append(data.SampleRecord(r.path, r.label, r.origin, r.split))
    elif kind == "label":
        others = [l for l in data.LABELS if l != r.label]
        r.label = others[choice % 2]
    elif kind == "split":
        others = [s for s in data.SPLITS if s != r.split]
        r.split = others[choice % 2]
    elif kind == "origin":
        r.origin = "real" if r.origin == "synthetic" else "synthetic"
    return recs
