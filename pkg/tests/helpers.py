"""Shared oracles, gradient-check utilities, and pipeline drivers."""

import json
import os

import numpy as np

from segmoe.cli import main as cli_main
from segmoe.tensor import Tensor, backward


def write_config_file(path, cfg):
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return str(path)


def run_pipeline(config_path, workdir):
    """gen-data -> train -> attack -> universal -> transfer -> report."""
    base = ["--config", config_path, "--workdir", workdir]
    assert cli_main(["gen-data", *base]) == 0
    assert cli_main(["train", *base]) == 0
    assert cli_main(["attack", *base]) == 0
    assert cli_main(["universal", *base]) == 0
    assert cli_main(["transfer", *base]) == 0
    assert cli_main([
        "report",
        "--records",
        os.path.join(workdir, "records", "attack.csv"),
        os.path.join(workdir, "records", "universal.csv"),
        "--out",
        os.path.join(workdir, "report"),
    ]) == 0


def collect_text_outputs(workdir):
    """All CSV/TXT artifact bytes keyed by path relative to workdir."""
    out = {}
    for root, _, files in os.walk(workdir):
        for f in sorted(files):
            if f.endswith(".csv") or f.endswith(".txt"):
                path = os.path.join(root, f)
                out[os.path.relpath(path, workdir)] = open(path, "rb").read()
    return out


def conv2d_oracle(x, w, bias=None, stride=1, padding=0):
    """Nested-loop cross-correlation, the independent reference for conv2d."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    y = np.zeros((n, f, oh, ow))
    for bi in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    s = 0.0
                    for ci in range(c):
                        for a in range(kh):
                            for b in range(kw):
                                u = i * stride + a - padding
                                v = j * stride + b - padding
                                if 0 <= u < h and 0 <= v < wd:
                                    s += x[bi, ci, u, v] * w[fi, ci, a, b]
                    y[bi, fi, i, j] = s + (bias[fi] if bias is not None else 0.0)
    return y


def cross_entropy_oracle(logits, target):
    """Scalar per-pixel cross-entropy, averaged the slow way."""
    n, k, h, w = logits.shape
    total = 0.0
    for bi in range(n):
        for i in range(h):
            for j in range(w):
                z = logits[bi, :, i, j]
                z = z - z.max()
                p = np.exp(z) / np.exp(z).sum()
                total += -np.log(p[target[bi, i, j]])
    return total / (n * h * w)


def fd_gradient(f, arr, h=1e-5):
    """Central finite differences of scalar-valued f at arr, elementwise."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(arr)
        flat[i] = orig - h
        fm = f(arr)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_err(auto, fd):
    """Max elementwise |auto-fd| / max(1, |fd|): relative above 1, absolute below."""
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd))))


def check_input_grad(loss_fn, x0, h=1e-5, tol=1e-4):
    """Assert autodiff input gradient of loss_fn matches central differences."""
    xt = Tensor(x0, requires_grad=True)
    loss = loss_fn(xt)
    backward(loss)
    fd = fd_gradient(lambda a: loss_fn(Tensor(a)).item(), x0.copy(), h=h)
    err = grad_rel_err(xt.grad, fd)
    assert err < tol, f"input gradient mismatch: rel err {err:.3e}"
    return err


def check_param_grads(model_loss_fn, params, h=1e-5, tol=1e-4):
    """Assert autodiff parameter gradients match central differences.

    model_loss_fn() evaluates the loss with the current (possibly nudged)
    parameter data and returns a scalar Tensor; params is the list of
    parameter Tensors to check, each with grads already populated.
    """
    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter missing gradient"
        fd = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        fdflat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = model_loss_fn().item()
            flat[i] = orig - h
            fm = model_loss_fn().item()
            flat[i] = orig
            fdflat[i] = (fp - fm) / (2 * h)
        err = grad_rel_err(p.grad, fd)
        assert err < tol, f"param gradient mismatch: rel err {err:.3e} on shape {p.data.shape}"
        worst = max(worst, err)
    return worst
