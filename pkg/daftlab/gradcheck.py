"""Central finite-difference oracle for the hand-written backward passes."""

import numpy as np

from daftlab.nn_core import TRAIN, backward, forward, softmax_cross_entropy


def relative_error(analytic, numeric, floor=1e-8):
    """``|a - n| / (|a| + |n|)`` over the whole tensor, 2-norms."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn, array, step=1e-6):
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        upper = fn()
        flat[i] = original - step
        lower = fn()
        flat[i] = original
        grad_flat[i] = (upper - lower) / (2.0 * step)
    return grad


def check_layer(layer, x, step=1e-6, seed=0):
    """Max relative error of a layer's input and parameter gradients.

    The scalar objective is ``sum(weights * layer(x))`` with fixed random
    weights. BN running statistics are restored after every evaluation.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out, ctx = layer.forward(x)
    weights = rng.normal(size=out.shape)
    saved = {name: value.copy() for name, value in layer.statistics().items()}

    def objective():
        value, _ = layer.forward(x)
        for name, stat in saved.items():
            setattr(layer, name, stat.copy())
        return float(np.sum(weights * value))

    grad_in, grads = layer.backward(ctx, weights)
    errors = {"input": relative_error(grad_in, numeric_gradient(objective, x, step))}
    for name, param in layer.parameters().items():
        errors[name] = relative_error(grads[name], numeric_gradient(objective, param, step))
    for name, stat in saved.items():
        setattr(layer, name, stat.copy())
    return errors


def check_network(net, x, labels, bn_mode=TRAIN, step=1e-6):
    """Max relative error per parameter path of the loss gradient."""
    saved = {path: value.copy() for path, value in net.statistics().items()}

    def restore():
        for path, layer in net.bn_layers():
            layer.running_mean = saved[f"{path}.running_mean"].copy()
            layer.running_var = saved[f"{path}.running_var"].copy()

    def objective():
        loss, _ = softmax_cross_entropy(forward(net, x, bn_mode, record=True).logits, labels)
        restore()
        return loss

    fp = forward(net, x, bn_mode, record=True)
    restore()
    _, loss_grad = softmax_cross_entropy(fp.logits, labels)
    bundle = backward(net, fp.contexts, loss_grad)
    params = net.parameters()
    return {path: relative_error(grad, numeric_gradient(objective, params[path], step))
            for path, grad in bundle.items()}
