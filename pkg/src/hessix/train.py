"""Stochastic training of the hybrid model: Gaussian likelihood with a
learnable noise variance, the gated-weight KL penalty, and a small L2 pull
on the main-effect head, minimized with Adam.

Gradients are hand-derived backpropagation.  Relaxed masks carry their
uniform noise, so every gate is a differentiable function of its dropout
logit (pathwise gradient); one relaxed mask is shared per minibatch.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bnn import (
    HybridModel,
    MaskSample,
    P_CLAMP,
    clamp_probability,
    kl_regularizer,
    mean_gates,
    mlp_forward,
    predictive_distribution,
    sample_mask,
)
from .core import AdamState, RngStream, act_eval, adam_step, standardize_fit_apply
from .data import Dataset

LOG_2PI = math.log(2.0 * math.pi)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    temperature: float = 0.1
    lengthscale: float = 1e-4
    mc_per_batch: int = 1
    seed: int = 0
    patience: int = 20
    beta_penalty: float = 1e-6
    hidden: tuple = (64, 64)
    activation: str = "tanh"
    init_drop_probability: float = 0.1
    input_drop_probability: float | None = None
    eval_mc_samples: int = 50
    curve_every: int = 1  # 0 disables per-epoch curve rows
    curve_mc_samples: int = 25
    disable_interaction_head: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if not (0.0 < self.temperature <= 1.0):
            raise ValueError("temperature must lie in (0, 1]")
        if self.lengthscale <= 0:
            raise ValueError("length-scale must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs, batch size and patience must be >= 1")


@dataclass
class FitReport:
    train_nelbo: float
    val_nelbo: float
    test_rmse: float
    coverage95: float
    epochs_run: int

    def __post_init__(self):
        if not (0.0 <= self.coverage95 <= 1.0):
            raise ValueError("coverage must lie in [0, 1]")


# --- flat parameter vector ------------------------------------------------

def param_vector(model: HybridModel) -> np.ndarray:
    net = model.net
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b)
    parts.extend(net.gate_logits)
    parts.append(model.beta)
    parts.append(np.array([model.intercept, model.obs_logvar]))
    return np.concatenate(parts)


def set_param_vector(model: HybridModel, vec: np.ndarray) -> None:
    net = model.net
    pos = 0
    for l, spec in enumerate(net.layers):
        n = spec.in_width * spec.out_width
        net.weights[l] = vec[pos:pos + n].reshape(spec.in_width, spec.out_width)
        pos += n
        net.biases[l] = vec[pos:pos + spec.out_width].copy()
        pos += spec.out_width
    for l, spec in enumerate(net.layers):
        net.gate_logits[l] = vec[pos:pos + spec.in_width].copy()
        pos += spec.in_width
    d = model.n_features
    model.beta = vec[pos:pos + d].copy()
    pos += d
    model.intercept = float(vec[pos])
    model.obs_logvar = float(vec[pos + 1])


# --- loss and gradients ---------------------------------------------------

def _gates_from_uniforms(net, uniforms):
    """Relaxed gates plus dz/dlogit, dp/dlogit per gated layer."""
    t = net.temperature
    zs, dz_drho, p_list, dp_drho = [], [], [], []
    for lg, u in zip(net.gate_logits, uniforms):
        sig = 1.0 / (1.0 + np.exp(-lg))
        interior = (sig > P_CLAMP) & (sig < 1.0 - P_CLAMP)
        p = clamp_probability(sig)
        logit_u = np.log(u) - np.log1p(-u)
        logit_keep = np.log1p(-p) - np.log(p)
        z = 1.0 / (1.0 + np.exp(-(logit_keep + logit_u) / t))
        zs.append(z)
        dz_drho.append(np.where(interior, -z * (1.0 - z) / t, 0.0))
        p_list.append(p)
        dp_drho.append(np.where(interior, sig * (1.0 - sig), 0.0))
    return zs, dz_drho, p_list, dp_drho


def _loss_and_grads(model: HybridModel, x, y, uniforms, n_data: int,
                    beta_penalty: float, skip_net: bool = False):
    """Single-mask negative ELBO on a batch plus gradients for every
    parameter group.  `skip_net` removes the interaction head entirely."""
    net = model.net
    batch = x.shape[0]
    acts = net.activations()

    if skip_net:
        g_out = np.zeros(batch)
    else:
        zs, dz_drho, p_list, dp_drho = _gates_from_uniforms(net, uniforms)
        v_list, a_list, d1_list = [x], [], []
        value = x
        for l in range(net.depth):
            a = value * zs[l]
            s = a @ net.weights[l] + net.biases[l]
            value, d1, _ = act_eval(acts[l], s)
            a_list.append(a)
            d1_list.append(d1)
            v_list.append(value)
        g_out = value[:, 0]

    pred = x @ model.beta + model.intercept + g_out
    resid = pred - y
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        sigma2 = float(np.exp(model.obs_logvar))
        nll = 0.5 * (LOG_2PI + model.obs_logvar) + float(np.mean(resid ** 2) / (2.0 * sigma2))
    pen = beta_penalty * (float(model.beta @ model.beta) + model.intercept ** 2)
    kl = 0.0 if skip_net else kl_regularizer(net)
    loss = nll + (kl + pen) / n_data

    if not np.isfinite(loss):
        raise TrainingDiverged(-1, f"non-finite loss (nll={nll!r}, kl={kl!r})")

    d_pred = resid / (batch * sigma2)
    grads = {
        "beta": x.T @ d_pred + 2.0 * beta_penalty * model.beta / n_data,
        "intercept": float(np.sum(d_pred)) + 2.0 * beta_penalty * model.intercept / n_data,
        "obs_logvar": 0.5 - float(np.sum(resid ** 2)) / (2.0 * batch * sigma2),
    }

    if skip_net:
        grads["weights"] = [np.zeros_like(w) for w in net.weights]
        grads["biases"] = [np.zeros_like(b) for b in net.biases]
        grads["gate_logits"] = [np.zeros_like(g) for g in net.gate_logits]
        return loss, grads

    ls2 = net.lengthscale ** 2
    g_weights, g_biases, g_logits = [], [], []
    dv = d_pred[:, None]  # d loss / d final node values
    for l in range(net.depth - 1, -1, -1):
        delta = dv * d1_list[l]
        row_sq = np.sum(net.weights[l] ** 2, axis=1)
        gw = a_list[l].T @ delta + (ls2 * (1.0 - p_list[l]))[:, None] * net.weights[l] / n_data
        gb = delta.sum(axis=0)
        da = delta @ net.weights[l].T
        gz = np.sum(da * v_list[l], axis=0)
        # gate logit: pathwise data term plus the KL term through p
        logit_p = np.log(p_list[l]) - np.log1p(-p_list[l])
        dkl_dp = logit_p - 0.5 * ls2 * row_sq
        grho = gz * dz_drho[l] + dkl_dp * dp_drho[l] / n_data
        g_weights.append(gw)
        g_biases.append(gb)
        g_logits.append(grho)
        dv = da * zs[l]
    grads["weights"] = g_weights[::-1]
    grads["biases"] = g_biases[::-1]
    grads["gate_logits"] = g_logits[::-1]
    return loss, grads


def grad_vector(model: HybridModel, grads: dict) -> np.ndarray:
    parts = []
    for gw, gb in zip(grads["weights"], grads["biases"]):
        parts.append(gw.ravel())
        parts.append(gb)
    parts.extend(grads["gate_logits"])
    parts.append(grads["beta"])
    parts.append(np.array([grads["intercept"], grads["obs_logvar"]]))
    return np.concatenate(parts)


def negative_elbo(model: HybridModel, x: np.ndarray, y: np.ndarray,
                  mask: MaskSample, n_data: int, beta_penalty: float = 1e-6) -> float:
    """Single-sample negative ELBO of a batch under one relaxed mask.

    The mask's gates are re-derived from its uniforms and the model's current
    dropout logits, so the value responds to every parameter group.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if mask.mode != "relaxed":
        raise ValueError("negative_elbo needs a relaxed mask")
    loss, _ = _loss_and_grads(model, x, y, mask.uniforms, n_data, beta_penalty)
    return loss


def deterministic_nelbo(model: HybridModel, x, y, n_data: int,
                        beta_penalty: float = 1e-6,
                        skip_net: bool = False) -> float:
    """Negative ELBO with gates fixed at their keep probabilities.

    Deterministic, so comparable across epochs; used for early stopping and
    the training curve.
    """
    if skip_net:
        g_out = np.zeros(x.shape[0])
    else:
        g_out = mlp_forward(model.net, x, mean_gates(model.net))
    pred = x @ model.beta + model.intercept + g_out
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        sigma2 = float(np.exp(model.obs_logvar))
        nll = 0.5 * (LOG_2PI + model.obs_logvar) + float(np.mean((pred - y) ** 2) / (2.0 * sigma2))
    pen = beta_penalty * (float(model.beta @ model.beta) + model.intercept ** 2)
    kl = 0.0 if skip_net else kl_regularizer(model.net)
    return nll + (kl + pen) / n_data


def _coverage(model, x, y, n_samples, rng):
    mean, var = predictive_distribution(model, x, n_samples, rng)
    width = 2.0 * np.sqrt(var)
    return float(np.mean((y >= mean - width) & (y <= mean + width)))


def calibration_coverage(model: HybridModel, dataset: Dataset,
                         n_samples: int = 100, rng: RngStream | None = None) -> float:
    """Fraction of held-out targets inside the 95% predictive interval
    (mean +/- 2 predictive std).  Needs at least 100 Monte Carlo samples."""
    if n_samples < 100:
        raise ValueError("calibration needs at least 100 MC samples")
    if dataset.n == 0:
        raise ValueError("empty dataset")
    if rng is None:
        rng = RngStream(0, (424242,))
    return _coverage(model, dataset.x, dataset.y, n_samples, rng)


def _raw_rmse(model, y_std, y_pred_std):
    # report on the raw target scale when the model knows it
    scale = model.y_standardizer.std[0] if model.y_standardizer is not None else 1.0
    return float(np.sqrt(np.mean((y_pred_std - y_std) ** 2))) * float(scale)


def fit(model: HybridModel, train: Dataset, val: Dataset, config: TrainConfig,
        test: Dataset | None = None, callback=None, curve_path=None) -> FitReport:
    """Minimize the negative ELBO with Adam; keep the best-validation epoch.

    Expects train/val/test already standardized with the shared standardizer
    (attach it to the model first if raw-scale reporting is wanted).  The
    returned parameters are the best validation epoch's, so the final
    validation score never exceeds the score at initialization.
    """
    rng = RngStream(config.seed)
    n_train = train.n
    skip_net = config.disable_interaction_head

    params = param_vector(model)
    adam = AdamState.init(params.size, lr=config.learning_rate)

    def val_score(m):
        return deterministic_nelbo(m, val.x, val.y, n_train,
                                   config.beta_penalty, skip_net)

    best_val = val_score(model)
    best_params = params.copy()
    best_epoch = 0
    curve_rows = []
    eval_set = test if test is not None else val

    step = 0
    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.substream(0).substream(epoch).generator().permutation(n_train)
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = train.x[idx], train.y[idx]
            acc = np.zeros_like(params)
            for s in range(config.mc_per_batch):
                mask_rng = rng.substream(1).substream(step).substream(s)
                uniforms = None
                if not skip_net:
                    uniforms = sample_mask(model.net, mask_rng, mode="relaxed").uniforms
                try:
                    loss, grads = _loss_and_grads(model, xb, yb, uniforms, n_train,
                                                  config.beta_penalty, skip_net)
                except TrainingDiverged as err:
                    raise TrainingDiverged(epoch, str(err)) from None
                acc += grad_vector(model, grads)
            params, adam = adam_step(adam, params, acc / config.mc_per_batch)
            set_param_vector(model, params)
            step += 1
        epochs_run = epoch

        v = val_score(model)
        if not np.isfinite(v):
            raise TrainingDiverged(epoch, f"non-finite validation loss {v!r}")
        if v < best_val:
            best_val = v
            best_params = params.copy()
            best_epoch = epoch
        if config.curve_every and epoch % config.curve_every == 0:
            tr = deterministic_nelbo(model, train.x, train.y, n_train,
                                     config.beta_penalty, skip_net)
            pred, _ = predictive_distribution(model, val.x, config.curve_mc_samples,
                                              rng.substream(2).substream(epoch)) \
                if not skip_net else (val.x @ model.beta + model.intercept, None)
            rmse = _raw_rmse(model, val.y, pred)
            cov = _coverage(model, val.x, val.y, max(2, config.curve_mc_samples),
                            rng.substream(3).substream(epoch)) if not skip_net else 0.0
            curve_rows.append((epoch, tr, v, rmse, cov))
        if callback is not None:
            callback(epoch, model)
        if epoch - best_epoch >= config.patience:
            break

    set_param_vector(model, best_params)

    final_train = deterministic_nelbo(model, train.x, train.y, n_train,
                                      config.beta_penalty, skip_net)
    if skip_net:
        test_pred = eval_set.x @ model.beta + model.intercept
        coverage = 0.0
    else:
        test_pred, _ = predictive_distribution(model, eval_set.x,
                                               config.eval_mc_samples,
                                               rng.substream(4))
        coverage = _coverage(model, eval_set.x, eval_set.y,
                             max(100, config.eval_mc_samples), rng.substream(5))
    rmse = _raw_rmse(model, eval_set.y, test_pred)

    if curve_path is not None:
        write_curve_csv(curve_path, curve_rows)

    return FitReport(train_nelbo=final_train, val_nelbo=best_val,
                     test_rmse=rmse, coverage95=coverage, epochs_run=epochs_run)


def write_curve_csv(path, rows, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            for k in sorted(meta):
                fh.write(f"# {k}={meta[k]}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "rmse", "coverage"])
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


def standardize_datasets(train: Dataset, *others: Dataset):
    """Fit standardizers on the training split, apply to every split."""
    x_std, xt = standardize_fit_apply(train.x)
    y_std, yt = standardize_fit_apply(train.y[:, None])
    out = [Dataset(xt, yt[:, 0], list(train.feature_names), train.target_name)]
    for ds in others:
        if ds is None:
            out.append(None)
            continue
        out.append(Dataset(x_std.apply(ds.x), y_std.apply(ds.y[:, None])[:, 0],
                           list(ds.feature_names), ds.target_name))
    return x_std, y_std, out


def train_model(train: Dataset, val: Dataset, config: TrainConfig,
                test: Dataset | None = None, callback=None, curve_path=None):
    """Standardize raw splits, build a fresh hybrid model, fit it.

    Returns (model, FitReport); the model carries the standardizers so
    downstream detection can report effects on the raw data scale.
    """
    x_std, y_std, (train_s, val_s, test_s) = standardize_datasets(train, val, test)
    model = HybridModel.create(
        train.d, list(config.hidden), RngStream(config.seed).substream(9000),
        activation=config.activation, temperature=config.temperature,
        lengthscale=config.lengthscale,
        init_drop_probability=config.init_drop_probability,
        input_drop_probability=config.input_drop_probability,
        feature_names=train.feature_names)
    model.x_standardizer = x_std
    model.y_standardizer = y_std
    report = fit(model, train_s, val_s, config, test_s, callback, curve_path)
    return model, report
