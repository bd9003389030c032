"""Budget-constrained mask training.

The objective is cross-entropy on the masked network plus a squared budget
penalty ``lam * (sum(mask) - c)**2`` that drives the soft mask sum to ``c``
surviving entries.  Optimization is Adam with a global learning rate that
shrinks by ``lr_factor`` whenever the epoch-to-epoch change in loss speeds up
and grows by ``1/lr_factor`` otherwise.

A run has two phases:

* warm-up: ``warmup_epochs`` of plain training of the unmasked latents;
* pruning: ``epochs`` epochs in the selected mode.  Sigma stays at
  ``sigma0`` for the first ``sigma_hold`` share of the phase and is then
  annealed geometrically to ``sigma_max``; the budget weight rises
  geometrically from ``lam0`` to ``lam`` over the first ``lam_ramp`` share.

At the phase change the warm weights are re-expressed as latents whose
masked value equals them (``warm_start="invert"``) and Adam's moments are
cleared.  During pruning a latent that crosses or sits at zero is clamped
there (``absorb_zero``): its mask gradient vanishes at zero, so a pruned
entry stays pruned instead of drifting back under a small negative residual.

Setting ``lam0 = lam`` gives a constant penalty weight.
"""

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ContractError, DivergenceError, NonFiniteError
from .gcn import MODE_FIELD, MODES, budget_target, count_params, model_forward, predict
from .mask_param import AGGREGATES, SigmaSchedule, anneal_sigma, binarize, invert_fine_reparam


@dataclass
class BudgetConfig:
    rate: float = 0.9
    lam: float = 1000.0

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ConfigError(f"pruning rate must lie in [0, 1), got {self.rate}")
        if self.lam < 0:
            raise ConfigError("lambda must be non-negative")

    def target(self, prunable):
        return budget_target(prunable, self.rate)


WARM_STARTS = ("invert", "keep")


@dataclass
class TrainConfig:
    mode: str = "ctf"
    epochs: int = 300
    warmup_epochs: int = 100
    batch_size: int = 0  # 0: full batch
    lr: float = 0.01
    lr_factor: float = 0.99
    lr_min: float = 1e-4
    lr_max: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma0: float = 1.0
    sigma_max: float = 1000.0
    sigma_hold: float = 0.3
    lam0: float = 1e-7
    lam_ramp: float = 0.5
    coarse_aggregate: str = "saturating"
    gate_power: int = 4
    gate_eps: float = 1e-3
    warm_start: str = "invert"
    absorb_zero: bool = True
    threshold: float = 0.5
    l1: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs <= 0:
            raise ConfigError("epochs must be positive")
        if self.warmup_epochs < 0 or self.batch_size < 0:
            raise ConfigError("warmup_epochs and batch_size must be non-negative")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("lr_factor must lie in (0, 1)")
        if not 0 < self.lr_min <= self.lr <= self.lr_max:
            raise ConfigError("need 0 < lr_min <= lr <= lr_max")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam needs betas in [0, 1) and eps > 0")
        SigmaSchedule(self.sigma0, self.sigma_max, self.epochs)
        if not 0 <= self.sigma_hold < 1:
            raise ConfigError("sigma_hold must lie in [0, 1)")
        if self.lam0 < 0 or not 0 < self.lam_ramp <= 1:
            raise ConfigError("need lam0 >= 0 and 0 < lam_ramp <= 1")
        if self.coarse_aggregate not in AGGREGATES:
            raise ConfigError(f"coarse_aggregate must be one of {AGGREGATES}")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.warm_start not in WARM_STARTS:
            raise ConfigError(f"warm_start must be one of {WARM_STARTS}")
        if self.l1 < 0:
            raise ConfigError("l1 weight must be non-negative")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]


def budget_loss(masks, c, lam, mode):
    """lam * (sum of the mode's mask over every layer - c)**2."""
    if mode not in MODE_FIELD:
        raise ConfigError(f"budget needs a masked mode, got {mode!r}")
    sel = MODE_FIELD[mode]
    total = None
    for triple in masks.values():
        s = tc.sum_all(triple.select(sel))
        total = s if total is None else tc.add(total, s)
    return tc.scale(tc.square(tc.sub_scalar(total, c)), lam)


def l1_regularizer(tensors):
    """Sum of absolute values over ``tensors``."""
    total = None
    for t in tensors:
        s = tc.sum_all(tc.absolute(t))
        total = s if total is None else tc.add(total, s)
    return total


def total_loss(model, signals, labels, mode, masks=None, c=0, lam=0.0, l1=0.0):
    """(total, cross-entropy) for one batch; the budget term is skipped when lam == 0."""
    weights = model.effective(mode, masks)
    ce = tc.cross_entropy(model_forward(model, signals, weights), labels)
    loss = ce
    if masks and lam > 0:
        loss = tc.add(loss, budget_loss(masks, c, lam, mode))
    if l1 > 0:
        loss = tc.add(loss, tc.scale(l1_regularizer(model.parameters()), l1))
    return loss, ce


def lr_update(nu, speed, prev_speed, factor=0.99):
    """Shrink nu when the loss changes faster than before, grow it otherwise."""
    if speed is None or prev_speed is None:
        return nu
    return nu * factor if speed > prev_speed else nu / factor


class LossSpeedRate:
    """Tracks loss history and applies :func:`lr_update` once per epoch, clamped."""

    def __init__(self, nu, factor=0.99, lo=0.0, hi=math.inf):
        self.nu, self.factor, self.lo, self.hi = nu, factor, lo, hi
        self.prev_loss = None
        self.prev_speed = None

    def update(self, loss):
        speed = None if self.prev_loss is None else abs(loss - self.prev_loss)
        nu = lr_update(self.nu, speed, self.prev_speed, self.factor)
        self.nu = min(max(nu, self.lo), self.hi)
        self.prev_loss = loss
        if speed is not None:
            self.prev_speed = speed
        return self.nu


class Adam:
    """Adam with bias correction over a fixed list of tensors."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def reset(self):
        for m, v in zip(self.m, self.v):
            m[...] = 0.0
            v[...] = 0.0
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(optimizer, lr):
    optimizer.step(lr)


def lam_schedule(cfg, lam, epoch):
    """Budget weight at pruning epoch ``epoch``."""
    if lam == 0 or cfg.lam0 >= lam:
        return lam
    span = cfg.lam_ramp * max(cfg.epochs - 1, 1)
    t = min(1.0, epoch / span)
    return float(cfg.lam0 * (lam / cfg.lam0) ** t)


METRIC_COLUMNS = ("epoch", "loss", "ce", "budget_residual", "lr", "sigma",
                  "achieved_rate", "train_acc", "test_acc")


@dataclass
class TrainResult:
    binary_masks: dict
    weights: dict  # effective weights with pruned entries zeroed
    achieved_rate: float
    ambiguous_fraction: float
    train_acc: float
    test_acc: float
    budget: int
    prunable: int


@dataclass
class TrainState:
    model: object
    optimizer: Adam
    rate: LossSpeedRate
    config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)
    result: TrainResult = None

    @property
    def lr(self):
        return self.rate.nu


def _accuracy(model, signals, labels, weights):
    if len(labels) == 0:
        return float("nan")
    return float((predict(model_forward(model, signals, weights)) == labels).mean())


def hard_prune(model, masks, mode, threshold=0.5):
    """Binary masks, zeroed effective weights, achieved rate, ambiguous share."""
    weights = model.effective(mode, masks)
    binary, kept, total, ambiguous = {}, 0, 0, 0.0
    for name, layer in model.layers.items():
        if mode == "none" or name not in masks:
            binary[name] = np.ones(layer.latent.shape)
            continue
        bm = binarize(masks[name].select(MODE_FIELD[mode]), threshold)
        binary[name] = bm.mask
        kept += bm.mask.sum()
        total += bm.mask.size
        ambiguous += bm.ambiguous_fraction * bm.mask.size
    hard = {name: tc.Tensor(weights[name].data * binary[name]) for name in weights}
    rate = 1.0 - kept / total if total else 0.0
    return binary, hard, rate, (ambiguous / total if total else 0.0)


def _invert_latents(model):
    """Re-express the warm-up weights through the fine mask."""
    for layer in model.layers.values():
        layer.latent.data[...] = invert_fine_reparam(layer.latent.data, layer.sigma)


def train(model, train_data, test_data, cfg, budget, log=None):
    """Run warm-up plus pruning; returns the final TrainState.

    ``train_data``/``test_data`` are (signals, labels) pairs with signals
    shaped N x s x n.  ``log`` (optional) receives one dict per epoch.
    """
    Xtr, ytr = train_data
    Xte, yte = test_data
    ytr, yte = np.asarray(ytr), np.asarray(yte)
    prunable = count_params(model)["prunable"]
    c = budget.target(prunable)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.eps)
    state = TrainState(model, opt, LossSpeedRate(cfg.lr, cfg.lr_factor, cfg.lr_min, cfg.lr_max), cfg)
    hold = int(round(cfg.sigma_hold * cfg.epochs))
    schedule = SigmaSchedule(cfg.sigma0, cfg.sigma_max, max(cfg.epochs - 1 - hold, 0))
    rng = np.random.default_rng(cfg.seed + 7919)
    n = len(ytr)
    bs = cfg.batch_size or n
    gate = dict(aggregate=cfg.coarse_aggregate, power=cfg.gate_power, eps=cfg.gate_eps)
    model.set_sigma(cfg.sigma0)

    for step in range(cfg.warmup_epochs + cfg.epochs):
        pruning = step >= cfg.warmup_epochs
        e = step - cfg.warmup_epochs
        mode = cfg.mode if pruning else "none"
        if pruning:
            model.set_sigma(anneal_sigma(schedule, max(e - hold, 0)))
            if e == 0 and cfg.warmup_epochs and cfg.mode != "none":
                if cfg.warm_start == "invert":
                    _invert_latents(model)
                opt.reset()
        lam = lam_schedule(cfg, budget.lam, e) if pruning else 0.0
        order = rng.permutation(n) if bs < n else np.arange(n)
        losses, ces, masks = [], [], None
        try:
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                with tc.Tape() as tape:
                    masks = model.masks(**gate) if mode != "none" else None
                    loss, ce = total_loss(model, Xtr[idx], ytr[idx], mode, masks, c, lam, cfg.l1)
                opt.zero_grad()
                tape.backward(loss)
                signs = [np.sign(p.data) for p in opt.params] if pruning and cfg.absorb_zero else None
                opt.step(state.rate.nu)
                if signs is not None:
                    for p, before in zip(opt.params, signs):
                        p.data[np.sign(p.data) != before] = 0.0
                losses.append(loss.item() * len(idx))
                ces.append(ce.item() * len(idx))
                for p in model.parameters():
                    if not np.all(np.isfinite(p.data)):
                        raise NonFiniteError("parameters became non-finite")
        except NonFiniteError as exc:
            raise DivergenceError(f"training diverged at epoch {step}: {exc}",
                                  {"epoch": step, "lr": state.rate.nu, "sigma": model.sigma,
                                   "last_loss": state.rate.prev_loss}) from None
        epoch_loss = sum(losses) / n
        state.rate.update(epoch_loss)
        state.epoch = step + 1

        # post-step snapshot for the log
        masks = model.masks(**gate) if mode != "none" else None
        binary, hard, achieved, _ = hard_prune(model, masks, mode, cfg.threshold)
        soft = model.effective(mode, masks)
        residual = 0.0
        if masks:
            residual = sum(float(m.select(MODE_FIELD[mode]).data.sum()) for m in masks.values()) - c
        row = {
            "epoch": step, "loss": epoch_loss, "ce": sum(ces) / n, "budget_residual": residual,
            "lr": state.rate.nu, "sigma": model.sigma, "achieved_rate": achieved,
            "train_acc": _accuracy(model, Xtr, ytr, soft), "test_acc": _accuracy(model, Xte, yte, soft),
        }
        state.history.append(row)
        if log is not None:
            log(row)

    masks = model.masks(**gate) if cfg.mode != "none" else None
    binary, hard, achieved, ambiguous = hard_prune(model, masks, cfg.mode, cfg.threshold)
    state.result = TrainResult(binary, {k: v.data for k, v in hard.items()}, achieved, ambiguous,
                               _accuracy(model, Xtr, ytr, hard), _accuracy(model, Xte, yte, hard),
                               c, prunable)
    return state


def format_metrics_row(row):
    """CSV line for one history row; floats use repr so reruns are byte-identical."""
    out = []
    for key in METRIC_COLUMNS:
        v = row[key]
        out.append(str(v) if isinstance(v, (int, np.integer)) else repr(float(v)))
    return ",".join(out)


def write_metrics(path, history):
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in history:
            fh.write(format_metrics_row(row) + "\n")
