import math


def lr_at(step: int, lr_init: float, T_0: int, T_mult: int = 2, eta_min: float = 0.0, steps_per_epoch: int = 1) -> float:
    """Cosine annealing with warm restarts; cycle lengths are T_0, T_0*T_mult, ... epochs."""
    if step < 0:
        raise ValueError("step must be non-negative")
    t, period = step, T_0 * steps_per_epoch
    while t >= period:
        t -= period
        period *= T_mult
    return eta_min + 0.5 * (lr_init - eta_min) * (1.0 + math.cos(math.pi * t / period))


def lr_for(step: int, cfg, steps_per_epoch: int = 1) -> float:
    s = cfg.scheduler
    return lr_at(step, cfg.lr_init, s.T_0, s.T_mult, s.eta_min, steps_per_epoch)
