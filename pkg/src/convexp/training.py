"""Maximum-likelihood training on the synthetic datasets."""
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import datasets as ds
from .autodiff import make_optimizer, step_decay
from .flows import NonFiniteError

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)   # (step, train_nll, val_nll, wall_seconds)
    final_val_nll: float = float("nan")


def to_model_layout(x, event_shape):
    x = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    return x.reshape((x.shape[0],) + tuple(event_shape))


def draw(spec, count, rng, event_shape):
    batch = ds.sample(spec, count, rng)
    x = batch.node_features if isinstance(batch, ds.GraphBatch) else batch
    return to_model_layout(x, event_shape)


@torch.no_grad()
def evaluate(model, x, batch=1024):
    was_training = model.training
    model.eval()
    try:
        total = 0.0
        for lo in range(0, x.shape[0], batch):
            xb = x[lo:lo + batch]
            total += float(model.nll(xb)) * xb.shape[0]
        return total / x.shape[0]
    finally:
        model.train(was_training)


def train(model, spec, iters, batch=256, lr=1e-3, seed=0, val_size=4096, val_every=500,
          final_val_size=20_000, checkpoint=None):
    """Train ``model`` on fresh draws from ``spec``.

    The learning rate drops by 10x after each third of the run. ``checkpoint``
    is called with the model after every validation; on a non-finite loss
    the last checkpoint stays on disk and :class:`TrainingDiverged` is raised.
    """
    event_shape = model.event_shape
    rng = np.random.default_rng(seed)
    val_rng = np.random.default_rng(seed + 1_000_003)
    x_val = draw(spec, val_size, val_rng, event_shape)
    torch.manual_seed(seed)

    opt = make_optimizer(model.parameters(), lr=lr)
    sched = step_decay(opt, iters)
    result = TrainResult()
    start = time.perf_counter()
    model.train()
    train_nll = float("nan")
    for step in range(1, iters + 1):
        x = draw(spec, batch, rng, event_shape)
        try:
            loss = model.nll(x)
        except NonFiniteError:
            raise TrainingDiverged(step, float("nan")) from None
        if not torch.isfinite(loss):
            raise TrainingDiverged(step, float(loss))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        train_nll = loss.item()
        if step % val_every == 0 or step == iters:
            try:
                val = evaluate(model, x_val)
            except NonFiniteError:
                val = float("nan")
            wall = time.perf_counter() - start
            result.metrics.append((step, train_nll, val, wall))
            log.info("step %d train %.4f val %.4f (%.0fs)", step, train_nll, val, wall)
            if not math.isfinite(val):
                raise TrainingDiverged(step, val)
            if checkpoint is not None:
                checkpoint(model)
    if iters == 0:
        result.metrics.append((0, float("nan"), evaluate(model, x_val), 0.0))
    x_test = draw(spec, final_val_size, np.random.default_rng(seed + 2_000_029), event_shape)
    result.final_val_nll = evaluate(model, x_test)
    return result


def metrics_to_csv(rows):
    buf = io.StringIO()
    buf.write("step,train_nll,val_nll,wall_seconds\n")
    for step, tr, va, wall in rows:
        buf.write(f"{step},{tr!r},{va!r},{wall!r}\n")
    return buf.getvalue()
