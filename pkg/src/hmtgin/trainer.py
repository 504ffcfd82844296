"""Joint full-batch training: shared embeddings, per-task losses, the
two constraint losses, the weighted total loss, Adam updates, stepwise
learning-rate halving, and checkpoint-on-dev-improvement.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .constraints import (
    ConstraintSampleList,
    constraint1_loss,
    constraint2_loss,
    owner_map,
)
from .heads import clf_loss, link_loss, rank_loss
from .metrics import MetricReport, evaluate_all
from .model import ModelParams, save_checkpoint
from .mrgin import features_as_tensors, generate_embeddings
from .multigraph import MultiRelationalGraph
from .tasks import CLASSIFICATION, DEFAULT_ALPHAS, LINK, RANKING, TaskSpec

OWNER_EDGE_TYPE = "owner_of_answer"


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; training aborts rather than skipping."""


@dataclass
class TrainConfig:
    epochs: int = 135
    lr0: float = 0.01
    lr_halving_period: int = 50
    alphas: dict[str, float] = field(default_factory=dict)
    beta1: float = 1.0  # first constraint coefficient
    beta2: float = 1.0  # second constraint coefficient
    hidden_dim: int = 16
    num_layers: int = 1
    mlp_layers: int = 1
    dropout: float = 0.0
    epsilon_trainable: bool = False
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    positive_weight: float = 2.0
    slope: float = 0.01

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if self.beta1 < 0 or self.beta2 < 0:
            raise ConfigError("constraint coefficients must be non-negative")
        if any(a < 0 for a in self.alphas.values()):
            raise ConfigError("task loss coefficients must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def alpha_for(self, task_name: str) -> float:
        if task_name in self.alphas:
            return self.alphas[task_name]
        return DEFAULT_ALPHAS.get(task_name, 1.0)

    def learning_rate(self, epoch: int) -> float:
        return self.lr0 * 0.5 ** (epoch // self.lr_halving_period)


_CONFIG_KEYS = {
    "epochs": int,
    "lr0": float,
    "beta1": float,
    "beta2": float,
    "hidden_dim": int,
    "num_layers": int,
    "mlp_layers": int,
    "dropout": float,
    "epsilon_trainable": lambda v: v.lower() in ("true", "1", "yes"),
    "seed": int,
    "checkpoint_dir": str,
}


def load_config(path) -> TrainConfig:
    """Flat ``key = value`` lines; '#' starts a comment; unknown keys are
    errors. Task coefficients use ``alpha.<task>`` keys."""
    cfg = TrainConfig()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith("alpha."):
                try:
                    cfg.alphas[key[len("alpha."):]] = float(value)
                except ValueError:
                    raise ConfigError(f"{path}:{line_no}: bad float {value!r}") from None
                continue
            caster = _CONFIG_KEYS.get(key)
            if caster is None:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            try:
                setattr(cfg, key, caster(value))
            except ValueError:
                raise ConfigError(f"{path}:{line_no}: bad value {value!r} for {key}") from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# losses


def total_loss(task_losses: list[Tensor], constraint_losses: list[Tensor],
               alphas: list[float], betas: list[float]) -> Tensor:
    """Mean of coefficient-weighted task losses plus the weighted sum of
    constraint losses."""
    if len(task_losses) != len(alphas) or len(constraint_losses) != len(betas):
        raise ValueError(
            f"length mismatch: {len(task_losses)} losses / {len(alphas)} alphas, "
            f"{len(constraint_losses)} constraints / {len(betas)} betas"
        )
    acc = ad.scale(task_losses[0], alphas[0])
    for lt, a in zip(task_losses[1:], alphas[1:]):
        acc = ad.add(acc, ad.scale(lt, a))
    out = ad.scale(acc, 1.0 / len(task_losses))
    for c, b in zip(constraint_losses, betas):
        out = ad.add(out, ad.scale(c, b))
    return out


def task_train_loss(task: TaskSpec, embeddings, head) -> Tensor:
    idx = task.splits["train"]
    if task.kind == LINK:
        pos, neg = task.samples
        n_pos = len(pos)
        pos_idx = idx[idx < n_pos]
        neg_idx = idx[idx >= n_pos] - n_pos
        return link_loss(pos.take(pos_idx), neg.take(neg_idx), embeddings, head)
    if task.kind == RANKING:
        return rank_loss([task.samples[i] for i in idx], embeddings, head)
    if task.kind == CLASSIFICATION:
        cs = task.samples
        return clf_loss(cs.indices[idx], cs.labels[idx], embeddings, head,
                        cs.node_type)
    raise ValueError(f"unknown task kind {task.kind!r}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(named_params, state: AdamState, lr: float,
              b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; missing gradients count as zero."""
    state.step += 1
    t = state.step
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    task_losses: dict[str, float]
    constraint_losses: list[float]
    total: float
    dev_average: float
    checkpoint_saved: bool


@dataclass
class History:
    task_names: list[str]
    n_constraints: int
    records: list[EpochRecord] = field(default_factory=list)

    def csv_lines(self) -> list[str]:
        """epoch, one column per task loss, per constraint, total, dev avg."""
        out = []
        for r in self.records:
            cells = [str(r.epoch)]
            cells += ["%.17g" % r.task_losses[t] for t in self.task_names]
            cells += ["%.17g" % c for c in r.constraint_losses]
            cells += ["%.17g" % r.total, "%.17g" % r.dev_average]
            out.append(",".join(cells))
        return out


def extract_embeddings(g: MultiRelationalGraph, model: ModelParams):
    """One deterministic full-batch forward with batch-statistics
    normalization and dropout disabled; shared by every evaluation."""
    return generate_embeddings(g, model.layers, features_as_tensors(g), train=False)


def build_constraints(g: MultiRelationalGraph, tasks: dict[str, TaskSpec]):
    """Constraint inputs when the ranking and both classification tasks
    are present: the ranking task's training samples plus the
    answer-owner map. Returns None when inactive."""
    ranking = [t for t in tasks.values() if t.kind == RANKING]
    clf_types = {t.samples.node_type: t.name for t in tasks.values()
                 if t.kind == CLASSIFICATION}
    if not ranking or "answer" not in clf_types or "user" not in clf_types:
        return None
    if OWNER_EDGE_TYPE not in {et.name for et in g.schema.edge_types}:
        return None
    task = ranking[0]
    samples = [task.samples[i] for i in task.splits["train"]]
    sample_list = ConstraintSampleList(samples)
    owners = owner_map(g, OWNER_EDGE_TYPE)
    return {
        "samples": sample_list,
        "owners": owners,
        "ranking_task": task.name,
        "score_task": clf_types["answer"],
        "reputation_task": clf_types["user"],
    }


def train(
    g: MultiRelationalGraph,
    model: ModelParams,
    tasks: dict[str, TaskSpec],
    constraints,
    cfg: TrainConfig,
) -> History:
    """Run the joint training loop; mutates ``model`` in place.

    Per epoch: one train-mode embedding pass, all task losses on their
    training splits, both constraint losses, the weighted total,
    backward, one Adam step; then a dev evaluation, saving
    ``best.ckpt`` whenever the dev average strictly improves.
    """
    cfg.validate()
    task_names = sorted(tasks)
    alphas = [cfg.alpha_for(n) for n in task_names]
    betas = [cfg.beta1, cfg.beta2]
    n_constraints = 2 if constraints is not None else 0
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    h0 = features_as_tensors(g)
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    history = History(task_names, n_constraints)
    best_dev = -np.inf
    save_log: list[str] = []

    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate(epoch)
        with Tape():
            embeddings = generate_embeddings(g, model.layers, h0,
                                             train=True, rng=rng)
            task_losses = []
            for name in task_names:
                lt = task_train_loss(tasks[name], embeddings, model.heads[name])
                if not np.isfinite(lt.data):
                    raise TrainingError(f"non-finite loss for task {name} "
                                        f"at epoch {epoch}")
                task_losses.append(lt)
            closses = []
            if constraints is not None:
                c1 = constraint1_loss(
                    constraints["samples"], embeddings,
                    model.heads[constraints["score_task"]],
                    model.heads[constraints["ranking_task"]],
                )
                c2 = constraint2_loss(
                    constraints["samples"], embeddings,
                    model.heads[constraints["reputation_task"]],
                    model.heads[constraints["ranking_task"]],
                    constraints["owners"],
                )
                for label, c in (("constraint 1", c1), ("constraint 2", c2)):
                    if not np.isfinite(c.data):
                        raise TrainingError(f"non-finite {label} at epoch {epoch}")
                closses = [c1, c2]
            loss = total_loss(task_losses, closses, alphas, betas[:len(closses)])
            ad.backward(loss)
        adam_step(model.named_parameters(), state, lr,
                  cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
        model.zero_grad()

        dev_report = evaluate_all(extract_embeddings(g, model), tasks,
                                  model.heads, "dev")
        dev_avg = dev_report.average()
        saved = dev_avg > best_dev
        if saved:
            best_dev = dev_avg
            save_checkpoint(model, ckpt_dir / "best.ckpt")
            save_log.append(f"{epoch} {'%.17g' % dev_avg} best.ckpt")
        history.records.append(EpochRecord(
            epoch,
            {n: float(l.data) for n, l in zip(task_names, task_losses)},
            [float(c.data) for c in closses],
            float(loss.data),
            dev_avg,
            saved,
        ))

    save_checkpoint(model, ckpt_dir / "final.ckpt")
    with open(ckpt_dir / "saves.log", "w", encoding="utf-8") as fh:
        fh.write("\n".join(save_log) + ("\n" if save_log else ""))
    return history


# ---------------------------------------------------------------------------
# whole-model gradient checking


@dataclass
class GradCheckRow:
    group: str
    worst_loss: str
    max_rel_err: float
    worst_coord: tuple[int, ...]


@dataclass
class ModelGradCheckReport:
    rows: list[GradCheckRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(r.max_rel_err <= self.tolerance for r in self.rows)

    def __str__(self) -> str:
        out = []
        for r in self.rows:
            status = "ok" if r.max_rel_err <= self.tolerance else "FAIL"
            out.append(f"{status:4s} {r.group:44s} rel_err={r.max_rel_err:.3e} "
                       f"(loss={r.worst_loss}, coord={r.worst_coord})")
        return "\n".join(out)


def _all_losses(g, model, tasks, constraints, cfg, frozen_sel,
                h0) -> dict[str, Tensor]:
    """Every task loss on its training split, both constraint losses with
    the winner selection pinned, and the total. Dropout stays off so the
    losses are deterministic functions of the parameters."""
    embeddings = generate_embeddings(g, model.layers, h0, train=False)
    task_names = sorted(tasks)
    losses = {name: task_train_loss(tasks[name], embeddings, model.heads[name])
              for name in task_names}
    closses = []
    if constraints is not None:
        c1 = constraint1_loss(
            constraints["samples"], embeddings,
            model.heads[constraints["score_task"]],
            model.heads[constraints["ranking_task"]],
            frozen_selection=frozen_sel[0],
        )
        c2 = constraint2_loss(
            constraints["samples"], embeddings,
            model.heads[constraints["reputation_task"]],
            model.heads[constraints["ranking_task"]],
            constraints["owners"],
            frozen_selection=frozen_sel[1],
        )
        losses["constraint_1"] = c1
        losses["constraint_2"] = c2
        closses = [c1, c2]
    alphas = [cfg.alpha_for(n) for n in task_names]
    losses["total"] = total_loss([losses[n] for n in task_names], closses,
                                 alphas, [cfg.beta1, cfg.beta2][:len(closses)])
    return losses


def run_gradcheck(
    g: MultiRelationalGraph,
    model: ModelParams,
    tasks: dict[str, TaskSpec],
    constraints,
    cfg: TrainConfig,
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> ModelGradCheckReport:
    """Central-difference check of every parameter group against every
    loss term and the total loss.

    The constraint winner selections are computed once up front and held
    fixed, so the finite differences probe the smooth part of the losses
    (the selection itself carries no gradient). One perturbed forward
    pass serves all losses at once.
    """
    h0 = features_as_tensors(g)
    frozen_sel = (None, None)
    if constraints is not None:
        from .constraints import select_by_owner_head, select_by_score_head

        emb0 = extract_embeddings(g, model)
        frozen_sel = (
            select_by_score_head(constraints["samples"], emb0,
                                 model.heads[constraints["score_task"]]),
            select_by_owner_head(constraints["samples"], emb0,
                                 model.heads[constraints["reputation_task"]],
                                 constraints["owners"]),
        )

    params = model.named_parameters()
    model.zero_grad()
    analytic: dict[str, dict[str, np.ndarray]] = {}
    with Tape():
        losses = _all_losses(g, model, tasks, constraints, cfg, frozen_sel, h0)
        loss_names = list(losses)
        for lname in loss_names:
            model.zero_grad()
            ad.backward(losses[lname])
            analytic[lname] = {
                pname: (p.grad.copy() if p.grad is not None
                        else np.zeros_like(p.data))
                for pname, p in params
            }
    model.zero_grad()

    rows = []
    for pname, p in params:
        flat = p.data.reshape(-1)
        worst = GradCheckRow(pname, "", -1.0, ())
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _all_losses(g, model, tasks, constraints, cfg, frozen_sel, h0)
            flat[i] = orig - step
            down = _all_losses(g, model, tasks, constraints, cfg, frozen_sel, h0)
            flat[i] = orig
            for lname in loss_names:
                num = (up[lname].item() - down[lname].item()) / (2.0 * step)
                a = float(analytic[lname][pname].reshape(-1)[i])
                err = abs(a - num) / max(1.0, abs(a), abs(num))
                if err > worst.max_rel_err:
                    coord = np.unravel_index(i, p.shape) if p.ndim else ()
                    worst = GradCheckRow(pname, lname, err,
                                         tuple(int(c) for c in coord))
        rows.append(worst)
    return ModelGradCheckReport(rows, tolerance)
