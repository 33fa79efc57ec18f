import time
from typing import Optional
from collections.abc import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import HFN, ModelParams
from .optim import AdamState, adam_step
from .utils import log, make_rng, escape_tag
from .config import TrainConfig, DetectorConfig
from .detector import detect, calibrate
from .exception import DivergenceError, InsufficientDataError
from .ablation import ABLATION_VARIANTS, AblationPlan, apply_ablation
from .models import TrainReport, VariableSchema
from .dataset import WindowSet, SeriesFrame, make_windows

__all__ = [
    "ABLATION_VARIANTS",
    "AblationPlan",
    "apply_ablation",
    "evaluate_loss",
    "run_ablation_matrix",
    "train",
    "train_step",
]


def train_step(
    model: HFN,
    inputs: np.ndarray,
    targets: np.ndarray,
    state: AdamState,
    tape: Tape,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """一次前向、反向与 Adam 更新，返回本批损失"""
    with tape:
        pred = model.forward(inputs, training=rng is not None, rng=rng)
        loss = ad.mse_loss(pred, Tensor(targets))
    value = loss.item()
    if not np.isfinite(value):
        tape.clear()
        raise DivergenceError(0, state.step + 1, value)
    ad.backward(loss)
    adam_step(model.p.named_parameters(), state)
    return value


def evaluate_loss(model: HFN, windows: WindowSet, chunk_size: int = 256) -> float:
    """推理模式下整个窗口集合的平均 MSE"""
    if not len(windows):
        raise InsufficientDataError("no windows to evaluate")
    total = 0.0
    for i in range(0, len(windows), chunk_size):
        pred = model.forward(windows.inputs[i : i + chunk_size]).values
        diff = pred - windows.targets[i : i + chunk_size]
        total += float((diff * diff).sum())
    return total / windows.targets.size


class _FloorRule:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.below = 0

    def update(self, epoch: int, loss: float) -> bool:
        below = loss < self.config.loss_floor
        self.below = self.below + 1 if below else 0
        if self.config.floor_rule == "consecutive":
            return self.below >= self.config.floor_patience
        return below and epoch >= self.config.floor_patience


def train(
    train_frame: SeriesFrame,
    valid_frame: Optional[SeriesFrame],
    config: TrainConfig,
    *,
    schema: Optional[VariableSchema] = None,
    params: Optional[ModelParams] = None,
) -> tuple[HFN, TrainReport]:
    """在正常数据上联合优化全部参数

    参数:
        train_frame: 已归一化的训练数据，只含正常工况
        valid_frame: 已归一化的验证数据；为 None 时按训练损失挑选最优 epoch
        config: 训练配置
        schema: 变量表，缺省取 train_frame.schema
        params: 初始参数，缺省按 config.seed 初始化
    """
    schema = schema or train_frame.schema
    window = config.model.window
    windows = make_windows(train_frame, window)
    valid = make_windows(valid_frame, window) if valid_frame is not None else None

    model = HFN(schema=schema, config=config.model, params=params, seed=config.seed)
    rng = make_rng(config.seed)
    state = AdamState(lr=config.lr)
    tape = Tape()
    floor = _FloorRule(config)
    report = TrainReport(seed=config.seed, ablation=config.model.ablation.tags)

    log(
        "INFO",
        f"training <y>{escape_tag(config.model.ablation.label)}</y> on {len(windows)} window(s), "
        f"L={len(schema)}, ω={window}, batch={config.batch_size}, seed={config.seed}",
    )
    started = time.perf_counter()
    best_loss = np.inf
    best_state = model.p.state_dict()
    stale = 0

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(windows))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            index = np.sort(order[start : start + config.batch_size])
            try:
                loss = train_step(model, windows.inputs[index], windows.targets[index], state, tape, rng)
            except DivergenceError as e:
                raise DivergenceError(epoch, state.step + 1, e.loss) from None
            total += loss * len(index)
            log("TRACE", f"epoch {epoch} step {state.step}: loss={loss:.6g}")
        epoch_loss = total / len(windows)
        report.loss_history.append(epoch_loss)

        selection = epoch_loss
        if valid is not None:
            selection = evaluate_loss(model, valid)
            report.valid_history.append(selection)
        if selection < best_loss:
            best_loss, best_state, stale = selection, model.p.state_dict(), 0
            report.best_epoch = epoch
        else:
            stale += 1
        log("DEBUG", f"epoch {epoch}: train={epoch_loss:.6g}" + (f" valid={selection:.6g}" if valid else ""))

        report.epochs = epoch
        if floor.update(epoch, epoch_loss):
            report.stop_reason, report.stop_detail = "early-stop", "loss-floor"
            break
        if valid is not None and stale >= config.valid_patience:
            report.stop_reason, report.stop_detail = "early-stop", "valid-patience"
            break

    model.p.load_state_dict(best_state)
    report.steps = state.step
    report.best_valid_loss = float(best_loss) if valid is not None else None
    report.wall_clock = time.perf_counter() - started
    log(
        "INFO",
        f"training stopped after {report.epochs} epoch(s) ({report.stop_detail}), "
        f"best epoch {report.best_epoch}, {report.wall_clock:.1f}s",
    )
    return model, report


def run_ablation_matrix(
    train_frame: SeriesFrame,
    valid_frame: SeriesFrame,
    test_frame: SeriesFrame,
    config: TrainConfig,
    seeds: Iterable[int] = (0, 1, 2),
    variants: Iterable[str] = tuple(ABLATION_VARIANTS),
    detector: Optional[DetectorConfig] = None,
) -> list[dict]:
    """依次训练各消融变体并在测试集上取最优 F1，返回逐种子行与均值行"""
    detector = detector or DetectorConfig()
    seeds = list(seeds)
    rows: list[dict] = []
    for name in variants:
        flags = ABLATION_VARIANTS[name]
        model_config = config.model.model_copy(update={"ablation": flags})
        results = []
        for seed in seeds:
            run = config.model_copy(update={"model": model_config, "seed": seed})
            model, report = train(train_frame, valid_frame, run)
            calib = calibrate(model, valid_frame, basis=detector.error_basis, workers=detector.workers)
            result = detect(model, calib, test_frame, detector, seed=seed)
            row = {
                "variant": name,
                "seed": str(seed),
                "f1": result.f1 or 0.0,
                "precision": result.precision or 0.0,
                "recall": result.recall or 0.0,
                "threshold": result.threshold,
                "epochs": report.epochs,
            }
            results.append(row)
            log("INFO", f"ablation {escape_tag(name)} seed {seed}: F1={row['f1']:.4f}")
        rows.extend(results)
        rows.append(
            {
                "variant": name,
                "seed": "mean",
                "f1": float(np.mean([r["f1"] for r in results])),
                "precision": float(np.mean([r["precision"] for r in results])),
                "recall": float(np.mean([r["recall"] for r in results])),
                "threshold": None,
                "epochs": float(np.mean([r["epochs"] for r in results])),
            }
        )
    return rows
