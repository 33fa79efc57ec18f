import re
from typing import Optional

import numpy as np
from loguru import logger


def escape_tag(s: str) -> str:
    """用于转义 loguru 颜色标签，防止变量名或路径中的尖括号破坏日志着色"""
    return re.sub(r"</?((?:[fb]g\s)?[^<>\s]*)>", r"\\\g<0>", s)


def logger_wrapper(logger_name: str):
    def log(level: str, message: str, exception: Optional[BaseException] = None):
        logger.opt(colors=True, exception=exception).log(level, f"<m>{escape_tag(logger_name)}</m> | {message}")

    return log


log = logger_wrapper("HFN")


def make_rng(seed: int) -> np.random.Generator:
    """所有随机性统一经由此处的 PCG64 生成器"""
    return np.random.default_rng(seed)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Optional[tuple[int, ...]] = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))
