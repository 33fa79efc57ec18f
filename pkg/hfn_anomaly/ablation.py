from dataclasses import dataclass

from .config import AblationFlags
from .exception import InvalidConfigError

ABLATION_VARIANTS: dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "-NE": AblationFlags(disable_ne=True),
    "-NF": AblationFlags(disable_nf=True),
    "-DFS": AblationFlags(disable_dfs=True),
    "-CFS": AblationFlags(disable_cfs=True),
    "-HFS": AblationFlags(disable_hfs=True),
    "-DFS-CFS": AblationFlags(disable_dfs=True, disable_cfs=True),
}


@dataclass(frozen=True)
class AblationPlan:
    use_embedding_similarity: bool = True
    use_feature_similarity: bool = True
    use_discrete_channel: bool = True
    use_continuous_channel: bool = True
    use_hybrid_channel: bool = True
    """为 False 时 beta 固定为 1"""


def apply_ablation(flags: AblationFlags) -> AblationPlan:
    """把消融开关翻译为结构上的改动，拒绝无意义的组合"""
    if flags.disable_ne and flags.disable_nf:
        raise InvalidConfigError("cannot disable both -NE and -NF: the aggregated similarity would be empty")
    if flags.disable_dfs and flags.disable_cfs and flags.disable_hfs:
        raise InvalidConfigError("cannot disable all three subgraph channels (-DFS, -CFS, -HFS)")
    return AblationPlan(
        use_embedding_similarity=not flags.disable_ne,
        use_feature_similarity=not flags.disable_nf,
        use_discrete_channel=not flags.disable_dfs,
        use_continuous_channel=not flags.disable_cfs,
        use_hybrid_channel=not flags.disable_hfs,
    )
