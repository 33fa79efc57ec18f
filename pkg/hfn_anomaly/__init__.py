from .model import HFN as HFN
from .config import RunConfig as RunConfig
from .detector import detect as detect
from .trainer import train as train
from .config import ModelConfig as ModelConfig
from .config import SynthConfig as SynthConfig
from .config import TrainConfig as TrainConfig
from .dataset import SeriesFrame as SeriesFrame
from .models import VariableSchema as VariableSchema
from .exception import HFNException as HFNException
