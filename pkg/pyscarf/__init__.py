from pyscarf.checkpoint import Checkpoint
from pyscarf.checkpoint import load_checkpoint
from pyscarf.checkpoint import save_checkpoint
from pyscarf.constants import CombineMode
from pyscarf.constants import Difficulty
from pyscarf.constants import FusionKind
from pyscarf.data import gen_scene
from pyscarf.models.common import Config
from pyscarf.models.common import SgdConfig
from pyscarf.models.common import TrainConfig
from pyscarf.models.network import ScarfDetector
from pyscarf.services import ablate
from pyscarf.services import evaluate
from pyscarf.services import train
from pyscarf.services import visualize_heatmap
from pyscarf.version import version

try:
    from dotenv import load_dotenv

    load_dotenv()
except ImportError:  # pragma: no cover
    # tox -e docs doesn't load python-dotenv
    pass

configure = Config.instance

__all__ = [
    "Checkpoint",
    "CombineMode",
    "Difficulty",
    "FusionKind",
    "ScarfDetector",
    "SgdConfig",
    "TrainConfig",
    "ablate",
    "configure",
    "evaluate",
    "gen_scene",
    "load_checkpoint",
    "save_checkpoint",
    "train",
    "visualize_heatmap",
    "version",
]
