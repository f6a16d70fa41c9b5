"""DC security-constrained dispatch, contingency analysis and false-load attack assessment."""

from .attack import AttackSpec, build_bilevel, enumerate_oracle, kkt_milp_oracle
from .benders import mbd
from .grid_model import GridCase, bundled_case, load_case, load_case_file, validate
from .network import DistFactors, build_dc
from .rtca import run_rtca
from .sced import ScedParams, run_sced
from .sim import Ems, design_attack, implement_attack, screen_targets

__version__ = "0.1.0"
