from .config import ConfigError, ControllerSource, ScenarioConfig, bundled_scenarios, load_config, parse_config
from .engine import (DivergedRunError, LoopDesign, SimulationTrace, design_loop, evaluation_start,
                     moving_average, run_batch, run_scenario)
from .trace import export_trace, import_trace
