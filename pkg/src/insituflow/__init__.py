"""insituflow: couple producer and consumer tasks by the data they share."""
from .config import All, Latest, Some, load_workflow, parse_workflow, strategy_of, validate
from .datamodel import DataObjectTree, Dataset, Selection, decompose, deserialize_file, intersect, serialize_file
from .errors import (ConfigError, DeadlockError, RegistryError, TaskError, TransportError,
                     VerificationError, WorkflowError)
from .graph import build_graph, export_dot, link_instances
from .runtime import ACTIONS, ActionRegistry, HookPoint, RunReport, TaskRegistry, register_action, run

__version__ = "0.1.0"
