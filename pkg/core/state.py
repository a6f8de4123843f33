"""
Run State Management

Tracks pipeline progress for one output directory so stages can be run
one command at a time. Persists state to <output_dir>/state.json.
"""

import json
from pathlib import Path
from typing import Dict, Any, List, Optional
from datetime import datetime

from core.logger import get_logger


STAGES = ["synth", "prep", "train_ae", "train_cls", "encode", "decode", "eval", "grid"]

# Stage -> stages whose artifacts it reads
PREREQUISITES: Dict[str, List[str]] = {
    "synth": [],
    "prep": [],
    "train_ae": ["prep"],
    "train_cls": ["train_ae"],
    "encode": ["train_ae"],
    "decode": ["encode"],
    "eval": ["train_ae"],
    "grid": [],
}

# CLI command that completes each stage
COMMANDS = {
    "synth": "synth",
    "prep": "prep",
    "train_ae": "train-ae",
    "train_cls": "train-cls",
    "encode": "encode",
    "decode": "decode",
    "eval": "eval",
    "grid": "grid",
}


class RunState:
    """Pipeline state tracker"""

    def __init__(self, output_dir: Path):
        """
        Initialize state tracker

        Args:
            output_dir: Run output directory (state.json lives here)
        """
        self.state_file = Path(output_dir) / "state.json"
        self.state = self.load()

    def load(self) -> Dict[str, Any]:
        """
        Load state from file

        Returns:
            State dictionary
        """
        if not self.state_file.exists():
            return self.get_default_state()

        try:
            with open(self.state_file, 'r') as f:
                state = json.load(f)
                return state if state else self.get_default_state()
        except (OSError, json.JSONDecodeError) as e:
            print(f"Error loading state: {e}")
            return self.get_default_state()

    def save(self):
        """Save state to file"""
        self.state_file.parent.mkdir(parents=True, exist_ok=True)

        try:
            with open(self.state_file, 'w') as f:
                json.dump(self.state, f, indent=2)
            return True
        except OSError as e:
            print(f"Error saving state: {e}")
            return False

    def get_default_state(self) -> Dict[str, Any]:
        return {
            "stages": {stage: False for stage in STAGES},
            "artifacts": {},
            "timestamps": {},
            "metadata": {
                "created_at": datetime.now().isoformat(),
                "last_updated": None
            }
        }

    def is_complete(self, stage: str) -> bool:
        return self.state.get("stages", {}).get(stage, False)

    def artifact(self, stage: str) -> Optional[str]:
        return self.state.get("artifacts", {}).get(stage)

    def mark_complete(self, stage: str, artifact: Optional[Path] = None):
        """
        Mark a stage as complete

        Args:
            stage: Stage name
            artifact: File the stage produced
        """
        self.state.setdefault("stages", {})[stage] = True
        if artifact is not None:
            self.state.setdefault("artifacts", {})[stage] = str(artifact)

        now = datetime.now().isoformat()
        self.state.setdefault("timestamps", {})[stage] = now
        self.state["metadata"]["last_updated"] = now
        self.save()

        get_logger().log_state("mark_complete", stage, artifact or True)

    def reset_stage(self, stage: str):
        """
        Reset a stage (and everything downstream of it) so it is re-run.

        Args:
            stage: Stage name to reset
        """
        for name in [stage] + self.dependents(stage):
            self.state.setdefault("stages", {})[name] = False
            self.state.get("artifacts", {}).pop(name, None)
            self.state.get("timestamps", {}).pop(name, None)

        self.state["metadata"]["last_updated"] = datetime.now().isoformat()
        self.save()
        get_logger().log_state("reset", stage, False)

    def dependents(self, stage: str) -> List[str]:
        """Stages that (transitively) need this one."""
        found = []
        frontier = [stage]
        while frontier:
            current = frontier.pop()
            for name, needs in PREREQUISITES.items():
                if current in needs and name not in found:
                    found.append(name)
                    frontier.append(name)
        return found

    def missing_prerequisites(self, stage: str) -> List[str]:
        return [need for need in PREREQUISITES.get(stage, []) if not self.is_complete(need)]

    def get_next_step(self, stage: Optional[str] = None) -> Optional[str]:
        """
        Name the command to run next

        Args:
            stage: Stage the user wants; hints at its first missing prerequisite.
                   Without it, the first incomplete training-path stage.

        Returns:
            Hint string, or None when nothing is missing
        """
        if stage is not None:
            missing = self.missing_prerequisites(stage)
            if not missing:
                return None
            need = missing[0]
            deeper = self.get_next_step(need)
            return deeper or f"Run '{COMMANDS[need]}' first"

        for name in ("prep", "train_ae", "train_cls", "eval"):
            if not self.is_complete(name):
                return f"Run '{COMMANDS[name]}'"
        return None

    def get_progress_percent(self) -> int:
        done = sum(1 for stage in STAGES if self.is_complete(stage))
        return int(100 * done / len(STAGES))

    def get_summary(self) -> Dict[str, Any]:
        return {
            "progress_percent": self.get_progress_percent(),
            "next_step": self.get_next_step(),
            "stages": {stage: self.is_complete(stage) for stage in STAGES},
            "artifacts": dict(self.state.get("artifacts", {})),
            "last_updated": self.state.get("metadata", {}).get("last_updated")
        }

    def __repr__(self) -> str:
        """String representation"""
        return f"RunState(file={self.state_file}, progress={self.get_progress_percent()}%)"
