"""
Unified session logger for SwinFi runs

Captures the lifecycle of one CLI invocation:
- Pipeline stages (synth, prep, train-ae, ...) and their artifacts
- Status messages (info, success, error, warning)
- Configuration values in effect
- Exceptions and stack traces
- Structured metric records (one JSON object per line)

Log file format: YYYYMMDD-HHMMSS.log (+ YYYYMMDD-HHMMSS.metrics.jsonl)
Log location: <project-root>/logs/ unless configured otherwise
"""

import json
import sys
import threading
import traceback
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional


class SessionLogger:
    """
    Singleton session logger.

    Usage:
        logger = get_logger()
        with logger:
            logger.log_stage("train-ae", "started")
            logger.log_metrics({"event": "train", "step": 10, "loss": 0.02})

    Every method is a no-op while the session is not started, so library
    code can log unconditionally.
    """

    _instance: Optional['SessionLogger'] = None
    _lock = threading.Lock()

    def __init__(self, log_dir: Optional[Path] = None):
        """
        Initialize session logger.

        Args:
            log_dir: Directory for log files (default: <project-root>/logs/)
        """
        if log_dir is None:
            project_root = Path(__file__).resolve().parent.parent
            log_dir = project_root / "logs"

        self.log_dir = Path(log_dir)
        self.log_file: Optional[Path] = None
        self.metrics_file: Optional[Path] = None
        self._file_handle = None
        self._metrics_handle = None
        self._active = False
        self._session_start: Optional[datetime] = None
        self._write_lock = threading.Lock()

    @classmethod
    def get_instance(cls, log_dir: Optional[Path] = None) -> 'SessionLogger':
        """
        Get singleton instance of SessionLogger.

        Args:
            log_dir: Directory for log files (only used on first call)
        """
        if cls._instance is None:
            with cls._lock:
                if cls._instance is None:
                    cls._instance = cls(log_dir)
        return cls._instance

    def set_log_dir(self, log_dir: Path):
        """Redirect future sessions (ignored while a session is open)."""
        if not self._active:
            self.log_dir = Path(log_dir)

    def start(self) -> bool:
        """
        Start logging session.

        Creates the log directory and opens the text log and metrics file.

        Returns:
            True if successful, False otherwise
        """
        try:
            self.log_dir.mkdir(parents=True, exist_ok=True)

            self._session_start = datetime.now()
            timestamp = self._session_start.strftime("%Y%m%d-%H%M%S")
            self.log_file = self.log_dir / f"{timestamp}.log"
            self.metrics_file = self.log_dir / f"{timestamp}.metrics.jsonl"

            self._file_handle = open(self.log_file, 'w', encoding='utf-8')
            self._metrics_handle = open(self.metrics_file, 'w', encoding='utf-8')
            self._active = True

            self._write_header()
            return True

        except Exception as e:
            print(f"Failed to start logger: {e}", file=sys.stderr)
            self._active = False
            return False

    def stop(self):
        """Stop logging session and close file handles."""
        if self._active and self._file_handle:
            try:
                self._write_footer()
                self._file_handle.close()
                self._metrics_handle.close()
            except Exception as e:
                print(f"Error stopping logger: {e}", file=sys.stderr)
            finally:
                self._active = False
                self._file_handle = None
                self._metrics_handle = None

    def is_active(self) -> bool:
        return self._active

    def _write_header(self):
        header = f"""
{'='*80}
SwinFi - Session Log
{'='*80}
Session Start: {self._session_start.strftime('%Y-%m-%d %H:%M:%S')}
Log File: {self.log_file.name}
Metrics File: {self.metrics_file.name}
{'='*80}

"""
        self._file_handle.write(header)
        self._file_handle.flush()

    def _write_footer(self):
        if not self._file_handle or not self._session_start:
            return

        session_end = datetime.now()
        duration = session_end - self._session_start

        footer = f"""
{'='*80}
Session End: {session_end.strftime('%Y-%m-%d %H:%M:%S')}
Duration: {duration}
{'='*80}
"""
        self._file_handle.write(footer)
        self._file_handle.flush()

    def _write(self, message: str):
        """
        Write message to log file with timestamp.

        Args:
            message: Message to write
        """
        if not self._active or not self._file_handle:
            return

        try:
            timestamp = datetime.now().strftime('%Y-%m-%d %H:%M:%S.%f')[:-3]
            with self._write_lock:
                self._file_handle.write(f"[{timestamp}] {message}\n")
                self._file_handle.flush()
        except Exception as e:
            print(f"Error writing to log: {e}", file=sys.stderr)

    def log_status(self, level: str, message: str):
        """
        Log status message.

        Args:
            level: Status level (info, success, warning, error)
            message: Status message
        """
        self._write(f"[{level.upper()}] {message}")

    def log_stage(self, stage: str, action: str, detail: str = ""):
        """
        Log a pipeline stage transition.

        Args:
            stage: Stage name (synth, prep, train-ae, ...)
            action: started, completed, failed, skipped
            detail: Artifact path or reason
        """
        suffix = f": {detail}" if detail else ""
        self._write(f"[STAGE:{action.upper()}] {stage}{suffix}")

    def log_state(self, action: str, step: str, value: Any):
        self._write(f"[STATE:{action.upper()}] {step} = {value}")

    def log_config(self, action: str, key: str, value: Any):
        """
        Log configuration value.

        Args:
            action: Config action (load, set, override)
            key: Dotted configuration key
            value: Configuration value
        """
        self._write(f"[CONFIG:{action.upper()}] {key} = {value}")

    def log_metrics(self, record: Dict[str, Any]):
        """
        Append one structured metric record to the metrics file.

        Args:
            record: JSON-serializable mapping (event, step, values ...)
        """
        if not self._active or not self._metrics_handle:
            return

        try:
            line = json.dumps(record, sort_keys=True, default=_json_default)
            with self._write_lock:
                self._metrics_handle.write(line + "\n")
                self._metrics_handle.flush()
        except Exception as e:
            print(f"Error writing metrics: {e}", file=sys.stderr)

    def log_exception(self, exception: Exception, context: str = ""):
        """
        Log exception with full stack trace.

        Args:
            exception: Exception object
            context: Optional context description
        """
        self._write(f"[EXCEPTION] {context}")
        self._write(f"[EXCEPTION] {type(exception).__name__}: {str(exception)}")

        tb_lines = traceback.format_exception(type(exception), exception, exception.__traceback__)
        for line in tb_lines:
            for subline in line.strip().split('\n'):
                self._write(f"[EXCEPTION]   {subline}")

    def log_separator(self, title: str = ""):
        if title:
            self._write(f"{'-'*80}")
            self._write(f"  {title}")
            self._write(f"{'-'*80}")
        else:
            self._write(f"{'-'*80}")

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is not None:
            self.log_exception(exc_val, context="Unhandled exception during session")
        self.stop()


def _json_default(value: Any):
    """Serialize numpy scalars/arrays and anything else by str()."""
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def get_logger() -> SessionLogger:
    """
    Get global logger instance.

    Returns:
        SessionLogger instance
    """
    return SessionLogger.get_instance()
