import logging
import os
import sys
from contextlib import contextmanager
from logging import Handler
from logging.handlers import RotatingFileHandler

from . import __version__


class InMemoryLogHandler(Handler):
    def __init__(self, capacity=300):
        super().__init__()
        self.log_records = []
        self.capacity = capacity
        self.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))

    def emit(self, record):
        try:
            log_entry = self.format(record)
            if len(self.log_records) >= self.capacity:
                self.log_records.pop(0)  # oldest first
            self.log_records.append(log_entry)
        except Exception as e:
            sys.stderr.write(f"Error in InMemoryLogHandler.emit: {str(e)}\n")

    def clear(self):
        self.log_records = []


class WarningCollector(Handler):
    """Keeps (level, message) of every WARNING-or-worse record seen while attached."""

    def __init__(self):
        super().__init__(logging.WARNING)
        self.collected = []

    def emit(self, record):
        self.collected.append((record.levelno, record.getMessage()))


class ExperimentLogFilter(logging.Filter):
    """Filter to add experiment context to log records"""

    def __init__(self):
        super().__init__()
        self.run_id = "-"

    def filter(self, record):
        record.run_id = self.run_id
        record.package_version = __version__
        return True


class GlobalLogger:
    _instance = None

    @staticmethod
    def get_instance():
        if GlobalLogger._instance is None:
            GlobalLogger()
        return GlobalLogger._instance

    def __init__(self):
        if GlobalLogger._instance is not None:
            raise RuntimeError("GlobalLogger is a singleton; call GlobalLogger.get_instance()")
        GlobalLogger._instance = self
        self.logger = None
        self.context_filter = None
        self.memory_handler = None
        self.console_handler = None
        self.file_handler = None
        self.setup_logger()

    def setup_logger(self, console_level=logging.WARNING):
        try:
            self.logger = logging.getLogger("SepalLogger")
            self.logger.setLevel(logging.DEBUG)
            self.logger.propagate = False

            if self.logger.handlers:
                self.logger.handlers.clear()
            for existing in list(self.logger.filters):
                self.logger.removeFilter(existing)

            self.context_filter = ExperimentLogFilter()
            self.logger.addFilter(self.context_filter)

            detailed_formatter = logging.Formatter(
                '%(asctime)s - %(levelname)s - [sepal v%(package_version)s] - '
                'Run: %(run_id)s - %(message)s'
            )
            console_formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

            self.memory_handler = InMemoryLogHandler(capacity=1000)
            self.memory_handler.setLevel(logging.DEBUG)
            self.memory_handler.setFormatter(detailed_formatter)
            self.logger.addHandler(self.memory_handler)

            if sys.stderr:
                self.console_handler = logging.StreamHandler(sys.stderr)
                self.console_handler.setLevel(console_level)
                self.console_handler.setFormatter(console_formatter)
                self.logger.addHandler(self.console_handler)

            self.logger.debug("GlobalLogger initialized successfully")
        except Exception as e:
            sys.stderr.write(f"Failed to initialize GlobalLogger: {str(e)}\n")
            raise

    def get_logger(self):
        """The shared SepalLogger, set up on first use."""
        if self.logger is None:
            self.setup_logger()
        return self.logger

    def set_console_level(self, level):
        if isinstance(level, str):
            level = getattr(logging, level.upper(), logging.WARNING)
        if self.console_handler is not None:
            self.console_handler.setLevel(level)

    def set_run_id(self, run_id):
        """Stamp subsequent records with the run's config hash."""
        self.context_filter.run_id = run_id or "-"

    def attach_run_directory(self, run_dir, max_bytes=5_000_000, backup_count=2):
        """
        Mirror every record into ``experiment.log`` inside the run directory.
        :param run_dir: directory that receives the log file
        :return: path of the log file
        """
        self.detach_run_directory()
        os.makedirs(run_dir, exist_ok=True)
        log_path = os.path.join(run_dir, "experiment.log")
        self.file_handler = RotatingFileHandler(
            log_path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8"
        )
        self.file_handler.setLevel(logging.DEBUG)
        self.file_handler.setFormatter(self.memory_handler.formatter)
        self.logger.addHandler(self.file_handler)
        return log_path

    def detach_run_directory(self):
        if self.file_handler is not None:
            self.logger.removeHandler(self.file_handler)
            self.file_handler.close()
            self.file_handler = None

    @contextmanager
    def collect_warnings(self):
        """
        Collect warnings logged inside the block.
        :return: list of (levelno, message), filled as records arrive
        """
        collector = WarningCollector()
        self.logger.addHandler(collector)
        try:
            yield collector.collected
        finally:
            self.logger.removeHandler(collector)

    def get_memory_logs(self, last_n=None, level=None):
        """
        Formatted records kept in memory, oldest first.
        :param last_n: keep only the newest N
        :param level: keep only records of this level name, e.g. "WARNING"
        """
        logs = list(self.memory_handler.log_records)
        if level:
            logs = [log for log in logs if f" - {level.upper()} - " in log]
        if last_n:
            logs = logs[-last_n:]
        return logs

    def warning_count(self):
        return len(self.get_memory_logs(level="WARNING"))

    def clear_memory_logs(self):
        if self.memory_handler:
            self.memory_handler.clear()
