import logging
import os
import traceback
from logging.handlers import RotatingFileHandler
from typing import Optional

from colorama import Fore, Style, init

# Initialize colorama for colored console output
init()


class ColoredFormatter(logging.Formatter):
    COLORS = {
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.RED,
        'DEBUG': Fore.CYAN
    }

    def format(self, record):
        record.message = record.getMessage()
        record.asctime = self.formatTime(record, self.datefmt)
        log_message = f"{record.asctime} - {record.levelname} - {record.name} - {record.message}"
        if record.levelname == 'ERROR' and record.exc_info:
            log_message += f"\n{''.join(traceback.format_exception(*record.exc_info))}"
        return f"{self.COLORS.get(record.levelname, '')}{log_message}{Style.RESET_ALL}"


def setup_logger(log_level: str, log_file: Optional[str] = None, rank: Optional[int] = None):
    """Install the rotating file handler and the colored console handler on the root logger.

    Worker ranks log to ``<log_file>.rank<N>`` so that processes never share a rotating file.
    """
    logger = logging.getLogger()
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    for handler in list(logger.handlers):
        if getattr(handler, "_eqhamnet", False):
            logger.removeHandler(handler)
            handler.close()

    if log_file:
        if rank is not None and rank > 0:
            log_file = f"{log_file}.rank{rank}"
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir)

        file_formatter = logging.Formatter(
            "%(asctime)s - %(levelname)s - %(name)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )
        # File handler with rotation
        file_handler = RotatingFileHandler(
            log_file,
            maxBytes=10*1024*1024,  # 10MB
            backupCount=5
        )
        file_handler.setFormatter(file_formatter)
        file_handler._eqhamnet = True
        logger.addHandler(file_handler)

    console_formatter = ColoredFormatter(
        "%(asctime)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S"
    )
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(console_formatter)
    console_handler._eqhamnet = True
    logger.addHandler(console_handler)
    return logger
