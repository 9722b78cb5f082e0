import logging
import os

import pandas as pd

from models.run_info import RunInfo
from services.settings import Settings

logger = logging.getLogger(__name__)


class RunTrackerService:
    """
    Semicolon-separated CSV log with one row per evaluated fold.

    With no tracking file (argument or LSPTM_RUN_LOG) every method is a no-op.
    """

    def __init__(self, tracking_file=None):
        self.tracking_file = tracking_file if tracking_file is not None else Settings().run_log
        self.run_info = RunInfo()

        # Create the CSV with the expected columns if it does not exist yet
        if self.enabled and not os.path.exists(self.tracking_file):
            df = pd.DataFrame(columns=self.get_columns())
            df.to_csv(self.tracking_file, sep=';', index=False, encoding='utf-8')

    @property
    def enabled(self):
        return bool(self.tracking_file)

    def get_columns(self):
        return self.run_info.get_log_headers()

    def _read(self):
        return pd.read_csv(self.tracking_file, sep=';', encoding='utf-8', dtype={'run_digest': str})

    def has_been_run(self, run_digest, fold):
        """True when ``fold`` of the run with ``run_digest`` is already logged as ok."""
        if not self.enabled or not os.path.exists(self.tracking_file):
            return False
        df = self._read()
        row = df[(df['run_digest'] == run_digest) & (df['fold'] == int(fold)) & (df['status'] == 'ok')]
        return not row.empty

    def log_fold(self, run_digest, backbone, fold, confusion, final_loss, status='ok'):
        if not self.enabled:
            return
        if os.path.exists(self.tracking_file):
            df = self._read()
        else:
            df = pd.DataFrame(columns=self.get_columns())

        row = self.run_info.create_fold_row(run_digest, backbone, fold, confusion, final_loss, status)
        new_data = pd.DataFrame([row], columns=df.columns)
        df = new_data if df.empty else pd.concat([df, new_data], ignore_index=True)
        df.to_csv(self.tracking_file, sep=';', index=False, encoding='utf-8')
        logger.debug("Logged fold %s of %s run %s", fold, backbone, run_digest[:12])

    def get_number_of_runs(self):
        """(ok, failed) fold counts in the log."""
        if not self.enabled or not os.path.exists(self.tracking_file):
            return 0, 0
        df = self._read()
        return int((df['status'] == 'ok').sum()), int((df['status'] == 'failed').sum())
