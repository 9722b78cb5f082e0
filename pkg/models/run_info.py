from typing import Any, Dict, List, Optional


class RunInfo:
    """Column layout and row builder for the per-fold run log."""

    def __init__(self):
        # Standard log columns for CSV tracking
        self.log_columns = [
            'run_digest', 'backbone', 'fold', 'tp', 'fn', 'fp', 'tn', 'final_loss', 'status'
        ]

    def get_log_headers(self) -> List[str]:
        return list(self.log_columns)

    def create_fold_row(self, run_digest: str, backbone: str, fold: int, confusion: Dict[str, int],
                        final_loss: Optional[float], status: str = 'ok') -> Dict[str, Any]:
        """One log row for an evaluated fold; ``confusion`` holds tp, fn, fp and tn."""
        row = {
            'run_digest': run_digest,
            'backbone': backbone,
            'fold': int(fold),
            'final_loss': final_loss,
            'status': status,
        }
        row.update({k: int(confusion[k]) for k in ('tp', 'fn', 'fp', 'tn')})
        return {column: row[column] for column in self.log_columns}
