from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional


@dataclass
class TrainState:
    epoch: int = 0
    global_step: int = 0
    # best validation macro-F1 seen so far; ties keep the earliest epoch
    best_score: Optional[float] = None
    best_epoch: Optional[int] = None
    history: List[Dict[str, Any]] = field(default_factory=list)

    def advance_epoch(self, row: Dict[str, Any]) -> int:
        self.epoch += 1
        self.history.append(dict(row))
        return self.epoch

    def offer(self, score: float) -> bool:
        """Record `score` for the current epoch; True when it beats every earlier epoch."""
        if self.best_score is None or score > self.best_score:
            self.best_score, self.best_epoch = score, self.epoch
            return True
        return False

    def to_meta(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_score": self.best_score,
            "best_epoch": self.best_epoch,
            "history": self.history,
        }

    @classmethod
    def from_meta(cls, meta: Dict[str, Any]) -> "TrainState":
        return cls(
            epoch=int(meta.get("epoch", 0)),
            global_step=int(meta.get("global_step", 0)),
            best_score=meta.get("best_score"),
            best_epoch=meta.get("best_epoch"),
            history=list(meta.get("history", [])),
        )
