"""Append-only CSV training curves (step, loss, lr, val_loss)."""
from __future__ import annotations

from pathlib import Path

FIELDS = ("step", "loss", "lr", "val_loss")


class CsvTrainLog:
    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text(",".join(FIELDS) + "\n")

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        vals = [str(int(row["step"]))] + [repr(float(row[k])) for k in FIELDS[1:]]
        with open(self.path, "a") as fh:
            fh.write(",".join(vals) + "\n")


def read_log(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, map(float, ln.split(",")))) for ln in lines[1:] if ln]
