import csv
import logging

import numpy as np


def trajectory_fieldnames(n_states: int):
    return ["t"] + [f"b{i + 1}" for i in range(n_states)] + ["action", "observation"]


def set_grid_fieldnames(n_states: int):
    return [f"b{i + 1}" for i in range(n_states)] + ["value", "level", "inside"]


class PomdpCSV:
    def __init__(self, csv_path: str):
        """
        CSV output/input for trajectories, sample clouds and sublevel-set grids.
        csv_path: path to the CSV file
        """
        self.csv_path = csv_path

    def detect_delimiter(self):
        """
        Detects the delimiter used in the CSV file (',' or ';').
        return: str
        """
        logging.debug(f"Detecting delimiter for CSV file: {self.csv_path}")
        try:
            with open(self.csv_path, newline="", encoding="utf-8-sig") as f:
                sample = f.read(2048)
                dialect = csv.Sniffer().sniff(sample, delimiters=";,")
                return dialect.delimiter
        except Exception as e:
            logging.error(f"Unable to detect delimiter for {self.csv_path}: {e}. Defaulting to ','")
            return ","

    def read_header(self, delimiter: str = ","):
        """
        Returns the header (column names) of the CSV file.
        return: list[str]
        """
        try:
            with open(self.csv_path, newline="", encoding="utf-8-sig") as f:
                return next(csv.reader(f, delimiter=delimiter))
        except Exception as e:
            logging.error(f"Failed to read header from {self.csv_path}: {e}")
            return []

    def count_rows(self, delimiter: str = ","):
        """
        Count data rows (excluding header).
        return: int
        """
        try:
            with open(self.csv_path, newline="", encoding="utf-8-sig") as f:
                reader = csv.reader(f, delimiter=delimiter)
                next(reader, None)
                return sum(1 for _ in reader)
        except Exception as e:
            logging.error(f"Unable to count rows in {self.csv_path}: {e}")
            return 0

    def read_csv(self, delimiter: str = ","):
        """
        Reads the CSV file using the specified delimiter.
        return: list[dict]
        """
        logging.debug(f"Reading CSV file: {self.csv_path} (delimiter='{delimiter}')")
        try:
            with open(self.csv_path, newline="", encoding="utf-8-sig") as f:
                rows = list(csv.DictReader(f, delimiter=delimiter))
                logging.debug(f"Read {len(rows)} rows from {self.csv_path}")
                return rows
        except Exception as e:
            logging.error(f"Failed to read CSV {self.csv_path}: {e}")
            return []

    def write_csv(self, rows: list[dict], fieldnames: list[str], delimiter: str = ",") -> bool:
        """
        Writes rows to the CSV file using the specified delimiter.
        return: bool
        """
        logging.debug(f"Writing {len(rows)} rows to CSV file: {self.csv_path}")
        try:
            with open(self.csv_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.DictWriter(f, fieldnames=fieldnames, delimiter=delimiter, lineterminator="\n")
                writer.writeheader()
                writer.writerows(rows)
            logging.debug(f"CSV successfully written: {self.csv_path}")
            return True
        except Exception as e:
            logging.error(f"Failed to write CSV {self.csv_path}: {e}")
            return False

    def write_trajectories(self, trajectories, n_states: int) -> bool:
        """
        One row per belief, trajectories concatenated (t restarts at 0).
        return: bool
        """
        rows = [row for trajectory in trajectories for row in trajectory.rows()]
        return self.write_csv(rows, trajectory_fieldnames(n_states))

    def write_set_grid(self, grid, n_states: int) -> bool:
        """
        grid: iterable of (belief vector, value, level, inside)
        return: bool
        """
        rows = []
        for point, value, level, inside in grid:
            row = {f"b{i + 1}": repr(float(v)) for i, v in enumerate(point)}
            row.update({"value": repr(float(value)), "level": repr(float(level)), "inside": int(bool(inside))})
            rows.append(row)
        return self.write_csv(rows, set_grid_fieldnames(n_states))

    def read_beliefs(self, delimiter: str | None = None):
        """
        Belief columns b1..bn of a trajectory, cloud or grid CSV.
        return: np.ndarray (rows x n), empty on failure
        """
        delimiter = delimiter or self.detect_delimiter()
        header = self.read_header(delimiter)
        columns = [name for name in header if name.startswith("b") and name[1:].isdigit()]
        rows = self.read_csv(delimiter)
        if not columns or not rows:
            return np.zeros((0, len(columns)))
        return np.array([[float(row[c]) for c in columns] for row in rows])
