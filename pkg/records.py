import csv
import json
import sqlite3
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

RESULTS_DB = "markovgp_results.db"


@dataclass
class ResultRecord:
    """Outcome of one cross-validated experiment."""

    config: Dict
    config_hash: str
    fold_nlpd: List[Optional[float]]
    fold_errors: Dict[str, str] = field(default_factory=dict)
    nlpd_mean: Optional[float] = None
    nlpd_std: Optional[float] = None
    energy_trace: List[float] = field(default_factory=list)
    wall_clock: float = 0.0
    hyperparameters: Dict[str, float] = field(default_factory=dict)
    posterior: Dict[str, list] = field(default_factory=dict)
    lattice: Optional[Dict[str, list]] = None
    diagnostics: Dict = field(default_factory=dict)

    @property
    def dataset(self) -> str:
        return str(self.config.get("dataset", "unknown"))

    @property
    def rule(self) -> str:
        return str(self.config.get("preset") or self.config.get("rule", "unknown")).lower()

    @property
    def stem(self) -> str:
        name = Path(self.dataset).stem if ("/" in self.dataset or "." in self.dataset) else self.dataset
        return f"{name}-{self.rule}-{self.config_hash[:8]}"

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ResultRecord":
        return cls(**data)


def write_record_json(record: ResultRecord, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{record.stem}.json"
    with open(path, "w") as handle:
        json.dump(record.to_dict(), handle, indent=2, sort_keys=True)
    return path


def load_record_json(path) -> ResultRecord:
    with open(path) as handle:
        return ResultRecord.from_dict(json.load(handle))


def write_posterior_csv(record: ResultRecord, out_dir) -> Path:
    """Per-step posterior mean and variance of every latent function."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{record.stem}.csv"
    t = record.posterior.get("t", [])
    means = record.posterior.get("mean", [])
    variances = record.posterior.get("var", [])
    latent_dim = len(means[0]) if means else 0
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t"] + [f"mean{i}" for i in range(latent_dim)] + [f"var{i}" for i in range(latent_dim)])
        for row in zip(t, means, variances):
            writer.writerow([row[0]] + list(row[1]) + list(row[2]))
    return path


class ResultStore:
    def __init__(self, db_path: str = RESULTS_DB):
        self.db_path = db_path
        self._init_db()

    def _init_db(self):
        conn = sqlite3.connect(self.db_path)
        conn.execute("""
            CREATE TABLE IF NOT EXISTS experiments (
                config_hash TEXT PRIMARY KEY,
                dataset TEXT,
                rule TEXT,
                folds INTEGER,
                nlpd_mean REAL,
                nlpd_std REAL,
                wall_clock REAL,
                config_json TEXT
            )
        """)
        conn.execute("""
            CREATE TABLE IF NOT EXISTS fold_results (
                config_hash TEXT,
                fold INTEGER,
                nlpd REAL,
                error TEXT,
                PRIMARY KEY (config_hash, fold),
                FOREIGN KEY (config_hash) REFERENCES experiments(config_hash)
            )
        """)
        conn.commit()
        conn.close()

    def save_record(self, record: ResultRecord):
        conn = sqlite3.connect(self.db_path)
        conn.execute("""
            INSERT OR REPLACE INTO experiments (config_hash, dataset, rule, folds, nlpd_mean, nlpd_std, wall_clock, config_json)
            VALUES (:config_hash, :dataset, :rule, :folds, :nlpd_mean, :nlpd_std, :wall_clock, :config_json)
        """, {
            "config_hash": record.config_hash,
            "dataset": record.dataset,
            "rule": record.rule,
            "folds": len(record.fold_nlpd),
            "nlpd_mean": record.nlpd_mean,
            "nlpd_std": record.nlpd_std,
            "wall_clock": record.wall_clock,
            "config_json": json.dumps(record.config, sort_keys=True),
        })
        folds = [{"config_hash": record.config_hash, "fold": i, "nlpd": nlpd,
                  "error": record.fold_errors.get(str(i))}
                 for i, nlpd in enumerate(record.fold_nlpd)]
        conn.executemany("""
            INSERT OR REPLACE INTO fold_results (config_hash, fold, nlpd, error)
            VALUES (:config_hash, :fold, :nlpd, :error)
        """, folds)
        conn.commit()
        conn.close()

    def fetch(self, config_hash: str) -> Optional[Dict]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        row = conn.execute("SELECT * FROM experiments WHERE config_hash = ?", (config_hash,)).fetchone()
        if row is None:
            conn.close()
            return None
        out = dict(row)
        out["folds"] = [dict(r) for r in conn.execute(
            "SELECT fold, nlpd, error FROM fold_results WHERE config_hash = ? ORDER BY fold", (config_hash,))]
        conn.close()
        return out

    def display(self):
        conn = sqlite3.connect(self.db_path)
        rows = conn.execute(
            "SELECT config_hash, dataset, rule, folds, nlpd_mean, nlpd_std, wall_clock FROM experiments ORDER BY dataset, rule"
        ).fetchall()
        conn.close()
        print("\n" + "=" * 90)
        print(f"{'HASH':<10} {'DATASET':<20} {'RULE':<8} {'FOLDS':<6} {'NLPD':<20} {'TIME (s)'}")
        print("-" * 90)
        for r in rows:
            nlpd = "failed" if r[4] is None else f"{r[4]:.4f} ± {r[5]:.4f}"
            print(f"{r[0][:8]:<10} {r[1]:<20} {r[2]:<8} {r[3]:<6} {nlpd:<20} {r[6]:.1f}")
        print("=" * 90)
