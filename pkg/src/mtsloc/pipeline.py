"""Stage orchestration: generate -> train -> detect -> localize -> evaluate.

Each stage reads its inputs from the output directory, writes its artifacts
there and records them (with sha256 hashes) in ``manifest.json``. A stage
whose inputs are unchanged and whose artifacts are intact is skipped unless
``force`` is set.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import shutil
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig
from .data import (LabeledDataset, NormStats, SeriesMatrix, generate_wvs, label_segments, load_labels_csv,
                   load_series_csv, window_split, write_series_csv, zscore_normalize)
from .detect import DetectionConfig, anomaly_score, calibrate_sigma, default_allowance, detect, fir_cusum
from .errors import MissingArtifactError
from .evaluation import MetricsReport, auc, ips, point_metrics, sweep_windows, write_sweep_csv
from .localize import (SfasPool, correlation_weights, eval_percentile, localize_steps, segment_localize,
                       stas_scores)
from .model import ModelConfig, encode_window, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

STAGES = ("generate", "train", "detect", "localize", "evaluate", "sweep")
UPSTREAM = {
    "generate": (),
    "train": ("generate",),
    "detect": ("train",),
    "localize": ("train",),
    "evaluate": ("detect", "localize"),
    "sweep": ("localize",),
}


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    def __init__(self, root: Path):
        self.root = root
        self.path = root / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"format_version": 1, "stages": {}}

    def save(self, config: RunConfig) -> None:
        self.data["config_hash"] = config.digest()
        self.data["seed"] = config.seed
        self.data["versions"] = {"mtsloc": __version__, "numpy": np.__version__, "python": platform.python_version()}
        try:
            import torch

            self.data["versions"]["torch"] = torch.__version__
        except ImportError:
            pass
        self.root.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True))

    def record(self, stage: str, input_hash: str, artifacts: list[Path]) -> None:
        self.data["stages"][stage] = {
            "input_hash": input_hash,
            "artifacts": {str(p.relative_to(self.root)): sha256_file(p) for p in artifacts},
        }

    def verify(self, stage: str | None = None) -> list[str]:
        """Artifacts that are missing or whose content no longer matches the recorded hash."""
        bad = []
        stages = [stage] if stage else list(self.data["stages"])
        for s in stages:
            for rel, digest in self.data["stages"].get(s, {}).get("artifacts", {}).items():
                p = self.root / rel
                if not p.exists() or sha256_file(p) != digest:
                    bad.append(rel)
        return bad

    def stage_hash(self, stage: str) -> str:
        arts = self.data["stages"].get(stage, {}).get("artifacts", {})
        return hashlib.sha256(json.dumps(arts, sort_keys=True).encode()).hexdigest()

    def done(self, stage: str, input_hash: str) -> bool:
        entry = self.data["stages"].get(stage)
        return bool(entry) and entry["input_hash"] == input_hash and not self.verify(stage)


def _require(manifest: Manifest, stage: str, needed: str) -> None:
    if needed not in manifest.data["stages"]:
        raise MissingArtifactError(f"stage '{stage}' needs the output of '{needed}'; run `mtsloc {needed}` first")
    bad = manifest.verify(needed)
    if bad:
        raise MissingArtifactError(f"artifacts of stage '{needed}' are missing or modified ({', '.join(bad)}); "
                                   f"rerun `mtsloc {needed} --force`")


def _write_matrix(path: Path, m: np.ndarray, header=None, fmt=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if header is not None:
            w.writerow(header)
        for row in np.asarray(m):
            w.writerow([fmt(v) for v in row] if fmt else row.tolist())


def _read_matrix(path: Path) -> np.ndarray:
    return load_series_csv(path, has_header=True).values


class Pipeline:
    def __init__(self, config: RunConfig, out_dir=None, force: bool = False):
        config.validate()
        self.config = config
        self.root = Path(out_dir or config.out_dir)
        if not self.root.is_absolute() and out_dir is None:
            self.root = config.base_dir / self.root
        self.force = force
        self.manifest = Manifest(self.root)

    def run(self, stages) -> dict:
        ran = {}
        for stage in STAGES:
            if stage in stages:
                ran[stage] = self.run_stage(stage)
        return ran

    def upstream(self, stage: str) -> tuple[str, ...]:
        if stage == "localize" and self.config.localize_opts()["h1_mode"] == "fixed":
            return ("train", "detect")
        return UPSTREAM[stage]

    def run_stage(self, stage: str) -> str:
        ups = self.upstream(stage)
        for up in ups:
            _require(self.manifest, stage, up)
        input_hash = hashlib.sha256(
            (self.config.digest() + "".join(self.manifest.stage_hash(u) for u in ups)).encode()
        ).hexdigest()
        if not self.force and self.manifest.done(stage, input_hash):
            log.info("stage %s is up to date", stage)
            return "skipped"
        out = self.root / stage
        out.mkdir(parents=True, exist_ok=True)
        artifacts = getattr(self, f"_{stage}")(out)
        self.manifest.record(stage, input_hash, artifacts)
        self.manifest.save(self.config)
        return "ran"

    # ------------------------------------------------------------------ loaders

    def dataset(self) -> LabeledDataset:
        d = self.root / "generate"
        train = load_series_csv(d / "train.csv", has_header=True)
        test = load_series_csv(d / "test.csv", has_header=True)
        labels = _read_matrix(d / "labels.csv").astype(np.int8)
        return LabeledDataset.from_labels(train, test, labels)

    def normalized(self, ds: LabeledDataset):
        stats = NormStats.from_dict(json.loads((self.root / "train" / "norm_stats.json").read_text()))
        return zscore_normalize(ds.train, stats)[0], zscore_normalize(ds.test, stats)[0]

    def model(self):
        return load_checkpoint(self.root / "train" / "model.npz")

    # ------------------------------------------------------------------ stages

    def _generate(self, out: Path) -> list[Path]:
        cfg = self.config
        if cfg.data.get("source", "wvs") == "wvs":
            wvs = cfg.wvs_config()
            ds = generate_wvs(wvs)
            (out / "wvs.cfg").write_text(wvs.to_text())
            meta = ds.meta
        else:
            header = str(cfg.data.get("has_header", "false")).lower() in ("1", "true", "yes")
            train = load_series_csv(cfg.path("train_path"), header)
            test = load_series_csv(cfg.path("test_path"), header)
            if train.d != test.d:
                raise ValueError(f"train has {train.d} series but test has {test.d}")
            test = SeriesMatrix(test.values, train.names)
            if "labels_path" in cfg.data:
                labels = load_labels_csv(cfg.path("labels_path"), test.values.shape, header)
            else:
                labels = np.zeros(test.values.shape, dtype=np.int8)
            ds = LabeledDataset.from_labels(train, test, labels)
            meta = {"source": "csv"}
        write_series_csv(out / "train.csv", ds.train)
        write_series_csv(out / "test.csv", ds.test)
        _write_matrix(out / "labels.csv", ds.dim_labels, ds.test.names)
        _write_matrix(out / "point_labels.csv", ds.point_labels[:, None], ["label"])
        meta["segments"] = [[s, e, list(dims)] for s, e, dims in ds.segments]
        (out / "meta.json").write_text(json.dumps(meta, indent=2))
        return [out / n for n in ("train.csv", "test.csv", "labels.csv", "point_labels.csv", "meta.json")] + (
            [out / "wvs.cfg"] if (out / "wvs.cfg").exists() else [])

    def _train(self, out: Path) -> list[Path]:
        ds = self.dataset()
        x_train, stats = zscore_normalize(ds.train, ds.train)
        mc = ModelConfig(d=ds.train.d, **self.config.model_kwargs())
        model, history = train(window_split(x_train, mc.T), mc)
        (out / "norm_stats.json").write_text(json.dumps(stats.to_dict()))
        save_checkpoint(out / "model.npz", model)
        history.to_csv(out / "training_log.csv")
        return [out / "norm_stats.json", out / "model.npz", out / "training_log.csv"]

    def _detect(self, out: Path) -> list[Path]:
        ds = self.dataset()
        x_train, x_test = self.normalized(ds)
        model = self.model()
        T = model.config.T
        tr = encode_window(window_split(x_train, T), model)
        te = encode_window(window_split(x_test, T), model)
        as_train = anomaly_score(tr.recon_error, tr.d_div).ravel()
        as_test = anomaly_score(te.recon_error, te.d_div).ravel()
        dc = DetectionConfig(**self.config.detect_kwargs(), window=T)
        dc.validate()
        if dc.K is None:
            dc.K = default_allowance(as_train)
        sigma = calibrate_sigma(as_train, dc)
        res = detect(as_test, sigma, dc, train_cusum=fir_cusum(as_train, dc))
        res.to_csv(out / "detection.csv")
        res.to_json(out / "detection.json")
        _write_matrix(out / "errors.csv", np.column_stack([te.recon_error.ravel(), te.d_div.ravel()]), ["E", "D_div"])
        return [out / "detection.csv", out / "detection.json", out / "errors.csv"]

    def _localize(self, out: Path) -> list[Path]:
        opts = self.config.localize_opts()
        ds = self.dataset()
        x_train, x_test = self.normalized(ds)
        model = self.model()
        weights = correlation_weights(x_train, opts["method"])
        res = stas_scores(x_test, model, weights)
        n, d = res.scores.shape
        values = x_test.values[:n]
        labels = ds.dim_labels[:n]

        if opts["h1_mode"] == "eval":
            steps = np.flatnonzero(labels.any(axis=1))
            segments = [(s, e) for s, e, _ in label_segments(labels)]
            h1 = [eval_percentile(int(labels[t].sum()), d) for t in steps]
            seg_h1 = [eval_percentile(int(labels[s : e + 1].any(axis=0).sum()), d) for s, e in segments]
        else:
            det = json.loads((self.root / "detect" / "detection.json").read_text())
            segments = [(s, min(e, n - 1)) for s, e in det["segments"] if s < n]
            steps = np.array([t for s, e in segments for t in range(s, e + 1)], dtype=int)
            h1 = [opts["h1_percentile"]] * len(steps)
            seg_h1 = [opts["h1_percentile"]] * len(segments)
        starts = [next(s for s, e in segments if s <= t <= e) for t in steps]
        maps = localize_steps(res.scores, values, steps, starts, h1, q=opts["h2_percentile"],
                              per_series=opts["h2_per_series"], min_window=opts["sfas_min_window"])

        pool = SfasPool(opts["h2_percentile"], opts["h2_per_series"])
        reports = []
        for (s, e), p in zip(segments, seg_h1):
            try:
                dec = segment_localize(res.scores, values, (s, e), p, pool=pool, w2=opts["w2"])
                reports.append(dec.to_dict())
            except ValueError as exc:
                reports.append({"segment": [s, e], "error": str(exc)})

        fmt = lambda v: repr(float(v))  # noqa: E731
        names = list(ds.test.names)
        _write_matrix(out / "stas.csv", res.scores, names, fmt)
        _write_matrix(out / "sfas.csv", maps.sfas, names, fmt)
        for key in ("c1", "c2", "c_combined"):
            _write_matrix(out / f"{key}.csv", getattr(maps, key), names)
        _write_matrix(out / "weights.csv", weights.matrix, names, fmt)
        report = {"h1_mode": opts["h1_mode"], "h2_percentile": opts["h2_percentile"], "method": opts["method"],
                  "constant_series": weights.constant_series, "stas_degenerate_steps": int(res.degenerate_steps.sum()),
                  "steps": steps.tolist(), **maps.meta, "segments": reports}
        (out / "segments.json").write_text(json.dumps(report, indent=2))
        return [out / n for n in ("stas.csv", "sfas.csv", "c1.csv", "c2.csv", "c_combined.csv", "weights.csv",
                                  "segments.json")]

    def _evaluate(self, out: Path) -> list[Path]:
        ds = self.dataset()
        loc = self.root / "localize"
        stas = _read_matrix(loc / "stas.csv")
        c1 = _read_matrix(loc / "c1.csv")
        cc = _read_matrix(loc / "c_combined.csv")
        report = json.loads((loc / "segments.json").read_text())
        n = stas.shape[0]
        labels = ds.dim_labels[:n]
        det = load_series_csv(self.root / "detect" / "detection.csv", has_header=True).values
        flags, scores = det[:, 3], det[:, 1]
        point = ds.point_labels[: len(flags)]

        metrics = {"detection": _report(point, flags, scores).to_dict()}
        steps = np.asarray(report["steps"], dtype=int)
        if len(steps) and labels[steps].any():
            truth = labels[steps]
            combined_score = stas[steps] + (cc[steps] - c1[steps])
            metrics["timestep"] = {
                "stas": _report(truth, c1[steps], stas[steps]).to_dict(),
                "stas_sfas": _report(truth, cc[steps], combined_score).to_dict(),
            }
            thr = self.config.localize_opts()["sweep_threshold"]
            fixed = (stas[steps] > thr).astype(np.int8)
            metrics["timestep"]["stas_fixed_threshold"] = _report(truth, fixed, stas[steps]).to_dict()
        segs = [r for r in report["segments"] if "error" not in r]
        if segs:
            truth = np.array([labels[r["segment"][0] : r["segment"][1] + 1].any(axis=0) for r in segs]).astype(np.int8)
            s_stas = np.array([r["stas_scores"] for r in segs])
            s_c1 = np.array([r["c1"] for r in segs])
            s_cc = np.array([r["c_combined"] for r in segs])
            seg_stas = _report(truth, s_c1, s_stas)
            seg_comb = _report(truth, s_cc, s_stas + (s_cc - s_c1))
            if truth.any(axis=1).any():
                g = [set(np.flatnonzero(t)) for t in truth]
                seg_stas.ips = ips(g, [set(np.flatnonzero(c)) for c in s_c1])
                seg_comb.ips = ips(g, [set(np.flatnonzero(c)) for c in s_cc])
                seg_comb.per_segment = [{"segment": r["segment"], "truth": sorted(int(i) for i in gi),
                                         "predicted": [int(i) for i in np.flatnonzero(c)]} for r, gi, c in zip(segs, g, s_cc)]
            metrics["segment"] = {"stas": seg_stas.to_dict(), "stas_sfas": seg_comb.to_dict()}
        gt_segments = [(s, e) for s, e, _ in label_segments(labels)]
        if gt_segments:
            opts = self.config.localize_opts()
            table = sweep_windows(stas, labels, gt_segments, w2=opts["sweep_w2"], threshold=opts["sweep_threshold"])
            metrics["window_sweep"] = table
        metrics["config"] = {"seed": self.config.seed, "config_hash": self.config.digest(),
                             "detect": json.loads((self.root / "detect" / "detection.json").read_text())}
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
        return [out / "metrics.json"]

    def _sweep(self, out: Path) -> list[Path]:
        ds = self.dataset()
        stas = _read_matrix(self.root / "localize" / "stas.csv")
        labels = ds.dim_labels[: stas.shape[0]]
        opts = self.config.localize_opts()
        segs = [(s, e) for s, e, _ in label_segments(labels)]
        if not segs:
            raise MissingArtifactError("window sweep needs labelled anomalous segments")
        table = sweep_windows(stas, labels, segs, w2=opts["sweep_w2"], threshold=opts["sweep_threshold"])
        write_sweep_csv(out / "sweep.csv", table)
        return [out / "sweep.csv"]


def _report(truth, pred, scores) -> MetricsReport:
    p, r, f1 = point_metrics(pred, truth)
    truth = np.asarray(truth)
    a = auc(scores, truth) if 0 < truth.sum() < truth.size else None
    return MetricsReport(p, r, f1, a)


def run_pipeline(config: RunConfig, stages, out_dir=None, force: bool = False) -> dict:
    """Run the requested stages in pipeline order; returns {stage: 'ran' | 'skipped'}."""
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {', '.join(sorted(unknown))}")
    return Pipeline(config, out_dir, force).run(stages)


def clean(out_dir) -> None:
    shutil.rmtree(out_dir, ignore_errors=True)
