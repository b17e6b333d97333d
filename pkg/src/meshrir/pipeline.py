"""End-to-end composition: generation, evaluation, benchmarking, rendering."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import signal
from scipy.io import wavfile

from . import acoustics, codec, gan
from .encoder import build_embedding
from .mesh import TriangleMesh, load_mesh, mesh_to_graph, normalize_scene, simplify_mesh
from .training import IRDataset, IRModel, load_checkpoint

STAGES = ("load", "simplify", "normalize", "graph", "encode", "embed", "generate", "unpack", "write")


class PipelineError(RuntimeError):
    """A failure inside one named pipeline stage."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and not isinstance(exc, PipelineError):
            raise PipelineError(self.name, exc) from exc
        return False


def _model(checkpoint) -> IRModel:
    if isinstance(checkpoint, IRModel):
        return checkpoint
    return load_checkpoint(checkpoint)[0]


def encode_scene(model: IRModel, graph) -> np.ndarray:
    """Mesh latent for one scene graph (one encoder pass)."""
    with torch.no_grad():
        return model.encoder(graph).double().numpy()


def decode_output(generated: np.ndarray, variant: str) -> np.ndarray:
    """Generator output -> cropped 3968-sample IR."""
    if variant == "unprocessed":
        return np.asarray(generated[: codec.CROP_LENGTH], dtype=np.float64)
    return codec.unpack_samples(generated)


@dataclass
class GeneratedIRs:
    paths: list
    irs: np.ndarray  # (n, 3968) at 16 kHz
    encode_calls: int
    generate_calls: int


def _pairs(sources, listeners):
    src = np.atleast_2d(np.asarray(sources, dtype=float))
    lis = np.atleast_2d(np.asarray(listeners, dtype=float))
    if src.shape[1:] != (3,) or lis.shape[1:] != (3,):
        raise ValueError("positions must be 3-D points")
    if len(src) == 1 and len(lis) > 1:
        src = np.repeat(src, len(lis), axis=0)
    if len(lis) == 1 and len(src) > 1:
        lis = np.repeat(lis, len(src), axis=0)
    if len(src) != len(lis):
        raise ValueError(f"{len(src)} sources but {len(lis)} listeners")
    return src, lis


def generate_ir(mesh_path, sources, listeners, checkpoint, out=None,
                target_faces: int = 2000, weld_epsilon: float = 1e-4) -> GeneratedIRs:
    """Predict one 16 kHz IR per (source, listener) pair in a mesh scene.

    The mesh is simplified, graphed and encoded once; each pair then costs a
    single generator pass. ``out`` is a ``.wav`` path for a single pair or a
    directory (files ``ir_000.wav`` ...) otherwise; ``None`` writes nothing.
    """
    with _Stage("load"):
        model = _model(checkpoint)
        mesh = load_mesh(mesh_path)
        src, lis = _pairs(sources, listeners)
    with _Stage("simplify"):
        mesh = simplify_mesh(mesh, target_faces)
    with _Stage("normalize"):
        placed = [normalize_scene(mesh, s, l) for s, l in zip(src, lis)]
        shifted = placed[0][0]
    with _Stage("graph"):
        graph = mesh_to_graph(shifted, weld_epsilon)
    with _Stage("encode"):
        latent = encode_scene(model, graph)
    with _Stage("embed"):
        embeddings = [build_embedding(latent, s, l) for _, s, l in placed]
    irs = []
    for emb in embeddings:
        with _Stage("generate"):
            packed = gan.generate(emb, model.generator)
        with _Stage("unpack"):
            irs.append(decode_output(packed, model.variant))
    irs = np.array(irs)

    paths = []
    if out is not None:
        with _Stage("write"):
            out = Path(out)
            if out.suffix.lower() == ".wav":
                if len(irs) != 1:
                    raise ValueError(f"{len(irs)} IRs requested but output is a single file")
                targets = [out]
                out.parent.mkdir(parents=True, exist_ok=True)
            else:
                out.mkdir(parents=True, exist_ok=True)
                targets = [out / f"ir_{i:03d}.wav" for i in range(len(irs))]
            for path, ir in zip(targets, irs):
                codec.write_wav(codec.ImpulseResponse(ir, codec.RATE, "cropped"), path)
                paths.append(path)
    return GeneratedIRs(paths, irs, encode_calls=1, generate_calls=len(irs))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationReport:
    rows: list  # per-row dicts; a metric is None where its estimator failed
    mae: dict  # t60 (s), drr (dB), edt (s)
    mse_e4: float  # mean packed-vector MSE in units of 1e-4
    excluded: dict  # metric -> number of rows excluded
    exclusion_rate: dict
    spectra: list = field(default_factory=list)  # [{row, freqs, pred_db, truth_db}]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spectra"] = [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in s.items()}
                        for s in self.spectra]
        return d

    def table(self) -> str:
        n = len(self.rows)
        lines = [f"{'metric':<8}{'MAE':>12}{'excluded':>12}",
                 f"{'T60 s':<8}{self.mae['t60']:>12.4f}{self.excluded['t60']:>9d}/{n}",
                 f"{'DRR dB':<8}{self.mae['drr']:>12.4f}{self.excluded['drr']:>9d}/{n}",
                 f"{'EDT s':<8}{self.mae['edt']:>12.4f}{self.excluded['edt']:>9d}/{n}",
                 f"{'MSE e-4':<8}{self.mse_e4:>12.4f}{self.excluded['mse']:>9d}/{n}"]
        return "\n".join(lines)


_ESTIMATORS = {"t60": acoustics.t60, "drr": acoustics.drr, "edt": acoustics.edt}


def _estimate(fn, ir):
    try:
        v = float(fn(ir))
    except (ValueError, FloatingPointError):
        return None
    return v if math.isfinite(v) else None


def evaluate_pairs(predictions, truths, spectra: int = 0) -> EvaluationReport:
    """Compare cropped predicted IRs with cropped ground truth, row by row.

    A prediction of ``None`` (output that could not be decoded) is excluded
    from every metric and counted.
    """
    predictions = [None if p is None else np.asarray(p, dtype=float) for p in predictions]
    truths = [np.asarray(t, dtype=float) for t in truths]
    if not truths:
        raise ValueError("nothing to evaluate")
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions for {len(truths)} ground-truth rows")
    rows, abs_err, sq_err = [], {k: [] for k in _ESTIMATORS}, []
    for i, (p, t) in enumerate(zip(predictions, truths)):
        row = {"row": i, "decoded": p is not None}
        for name, fn in _ESTIMATORS.items():
            pv, tv = (None if p is None else _estimate(fn, p)), _estimate(fn, t)
            row[name] = pv
            row[name + "_truth"] = tv
            if pv is None or tv is None:
                row[name + "_rel"] = None
                continue
            diff = abs(pv - tv)
            abs_err[name].append(diff)
            row[name + "_rel"] = diff / abs(tv) if tv != 0 else (0.0 if diff == 0 else None)
        try:
            mse = None if p is None else float(np.mean((codec.pack_samples(p) - codec.pack_samples(t)) ** 2))
        except codec.CodecError:
            mse = None
        row["mse"] = mse
        if mse is not None:
            sq_err.append(mse)
        rows.append(row)

    n = len(rows)
    mae = {k: (float(np.mean(v)) if v else math.nan) for k, v in abs_err.items()}
    excluded = {k: n - len(v) for k, v in abs_err.items()}
    excluded["mse"] = n - len(sq_err)
    report = EvaluationReport(
        rows=rows, mae=mae,
        mse_e4=float(np.mean(sq_err)) / 1e-4 if sq_err else math.nan,
        excluded=excluded, exclusion_rate={k: v / n for k, v in excluded.items()})
    for i in range(min(spectra, n)):
        if predictions[i] is None:
            continue
        f, pd = acoustics.power_spectrum(predictions[i])
        _, td = acoustics.power_spectrum(truths[i])
        report.spectra.append({"row": i, "freqs": f, "pred_db": pd, "truth_db": td})
    return report


def predict_dataset(model: IRModel, dataset: IRDataset) -> list:
    """Cropped predictions for every dataset row; one encode per scene.

    Rows whose output carries a non-positive STD tag come back as ``None``.
    """
    latents = [encode_scene(model, g) for g in dataset.graphs]
    out = []
    for row in range(len(dataset)):
        pos = dataset.positions[row]
        emb = build_embedding(latents[dataset.scene_of_row[row]], pos[:3], pos[3:])
        try:
            out.append(decode_output(gan.generate(emb, model.generator), model.variant))
        except codec.CodecError:
            out.append(None)
    return out


def evaluate(manifest, checkpoint, spectra: int = 0, target_faces: int = 2000,
             weld_epsilon: float = 1e-4) -> EvaluationReport:
    from .shoebox import read_manifest

    rows = read_manifest(manifest)
    if not rows:
        raise ValueError(f"{manifest}: empty manifest")
    model = _model(checkpoint)
    dataset = IRDataset(rows, "full", target_faces, weld_epsilon)
    truths = [codec.unpack_samples(t) for t in dataset.targets]
    return evaluate_pairs(predict_dataset(model, dataset), truths, spectra)


def plot_spectra(report: EvaluationReport, out_dir) -> list[Path]:
    """Write one CSV and one PNG overlay per stored power spectrum."""
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in report.spectra:
        stem = out / f"spectrum_row{s['row']:04d}"
        np.savetxt(stem.with_suffix(".csv"), np.column_stack([s["freqs"], s["pred_db"], s["truth_db"]]),
                   delimiter=",", header="freq_hz,pred_db,truth_db", comments="")
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(s["freqs"], s["truth_db"], label="ground truth", lw=1)
        ax.plot(s["freqs"], s["pred_db"], label="generated", lw=1)
        ax.set_xlabel("frequency (Hz)")
        ax.set_ylabel("power (dB)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(stem.with_suffix(".png"), dpi=100)
        plt.close(fig)
        written += [stem.with_suffix(".csv"), stem.with_suffix(".png")]
    return written


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchmarkReport:
    simplify_s: float
    graph_s: float
    encode_s: float
    per_ir_batch1_s: float
    per_ir_batch128_s: float
    irs_per_second: float
    n_irs: int
    faces_in: int
    faces_out: int

    def to_dict(self):
        return asdict(self)

    def table(self) -> str:
        return "\n".join([
            f"mesh simplify     {self.simplify_s:10.4f} s  ({self.faces_in} -> {self.faces_out} faces)",
            f"graph convert     {self.graph_s:10.4f} s",
            f"encode (once)     {self.encode_s:10.4f} s",
            f"generate, b=1     {self.per_ir_batch1_s:10.6f} s/IR",
            f"generate, b=128   {self.per_ir_batch128_s:10.6f} s/IR",
            f"throughput        {self.irs_per_second:10.1f} IRs/s",
        ])


def bench(mesh_path, n_irs: int, checkpoint, seed: int = 0, target_faces: int = 2000,
          weld_epsilon: float = 1e-4) -> BenchmarkReport:
    """Time each stage separately; generation at batch sizes 1 and 128."""
    if n_irs < 1:
        raise ValueError("n_irs must be >= 1")
    model = _model(checkpoint)
    mesh = load_mesh(mesh_path)

    t = time.perf_counter()
    simple = simplify_mesh(mesh, target_faces)
    simplify_s = time.perf_counter() - t
    lo = simple.vertices.min(axis=0)
    shifted = TriangleMesh(simple.vertices - lo, simple.faces)

    t = time.perf_counter()
    graph = mesh_to_graph(shifted, weld_epsilon)
    graph_s = time.perf_counter() - t

    encode_scene(model, graph)  # warm-up
    t = time.perf_counter()
    latent = encode_scene(model, graph)
    encode_s = time.perf_counter() - t

    rng = np.random.default_rng(seed)
    hi = shifted.vertices.max(axis=0)
    pos = rng.uniform(0.1 * hi, 0.9 * hi, size=(max(n_irs, 128), 2, 3))
    emb = np.array([build_embedding(latent, s, l) for s, l in pos])

    gan.generate(emb[0], model.generator)  # warm-up
    n1 = min(n_irs, 32)
    t = time.perf_counter()
    for e in emb[:n1]:
        gan.generate(e, model.generator)
    per1 = (time.perf_counter() - t) / n1

    gan.generate(emb[:128], model.generator)  # warm-up
    batches = max(1, math.ceil(n_irs / 128))
    t = time.perf_counter()
    for b in range(batches):
        gan.generate(emb[:128], model.generator)
    per128 = (time.perf_counter() - t) / (128 * batches)
    return BenchmarkReport(simplify_s, graph_s, encode_s, per1, per128, 1.0 / per128, n_irs,
                           mesh.n_faces, simple.n_faces)


# ---------------------------------------------------------------------------
# speech rendering


@dataclass
class RenderResult:
    path: Path
    rate: int
    length: int
    scale: float  # 1.0 unless the output was peak-normalised


def read_audio(path) -> tuple[np.ndarray, int]:
    """Mono WAV as float64; integer PCM is scaled to [-1, 1)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels; "
                         f"downmix first (e.g. average the channels)")
    if np.issubdtype(data.dtype, np.integer):
        info = np.iinfo(data.dtype)
        if info.min == 0:  # 8-bit unsigned
            data = (data.astype(np.float64) - 128.0) / 128.0
        else:
            data = data.astype(np.float64) / -float(info.min)
    return data.astype(np.float64), int(rate)


def render_speech(speech_wav, ir_wav, out) -> RenderResult:
    """Reverberant speech s * r, full linear convolution.

    The IR is resampled to the speech rate when they differ. The result is
    scaled to a 0.99 peak only if it would otherwise clip; the applied scale
    is stored next to the WAV in ``<out>.json``.
    """
    speech, rate = read_audio(speech_wav)
    ir, ir_rate = read_audio(ir_wav)
    if len(speech) == 0 or len(ir) == 0:
        raise ValueError("speech and IR must be non-empty")
    if ir_rate != rate:
        ir = codec.resample(codec.ImpulseResponse(ir, ir_rate), rate).samples
    x = signal.fftconvolve(speech, ir, mode="full")
    peak = float(np.max(np.abs(x)))
    scale = 0.99 / peak if peak > 1.0 else 1.0
    x = x * scale
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(out, rate, x.astype(np.float32))
    meta = {"speech": str(speech_wav), "ir": str(ir_wav), "rate": rate, "length": len(x),
            "scale": scale}
    out.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return RenderResult(out, rate, len(x), scale)
