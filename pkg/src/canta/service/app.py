"""FastAPI service wrapping the core package.

Quick operations (corpus generation, feature extraction, synthesis,
conversion, evaluation, plotting) run synchronously; training phases and the
experiment matrix run as queued background jobs polled via /jobs/{id}.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from .. import __version__, recipes
from ..config import Resolved, load_config_file, resolve
from ..container import ContainerError
from ..train import TrainingDiverged
from . import schemas
from .jobs import JobRegistry

_CLIENT_ERRORS = (ValueError, KeyError, FileNotFoundError, ContainerError, TrainingDiverged)


def _resolve_request(req: schemas.ConfiguredRequest) -> Resolved:
    data = {}
    if req.config_path:
        data = load_config_file(req.config_path)
    if req.config:
        from ..config import apply_overrides

        data = apply_overrides(data, _flatten("", req.config))
    return resolve(data, req.overrides)


def _flatten(prefix: str, node: dict) -> dict:
    out = {}
    for key, value in node.items():
        dotted = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            out.update(_flatten(dotted, value))
        else:
            out[dotted] = value
    return out


def create_app() -> FastAPI:
    app = FastAPI(title="canta", version=__version__)
    registry = JobRegistry()
    app.state.jobs = registry

    def guarded(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except _CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=f"{type(exc).__name__}: {exc}")

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return {"status": "ok", "version": __version__}

    @app.get("/defaults")
    def defaults():
        return resolve().snapshot()

    @app.post("/corpus/generate", response_model=schemas.CorpusResponse)
    def corpus_generate(req: schemas.CorpusRequest):
        resolved = guarded(_resolve_request, req)
        manifest = guarded(recipes.generate_corpus, resolved, req.out_dir, req.export_wav)
        return {
            "manifest_path": manifest["manifest_path"],
            "feature_fingerprint": manifest["feature_fingerprint"],
            "subsets": manifest["subsets"],
            "scripts": manifest["scripts"],
        }

    @app.post("/features/extract", response_model=schemas.FeaturesResponse)
    def features_extract(req: schemas.FeaturesRequest):
        resolved = guarded(_resolve_request, req)
        items = [item.model_dump() for item in req.items]
        return guarded(
            recipes.extract_real_features, items, req.out_path, resolved, req.stats_from
        )

    def _submit(kind: str, req, runner) -> schemas.JobCreated:
        resolved = guarded(_resolve_request, req)

        def fn(job):
            return runner(resolved, job)

        job = registry.submit(kind, fn)
        return schemas.JobCreated(job_id=job.job_id, kind=kind, state=job.status()["state"])

    @app.post("/train", response_model=schemas.JobCreated)
    def train(req: schemas.TrainRequest):
        return _submit(
            "train",
            req,
            lambda resolved, job: recipes.run_train(
                req.features_path,
                req.out_checkpoint,
                resolved,
                resume_from=req.resume_from,
                progress=job.report,
            ),
        )

    @app.post("/adapt", response_model=schemas.JobCreated)
    def adapt(req: schemas.AdaptRequest):
        return _submit(
            "adapt",
            req,
            lambda resolved, job: recipes.run_adapt(
                req.checkpoint,
                req.features_path,
                req.out_checkpoint,
                resolved,
                from_scratch=req.from_scratch,
                progress=job.report,
            ),
        )

    @app.post("/clone", response_model=schemas.JobCreated)
    def clone_endpoint(req: schemas.CloneRequest):
        return _submit(
            "clone",
            req,
            lambda resolved, job: recipes.run_clone(
                req.checkpoint,
                req.features_path,
                req.out_checkpoint,
                resolved,
                supervised=req.supervised,
                progress=job.report,
            ),
        )

    @app.post("/experiments/matrix", response_model=schemas.JobCreated)
    def matrix(req: schemas.MatrixRequest):
        return _submit(
            "matrix",
            req,
            lambda resolved, job: recipes.run_matrix(
                req.corpus_dir,
                req.out_dir,
                resolved,
                pretrain_steps=req.pretrain_steps,
                target_steps=req.target_steps,
                clone_steps=req.clone_steps,
                progress=job.report,
            ),
        )

    @app.get("/jobs", response_model=list[schemas.JobStatus])
    def jobs():
        return registry.all_status()

    @app.get("/jobs/{job_id}", response_model=schemas.JobStatus)
    def job_status(job_id: str):
        job = registry.get(job_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"no such job {job_id}")
        return job.status()

    @app.post("/synthesize", response_model=schemas.SynthResponse)
    def synthesize(req: schemas.SynthRequest):
        return guarded(
            recipes.run_synth,
            req.checkpoint,
            req.phone_file,
            req.f0_file,
            req.speaker,
            req.out_mel,
            req.out_wav,
        )

    @app.post("/convert", response_model=schemas.ConvertResponse)
    def convert(req: schemas.ConvertRequest):
        return guarded(
            recipes.run_convert,
            req.checkpoint,
            req.source_wav,
            req.f0_file,
            req.speaker,
            req.out_mel,
        )

    @app.post("/evaluate")
    def evaluate_endpoint(req: schemas.EvalRequest):
        return guarded(
            recipes.run_eval, req.checkpoint, req.features_path, req.system, req.out_path
        )

    @app.post("/plot", response_model=schemas.PlotResponse)
    def plot(req: schemas.PlotRequest):
        return guarded(recipes.run_plot, req.mel_path, req.out_png, req.title)

    return app
