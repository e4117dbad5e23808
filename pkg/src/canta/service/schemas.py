"""Pydantic request/response models for the HTTP service.

Requests reference files by server-side path: the service and its clients
share a filesystem (desk-scale deployment). Config resolution order is
config file < inline config < dotted overrides.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class ConfiguredRequest(BaseModel):
    config_path: Optional[str] = None
    config: Optional[dict] = None
    overrides: Optional[dict] = Field(
        default=None, description='dotted keys, e.g. {"train.max_steps": 500}'
    )


class CorpusRequest(ConfiguredRequest):
    out_dir: str
    export_wav: bool = False


class CorpusResponse(BaseModel):
    manifest_path: str
    feature_fingerprint: str
    subsets: dict
    scripts: list


class FeatureItemSpec(BaseModel):
    wav: str
    phones: str
    f0: str
    singer_id: int


class FeaturesRequest(ConfiguredRequest):
    items: list[FeatureItemSpec]
    out_path: str
    stats_from: Optional[str] = None


class FeaturesResponse(BaseModel):
    path: str
    n_utterances: int
    fingerprint: str


class TrainRequest(ConfiguredRequest):
    features_path: str
    out_checkpoint: str
    resume_from: Optional[str] = None


class AdaptRequest(ConfiguredRequest):
    checkpoint: str
    features_path: str
    out_checkpoint: str
    from_scratch: bool = False


class CloneRequest(ConfiguredRequest):
    checkpoint: str
    features_path: str
    out_checkpoint: str
    supervised: bool = False


class MatrixRequest(ConfiguredRequest):
    corpus_dir: str
    out_dir: str
    pretrain_steps: Optional[int] = None
    target_steps: Optional[int] = None
    clone_steps: Optional[int] = None


class JobCreated(BaseModel):
    job_id: str
    kind: str
    state: str


class JobStatus(BaseModel):
    job_id: str
    kind: str
    state: str  # queued | running | done | error
    progress: Optional[dict] = None
    result: Optional[dict] = None
    error: Optional[str] = None


class SynthRequest(BaseModel):
    checkpoint: str
    phone_file: str
    f0_file: str
    speaker: int
    out_mel: str
    out_wav: Optional[str] = None


class SynthResponse(BaseModel):
    mel_path: str
    wav_path: Optional[str] = None
    n_frames: int
    n_bands: int


class ConvertRequest(BaseModel):
    checkpoint: str
    source_wav: str
    f0_file: str
    speaker: int
    out_mel: str


class ConvertResponse(BaseModel):
    mel_path: str
    n_frames: int
    n_bands: int


class EvalRequest(BaseModel):
    checkpoint: str
    features_path: str
    system: str = "model"
    out_path: Optional[str] = None  # append the report as one JSON line


class PlotRequest(BaseModel):
    mel_path: str
    out_png: str
    title: Optional[str] = None


class PlotResponse(BaseModel):
    png_path: str


class HealthResponse(BaseModel):
    status: str
    version: str
