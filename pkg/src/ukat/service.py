"""HTTP inference server around one loaded model.

Routes: ``GET /health``, ``GET /model``, ``POST /infer`` (JSON samples),
``POST /infer/wav`` (raw WAV body) and ``POST /decide`` (score vector).
"""

from __future__ import annotations

import io
from typing import List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel, Field
from scipy.io import wavfile

from .dsp import Waveform, resample
from .errors import UkatError
from .inference import DecisionConfig, conditional_decide, decide, infer_waveform
from .model import count_parameters, load_model


class DecisionOptions(BaseModel):
    gamma: float = Field(0.4, ge=0.0, le=1.0)
    condition: List[str] = []
    theta: float = Field(0.5, ge=0.0, le=1.0)


class InferRequest(DecisionOptions):
    samples: List[float]
    sample_rate: int = Field(16000, gt=0)
    chunk_s: float = Field(1.0, gt=0.0)
    top_n: Optional[int] = Field(3, ge=1)
    threshold: Optional[float] = Field(None, ge=0.0, le=1.0)


class DecideRequest(DecisionOptions):
    scores: List[float]


class DecisionOut(BaseModel):
    label: Optional[str]
    branch: str
    score: float
    suppressed: bool = False


class EventOut(BaseModel):
    label: str
    score: float


class ChunkRecord(BaseModel):
    chunk_index: int
    start_s: float
    decision: DecisionOut
    events: List[EventOut]


class InferResponse(BaseModel):
    records: List[ChunkRecord]


class ModelInfo(BaseModel):
    sound_events: List[str]
    keywords: List[str]
    parameters: int
    sample_rate: int
    n_mels: int


def create_app(model_path) -> FastAPI:
    params, vocab, _, frontend, _ = load_model(model_path)
    app = FastAPI(title="ukat", version="0.1.0")

    def run(w: Waveform, opts: InferRequest) -> InferResponse:
        if w.sample_rate != frontend.sample_rate:
            w = resample(w, frontend.sample_rate)
        try:
            cfg = DecisionConfig(opts.gamma, tuple(opts.condition), opts.theta)
            records = infer_waveform(params, vocab, frontend, w, cfg, opts.chunk_s,
                                     opts.threshold, opts.top_n)
        except UkatError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return InferResponse(records=records)

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.get("/model", response_model=ModelInfo)
    def model_info():
        return ModelInfo(sound_events=list(vocab.at_labels), keywords=list(vocab.kws_labels),
                         parameters=count_parameters(params),
                         sample_rate=frontend.sample_rate, n_mels=frontend.n_mels)

    @app.post("/infer", response_model=InferResponse)
    def infer(req: InferRequest):
        if not req.samples:
            raise HTTPException(status_code=422, detail="no samples")
        try:
            w = Waveform(np.asarray(req.samples), req.sample_rate)
        except UkatError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return run(w, req)

    @app.post("/infer/wav", response_model=InferResponse)
    async def infer_wav(request: Request, gamma: float = 0.4, theta: float = 0.5,
                        chunk_s: float = 1.0, top_n: int = 3):
        body = await request.body()
        try:
            rate, data = wavfile.read(io.BytesIO(body))
        except (ValueError, EOFError) as exc:
            raise HTTPException(status_code=400, detail=f"unreadable WAV: {exc}") from None
        data = data.astype(np.float64) / (32768.0 if data.dtype == np.int16 else 1.0)
        if data.ndim == 2:
            data = data.mean(axis=1)
        if data.size == 0:
            raise HTTPException(status_code=422, detail="empty WAV")
        opts = InferRequest(samples=[], gamma=gamma, theta=theta, chunk_s=chunk_s, top_n=top_n)
        return run(Waveform(data, int(rate)), opts)

    @app.post("/decide", response_model=DecisionOut)
    def decide_route(req: DecideRequest):
        try:
            cfg = DecisionConfig(req.gamma, tuple(req.condition), req.theta)
            p = np.asarray(req.scores, dtype=np.float64)
            d = conditional_decide(p, vocab, cfg) if cfg.condition else decide(p, vocab, cfg)
        except UkatError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return DecisionOut(**d.to_json())

    return app
