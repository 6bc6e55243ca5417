"""
FastAPI application serving hypoxemia forecasts from saved model containers
"""
import io
import logging

from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware

from . import __version__, store
from .dataset import load_cohort
from .errors import ContainerError, DataValidationError
from .inference import model_schema, score_model
from .settings import settings

logger = logging.getLogger(__name__)

app = FastAPI(title=settings.APP_NAME, version=__version__)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=False,
    allow_methods=["GET", "POST"],
    allow_headers=["*"],
)


@app.get("/health")
def health():
    return {"status": "ok", "service": "hypoxcast"}


@app.get("/models")
def get_models():
    return store.list_models()


def _entry(name: str) -> dict:
    try:
        entry = store.get_model(name)
    except ContainerError as e:
        raise HTTPException(status_code=500, detail=f"model '{name}' is unreadable: {e}")
    if entry is None:
        raise HTTPException(status_code=404, detail=f"no model named '{name}'")
    return entry


@app.get("/models/{name}")
def get_model(name: str):
    entry = _entry(name)
    schema = model_schema(entry["model"])
    return {
        "name": name,
        "kind": entry["kind"],
        "loaded_at": entry["loaded_at"],
        "time_series": list(schema.time_series),
        "statics": list(schema.statics),
    }


@app.post("/models/{name}/predict/csv")
async def predict_csv(name: str, file: UploadFile = File(...), threshold: float | None = Form(None)):
    entry = _entry(name)
    data = await file.read()
    text = data.decode("utf-8", errors="ignore")
    try:
        cohort = load_cohort(io.StringIO(text), model_schema(entry["model"]))
        scores = score_model(entry["model"], cohort, entry["path"].parent)
    except DataValidationError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.exception(f"Scoring with '{name}' failed")
        raise HTTPException(status_code=500, detail=f"scoring failed: {e}")

    rows = []
    for sid, t, p in zip(scores["surgery_id"], scores["time_min"], scores["probability"]):
        row = {"surgery_id": str(sid), "time_min": int(t), "probability": float(p)}
        if threshold is not None:
            row["alert"] = bool(p >= threshold)
        rows.append(row)
    return {"model": name, "surgeries": len(cohort.surgeries), "rows": len(rows), "predictions": rows}
