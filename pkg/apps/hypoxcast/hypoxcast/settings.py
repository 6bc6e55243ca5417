from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    APP_NAME: str = "Hypoxcast"
    LOG_LEVEL: str = "INFO"
    MODEL_DIR: str = "models"
    INFER_BATCH_SIZE: int = 4096
    RUN_LOCK_NAME: str = ".hypoxcast.lock"
    CORS_ORIGINS: list[str] = ["http://localhost:5000", "http://localhost:3000"]


settings = Settings()
