from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from backend.experiments_router import router as experiments_router
from backend.utils.logger import setup_logger
import logging

# Configuration du logging
setup_logger()
logger = logging.getLogger(__name__)

app = FastAPI(title="Reweigh", description="Repondération d'échantillons bi-niveau")
app.include_router(experiments_router)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["http://localhost:5173", "http://localhost:5174"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)
