"""
Hawkes Market-Making Lab

FastAPI application exposing the simulator:
- Health check
- Run configuration
- Single episodes and short backtests with the benchmark controllers
"""

import logging

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, RedirectResponse

from app.api.simulation import router as simulation_router
from app.config import settings
from app.exceptions import MarketLabError

logger = logging.getLogger(__name__)

app = FastAPI(
    title=settings.app_name,
    description="Market making on a Hawkes-driven limit order book",
    version=settings.app_version,
    docs_url="/docs",
    redoc_url="/redoc",
)

app.include_router(simulation_router, prefix="/api/simulation", tags=["simulation"])


@app.exception_handler(MarketLabError)
def market_lab_error_handler(request: Request, exc: MarketLabError):
    logger.warning("%s %s failed: %s", request.method, request.url.path, exc)
    return JSONResponse(status_code=400, content={"detail": str(exc), "error": type(exc).__name__})


# Health check endpoint
@app.get("/health")
def health_check():
    """Health check endpoint."""
    return {"status": "healthy", "service": settings.app_name}


# API documentation redirect
@app.get("/api")
def api_redirect():
    """Redirect to API documentation."""
    return RedirectResponse(url="/docs")


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=8000)
