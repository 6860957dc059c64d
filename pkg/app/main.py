"""FastAPI application entry point."""

import logging
from contextlib import asynccontextmanager
from typing import AsyncGenerator

import torch
from fastapi import FastAPI, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from app.api.dependencies import get_physics_config
from app.api.routes import router
from app.core.config import configure_logging, get_settings
from app.core.exceptions import RydbergControlError
from app.models.schemas import ErrorResponse

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncGenerator[None, None]:
    """Configure logging and torch threads, report the physics defaults."""
    settings = get_settings()
    configure_logging(settings.log_level)
    if settings.threads:
        torch.set_num_threads(settings.threads)
    physics = get_physics_config()
    logger.info(
        "Serving %s on torch %s (%d threads): omega_max/2pi=%.3g MHz, B=%.4g, tau=%.4g us",
        settings.api_version,
        torch.__version__,
        torch.get_num_threads(),
        physics.rabi_frequency_mhz,
        physics.blockade_b,
        physics.lifetime_us,
    )
    yield
    logger.info("Service stopped")


async def rydberg_error_handler(request: Request, exc: RydbergControlError) -> JSONResponse:
    """Domain errors the routes do not map themselves."""
    logger.error("%s on %s: %s", type(exc).__name__, request.url.path, exc.message)
    return JSONResponse(
        status_code=status.HTTP_400_BAD_REQUEST,
        content=ErrorResponse(error=exc.message, details=type(exc).__name__).model_dump(),
    )


def create_app() -> FastAPI:
    """Create and configure the FastAPI application."""
    settings = get_settings()

    app = FastAPI(
        title=settings.api_title,
        description=settings.api_description,
        version=settings.api_version,
        lifespan=lifespan,
        docs_url=f"{settings.api_prefix}/docs",
        redoc_url=f"{settings.api_prefix}/redoc",
        openapi_url=f"{settings.api_prefix}/openapi.json",
    )

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.add_exception_handler(RydbergControlError, rydberg_error_handler)
    app.include_router(router, prefix=settings.api_prefix)

    return app


app = create_app()


if __name__ == "__main__":
    from app.cli import main

    raise SystemExit(main(["serve"]))
