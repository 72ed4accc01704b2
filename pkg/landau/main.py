import logging
import time
from typing import Optional

from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from landau.config import LANDAU_RUNS_DIR
from landau.errors import LandauError
from landau.routes import run_routes
from landau.services.utils import software_version

logger = logging.getLogger(__name__)


# Helper to simplify operation IDs for cleaner API docs
def simplify_operation_ids(app: FastAPI) -> None:
    from fastapi.routing import APIRoute
    for route in app.routes:
        if isinstance(route, APIRoute):
            route.operation_id = route.name


def create_app(runs_dir: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="landau results", version=software_version())
    app.state.runs_dir = runs_dir or LANDAU_RUNS_DIR
    app.include_router(run_routes.router)
    logger.info("Serving runs from %s", app.state.runs_dir)

    @app.exception_handler(LandauError)
    async def landau_error_handler(request: Request, exc: LandauError):
        logger.error("%s %s - %s", request.method, request.url.path, exc)
        return JSONResponse(
            status_code=500,
            content={"detail": str(exc), "type": type(exc).__name__, "exit_code": exc.exit_code},
        )

    # Global error handler
    @app.exception_handler(Exception)
    async def global_exception_handler(request: Request, exc: Exception):
        logger.exception("%s %s failed", request.method, request.url.path)
        if isinstance(exc, HTTPException):
            return JSONResponse(status_code=exc.status_code, content={"detail": exc.detail, "type": "HTTPException"})
        return JSONResponse(
            status_code=500,
            content={"detail": f"Internal Server Error: {exc}", "type": type(exc).__name__},
        )

    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_credentials=False,
        allow_methods=["GET"],
        allow_headers=["*"],
    )

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        start_time = time.time()
        response = await call_next(request)
        logger.debug("%s %s -> %d (%.2fms)", request.method, request.url.path, response.status_code,
                     (time.time() - start_time) * 1000)
        return response

    @app.get("/api/health")
    async def health():
        return {"status": "ok", "version": software_version()}

    simplify_operation_ids(app)
    return app
