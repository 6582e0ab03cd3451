from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import JSONResponse
from byzfl import __version__
from byzfl.api import experiments, registry
from byzfl.config import settings
from byzfl.exceptions import ByzflError, ConfigurationError, ParseError
import logging

logging.basicConfig(level=settings.log_level)
logger = logging.getLogger(__name__)

# Create FastAPI app
app = FastAPI(
    title="Byzantine FL Simulator API",
    description="Expand and run Byzantine-robust federated learning experiments",
    version=__version__,
    docs_url="/docs",
    redoc_url="/redoc"
)


# Request logging middleware
@app.middleware("http")
async def log_requests(request: Request, call_next):
    logger.info(f"📥 {request.method} {request.url.path}")
    response = await call_next(request)
    logger.info(f"📤 Response status: {response.status_code}")
    return response


# Include routers
app.include_router(registry.router, prefix="/api", tags=["Registry"])
app.include_router(experiments.router, prefix="/api", tags=["Experiments"])


# Global exception handlers
def error_response(request: Request, status_code: int, error: str, message: str, field_path=None) -> JSONResponse:
    """One error body for HTTP and simulator errors, tagged with the request path."""
    return JSONResponse(
        status_code=status_code,
        content={
            "error": error,
            "message": message,
            "field_path": field_path,
            "path": request.url.path,
            "status_code": status_code,
        },
    )


@app.exception_handler(HTTPException)
async def http_exception_handler(request: Request, exc: HTTPException):
    logger.warning(f"⚠️ {request.url.path}: {exc.status_code} {exc.detail}")
    return error_response(request, exc.status_code, "NotFound" if exc.status_code == 404 else "HTTPError", str(exc.detail))


@app.exception_handler(ByzflError)
async def byzfl_exception_handler(request: Request, exc: ByzflError):
    # 422 for bad input, 400 for failures while running
    status_code = 422 if isinstance(exc, (ConfigurationError, ParseError)) else 400
    logger.error(f"❌ {request.url.path}: {type(exc).__name__}: {exc}")
    return error_response(request, status_code, type(exc).__name__, str(exc), getattr(exc, "field_path", None))


# Health check endpoint
@app.get("/health")
async def health_check():
    return {"status": "healthy", "message": "Byzantine FL Simulator API is running"}


# Root endpoint
@app.get("/")
async def root():
    return {
        "message": "Welcome to the Byzantine FL Simulator API",
        "version": __version__,
        "docs": "/docs",
        "redoc": "/redoc"
    }
