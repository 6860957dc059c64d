"""API routes for pulse evaluation, export and analysis."""

from typing import Annotated

from fastapi import APIRouter, File, Form, HTTPException, UploadFile, status

from app.api.dependencies import PhysicsDep, SettingsDep
from app.core.exceptions import DomainError, FitError, PropagationError, WeightsFormatError
from app.models.physics import AtomSystem
from app.models.schemas import (
    ErrorResponse,
    FidelityReport,
    FidelityRequest,
    FitRequest,
    FitResult,
    HealthResponse,
    PulseFile,
    RatioRequest,
    RatioResponse,
)
from app.services.evaluation import decomposition_ratio, decomposition_time, fit_times, preset_ratio
from app.services.pulse_export import export_pulse, pulse_for, simulate_samples
from app.services.weights_io import deserialize

router = APIRouter(tags=["pulses"])


@router.get("/health", response_model=HealthResponse)
async def health_check(settings: SettingsDep) -> HealthResponse:
    """Health check endpoint."""
    return HealthResponse(status="healthy", version=settings.api_version)


@router.post(
    "/pulse/export",
    response_model=PulseFile,
    responses={
        400: {"model": ErrorResponse, "description": "Angle or resolution out of range"},
        413: {"model": ErrorResponse, "description": "File too large"},
        422: {"model": ErrorResponse, "description": "Malformed weights file"},
    },
)
async def export_pulse_endpoint(
    file: Annotated[UploadFile, File(description="Weights file of one trained interval")],
    phi: Annotated[float, Form(description="Gate angle in (0, pi]")],
    settings: SettingsDep,
    physics: PhysicsDep,
    resolution: Annotated[int, Form(description="Number of grid intervals")] = 400,
    rabi_frequency_mhz: Annotated[float | None, Form(description="omega_max / 2 pi in MHz")] = None,
) -> PulseFile:
    """Sample the pulse a trained network produces for ``phi``.

    Returns the waveform on a uniform grid in internal and laboratory units.
    """
    content = await file.read()
    max_size = settings.max_upload_mb * 1024 * 1024
    if len(content) > max_size:
        raise HTTPException(
            status_code=status.HTTP_413_REQUEST_ENTITY_TOO_LARGE,
            detail=f"File exceeds maximum size of {settings.max_upload_mb}MB",
        )

    try:
        net, header = deserialize(content)
    except WeightsFormatError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            detail=f"Invalid weights file: {e.message}",
        )

    try:
        pulse = pulse_for(net, phi)
        return export_pulse(pulse, header.gate, resolution, rabi_frequency_mhz or physics.rabi_frequency_mhz)
    except DomainError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=e.message)


@router.post(
    "/fidelity",
    response_model=FidelityReport,
    responses={
        400: {"model": ErrorResponse, "description": "Invalid pulse"},
        422: {"model": ErrorResponse, "description": "Propagation failed"},
    },
)
def fidelity(request: FidelityRequest) -> FidelityReport:
    """Infidelity decomposition of a sampled detuning waveform."""
    sys = AtomSystem(n_atoms=request.gate.n_atoms, blockade_b=request.blockade_b, gamma=request.gamma)
    try:
        return simulate_samples(
            request.gate, request.phi, request.duration, request.detuning, request.theta_c, sys
        )
    except DomainError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=e.message)
    except PropagationError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=e.message)


@router.post(
    "/fit",
    response_model=FitResult,
    responses={422: {"model": ErrorResponse, "description": "Fit failed"}},
)
def fit(request: FitRequest) -> FitResult:
    """Fit pulse durations against gate angles."""
    try:
        return fit_times(request.phis, request.durations, request.model)
    except FitError as e:
        raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=e.message)


@router.post(
    "/ratio",
    response_model=RatioResponse,
    responses={400: {"model": ErrorResponse, "description": "Invalid times or gate counts"}},
)
async def ratio(request: RatioRequest) -> RatioResponse:
    """Ratio of decomposition time to native pulse time."""
    try:
        if request.gate_counts:
            if request.native_time is None:
                raise DomainError("native_time is required with explicit gate counts")
            t_d = decomposition_time(request.gate_counts)
            return RatioResponse(
                decomposition_time=t_d,
                native_time=request.native_time,
                ratio=decomposition_ratio(t_d, request.native_time),
            )
        if request.preset is None:
            raise DomainError("Provide either a preset or gate counts")
        t_d, t_n, value = preset_ratio(request.preset, native_time=request.native_time)
        return RatioResponse(decomposition_time=t_d, native_time=t_n, ratio=value)
    except DomainError as e:
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=e.message)
