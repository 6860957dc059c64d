"""API dependencies for dependency injection."""

from functools import lru_cache
from typing import Annotated

from fastapi import Depends

from app.core.config import PhysicsConfig, Settings, get_settings


@lru_cache
def get_physics_config() -> PhysicsConfig:
    """Default physical parameters for requests that do not override them."""
    return PhysicsConfig()


# Type aliases for dependency injection
SettingsDep = Annotated[Settings, Depends(get_settings)]
PhysicsDep = Annotated[PhysicsConfig, Depends(get_physics_config)]
