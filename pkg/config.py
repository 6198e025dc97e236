"""Runtime configuration for the LR membrane solver."""

import os
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field


class Config(BaseSettings):
    """Process-wide settings loaded from environment variables (prefix LRM_)."""

    model_config = SettingsConfigDict(
        env_file=".env" if os.path.exists(".env") else None,
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        env_prefix="LRM_"
    )

    # Output
    output_root: str = Field(default="runs")
    snapshot_meshes: bool = Field(default=True)
    vtk_samples: int = Field(default=3, ge=2)

    # Assembly
    assembly_workers: int = Field(default=1, ge=1)

    # Newton solver defaults (scenario files may override them)
    newton_max_iterations: int = Field(default=25, ge=1)
    newton_max_halvings: int = Field(default=8, ge=0)
    residual_tolerance: float = Field(default=1e-9, gt=0)
    volume_tolerance: float = Field(default=1e-10, gt=0)

    # Logging
    log_level: str = Field(default="INFO")


# Global config instance
config = Config()
