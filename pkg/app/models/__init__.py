from app.models.run import Run, RunStatus, GlobalUpdate, EpisodeRecord

# For alembic to detect models
__all__ = ["Run", "RunStatus", "GlobalUpdate", "EpisodeRecord"]
