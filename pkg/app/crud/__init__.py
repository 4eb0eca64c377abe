from app.crud.run import run, global_update, episode_record

__all__ = ["run", "global_update", "episode_record"]
