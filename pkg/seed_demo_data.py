"""
seed_demo_data.py
Script to populate data/ with a demo run config and a synthetic panel for development.
Idempotent: files that already exist are left alone.
"""
import json

from app.models import DataSection, EvalSection, ModelSection, RunConfig, Scheme, TrainConfig
from src.dataset_io import save_dataset, split_by_time
from src.settings import get_settings
from src.synth import default_boundaries, demo_config, generate_with_latents, latents_path_for, save_latents

SEED = 7


def demo_run_config(data_path):
    synth = demo_config(SEED)
    train_end, val_end = default_boundaries(synth)
    return RunConfig(
        seed=SEED,
        synth=synth,
        data=DataSection(path=str(data_path), train_end=train_end, val_end=val_end),
        model=ModelSection(kind="MIXTURE", hidden_dim=32),
        train=TrainConfig(batch_size=64, epochs=10, base_lr=1e-3, dropout=0.1, seed=SEED,
                          scheme=Scheme.MIXTURE_DECOUPLED),
        eval=EvalSection(),
    )


if __name__ == "__main__":
    settings = get_settings()
    settings.data_dir.mkdir(parents=True, exist_ok=True)
    data_path = settings.data_dir / "demo.mfnr"
    config_path = settings.data_dir / "demo_config.json"
    config = demo_run_config(data_path)

    if not config_path.exists():
        config_path.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        print(f"Wrote demo config to {config_path}.")

    if not data_path.exists():
        dataset, latents = generate_with_latents(config.synth)
        dataset = split_by_time(dataset, config.data.train_end, config.data.val_end)
        save_dataset(dataset, data_path)
        save_latents(latents, latents_path_for(data_path))
        print(f"Wrote {len(dataset)} instances to {data_path}.")

    print("Demo data seeded into", settings.data_dir)
