//! Save a checkpoint mid-run, restore it, and score predictions from a file.

use vidground::config::TrainConfig;
use vidground::train::{read_predictions, score_predictions, write_predictions, RunLog, Trainer};

const CONFIG: &str = r#"
[data]
num_frames = 4
resolution = 32
[data.train]
kind = "synth"
num_videos = 4
[model]
dim = 16
num_queries = 4
[train]
batch_size = 2
epochs = 2
eval_train = false
"#;

fn main() -> vidground::Result<()> {
    let dir = std::env::temp_dir().join("vidground-checkpoint-example");
    let config = TrainConfig::from_toml_str(CONFIG)?;
    let mut trainer = Trainer::from_config(&config)?;
    trainer.train_epoch(&mut RunLog::in_memory())?;
    trainer.save_checkpoint(&dir)?;
    let expected = trainer.peek_next_loss()?.total;

    let mut restored = Trainer::from_config(&config)?;
    restored.load_checkpoint(&dir)?;
    println!("next loss {expected:.10} / restored {:.10}", restored.peek_next_loss()?.total);

    let data = restored.train_set();
    let tubes = restored.predict(data)?;
    let path = dir.join("predictions.jsonl");
    write_predictions(data, &tubes, &path)?;
    let report = score_predictions(&data.manifest, &read_predictions(&path)?, &config.eval)?;
    print!("{}", report.to_key_values());
    Ok(())
}
