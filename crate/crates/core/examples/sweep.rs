//! Accuracy and wall time as the number of input frames grows.

use vidground::config::TrainConfig;
use vidground::experiments::{sweep, sweep_table, SweepAxis};

const CONFIG: &str = r#"
[data]
resolution = 32
[data.train]
kind = "synth"
num_videos = 4
[model]
dim = 16
num_queries = 4
[train]
batch_size = 4
epochs = 3
eval_train = false
"#;

fn main() -> vidground::Result<()> {
    let config = TrainConfig::from_toml_str(CONFIG)?;
    let rows = sweep(&config, SweepAxis::Frames, &[2, 4, 8])?;
    print!("{}", sweep_table(&rows));
    Ok(())
}
