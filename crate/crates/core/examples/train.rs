//! Train a small grounding model on synthetic data and report metrics.

use vidground::config::TrainConfig;
use vidground::train::{RunLog, Trainer};

const CONFIG: &str = r#"
[data]
num_frames = 6
resolution = 32
[data.train]
kind = "synth"
num_videos = 8
[model]
dim = 32
num_queries = 4
box_mode = "delta"
[train]
batch_size = 4
lr = 3e-3
epochs = 15
eval_train = true
"#;

fn main() -> vidground::Result<()> {
    let config = TrainConfig::from_toml_str(CONFIG)?;
    let mut trainer = Trainer::from_config(&config)?;
    let mut log = RunLog::in_memory();
    trainer.run(&mut log)?;
    for (epoch, m) in log.epoch_metrics("train") {
        println!("epoch {epoch:2} accu@0.5={:.3} m_iou={:.3}", m.accuracy_at(0.5).unwrap_or(0.0), m.m_iou);
    }
    let last = log.losses().last().expect("at least one step");
    println!(
        "final loss {:.4} = match {:.4} + {} * entity {:.4}",
        last.total, last.match_loss, last.entity_weight, last.entity
    );
    Ok(())
}
