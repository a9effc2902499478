//! Content-aware against content-agnostic queries on one seed; writes curves as CSV.

use vidground::config::TrainConfig;
use vidground::experiments::convergence_experiment;
use vidground::plot::{series_csv, write_text};

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
epochs = 10
"#;

fn main() -> vidground::Result<()> {
    let rec = convergence_experiment(&TrainConfig::from_toml_str(CONFIG)?, 0.5, 0.5)?;
    for run in [&rec.content_aware, &rec.content_agnostic] {
        let last = run.accuracy.points.last().map_or(0.0, |p| p.1);
        println!("{}: epochs to target {:?}, final accu@0.5 {last:.3}", run.label, run.epochs_to_threshold);
    }
    let out = std::env::temp_dir().join("vidground-accuracy.csv");
    write_text(&out, &series_csv(&rec.accuracy_series()))?;
    println!("curves in {}", out.display());
    Ok(())
}
