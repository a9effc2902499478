//! Query-word similarity of the selected query after a short run; saved as PNG.

use vidground::config::TrainConfig;
use vidground::experiments::{alignment_heatmap, alignment_summary, alignment_heatmaps};
use vidground::plot::{render_matrix, save_png};
use vidground::train::{RunLog, Trainer};

const CONFIG: &str = r#"
[data]
num_frames = 4
resolution = 32
[data.train]
kind = "synth"
num_videos = 8
[model]
dim = 32
num_queries = 4
[train]
batch_size = 4
lr = 3e-3
epochs = 10
eval_train = false
"#;

fn main() -> vidground::Result<()> {
    let mut trainer = Trainer::from_config(&TrainConfig::from_toml_str(CONFIG)?)?;
    trainer.run(&mut RunLog::in_memory())?;
    let data = trainer.train_set();
    let map = alignment_heatmap(&trainer.model, data, 0)?;
    println!("{} frame {}: {}", map.video_id, map.frame, map.words.join(" "));
    let row: Vec<String> = map.selected_row().iter().map(|v| format!("{v:+.2}")).collect();
    println!("query {} similarities: {}", map.selected_query, row.join(" "));
    println!("top word `{}`, in subject phrase: {}", map.words[map.top_word()], map.top_word_in_span());

    let all: Vec<usize> = (0..data.len()).collect();
    let summary = alignment_summary(&alignment_heatmaps(&trainer.model, data, &all)?);
    println!("top word in span for {:.0}% of samples (chance {:.0}%)", 100.0 * summary.top_word_in_span, 100.0 * summary.chance);

    let out = std::env::temp_dir().join("vidground-heatmap.png");
    save_png(&render_matrix(&map.similarity, -1.0, 1.0, 16), &out)?;
    println!("heatmap in {}", out.display());
    Ok(())
}
