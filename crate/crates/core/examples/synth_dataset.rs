//! Generate a small moving-shapes dataset and write it to disk.
//!
//! `cargo run --example synth_dataset -- <out-dir>`

use vidground::data::{synth_generate, Dataset, SynthSpec};

fn main() -> vidground::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth_out".into());
    let spec = SynthSpec {
        num_videos: 4,
        num_frames: 12,
        untrimmed_window: Some([4, 8]),
        ..SynthSpec::default()
    };
    let data = synth_generate(&spec)?;
    for s in &data.manifest.samples {
        let span = s.gt_tube.span();
        let e = &s.entity_spans[0];
        let words = s.words();
        println!(
            "{}: \"{}\" subject=\"{}\" frames {}..={}",
            s.video_id,
            s.sentence,
            words[e.words()].join(" "),
            span.start_frame,
            span.end_frame
        );
    }
    let path = data.write(&out)?;
    let back = Dataset::open(&path)?;
    println!("wrote {} samples to {}", back.len(), path.display());
    Ok(())
}
