//! Manifest checks: a clean manifest parses, a corrupted one names the bad sample.

use vidground::data::manifest::{parse_manifest, write_manifest};
use vidground::data::{synth_generate, SynthSpec};

fn main() -> vidground::Result<()> {
    let data = synth_generate(&SynthSpec {
        num_videos: 2,
        ..SynthSpec::default()
    })?;
    let mut text = Vec::new();
    write_manifest(&data.manifest, &mut text)?;
    let text = String::from_utf8(text).expect("utf-8 manifest");
    let ok = parse_manifest(text.as_bytes(), ".".into())?;
    println!("clean manifest: {} samples", ok.samples.len());

    let broken = text.replacen("\"word_end\":2", "\"word_end\":40", 1);
    match parse_manifest(broken.as_bytes(), ".".into()) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("rejected: {e}"),
    }
    Ok(())
}
