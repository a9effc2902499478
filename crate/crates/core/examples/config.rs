//! Print the default configuration, every key included, and its hash.

use vidground::config::TrainConfig;

fn main() -> vidground::Result<()> {
    let config = TrainConfig::default();
    print!("{}", config.to_toml_string()?);
    println!("# hash {}", config.hash());
    Ok(())
}
