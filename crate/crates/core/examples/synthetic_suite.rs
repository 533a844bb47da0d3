//! Writes a seeded synthetic suite plus a matching run config.
//!
//! cargo run -p compeval-core --example synthetic_suite -- OUT_DIR [SCENES] [SEED]

use std::path::PathBuf;

use compeval_core::testkit::{generate_suite, write_suite, SuiteConfig};

fn main() -> compeval_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let defaults = SuiteConfig::default();
    let scenes = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(defaults.scenes);
    let seed = args
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(defaults.seed);
    let cases = generate_suite(&SuiteConfig {
        scenes,
        seed,
        ..defaults
    })?;
    write_suite(&cases, &out)?;
    let config = serde_json::json!({
        "prompt_set": "prompts.jsonl",
        "image_root": "images",
        "output_dir": "runs",
        "generator": {"kind": "oracle"},
        "detector": {"kind": "oracle"},
        "vqa": {"kind": "oracle", "soft": false},
    });
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&config)?)?;
    println!("{} scenes written to {}", cases.len(), out.display());
    Ok(())
}
